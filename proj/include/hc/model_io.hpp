#pragma once

#include "hc/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hc::model {

// Where model artifacts live. `base_url` + repo/revision/filename resolve to
// the usual hub download layout: <base>/<repo>/resolve/<rev>/<file>.
struct HubSource {
    std::string base_url;
    std::string repo_id;
    std::string revision = "main";
    std::vector<std::string> files;

    std::string url_for(const std::string& filename) const;
    void validate() const;
};

struct FetchError : Error {
    using Error::Error;
};
// Transient transport problem; the call may be retried.
struct NetworkError : FetchError {
    using FetchError::FetchError;
};
// Payload did not match the advertised digest. Not retryable by re-reading
// the cache: the entry has been purged.
struct ChecksumError : FetchError {
    using FetchError::FetchError;
};
struct NotFoundError : FetchError {
    using FetchError::FetchError;
};

struct FetchOptions {
    int max_attempts = 3;
    // Verify the cached file's digest against the manifest before reusing it.
    bool verify_cache_digest = false;
};

// Resolves the artifact cache directory: HC_CACHE_DIR if set, otherwise
// ~/.cache/headchannels.
std::filesystem::path default_cache_dir();

// True when HC_OFFLINE forbids network access (warm cache required).
bool offline_mode();

// Downloads (or reuses) one artifact. Writes a manifest next to the file
// recording url, sha256, byte length and retrieval time. Concurrent fetches
// of the same entry are serialized through a lock file.
std::filesystem::path fetch_artifact(const HubSource& source,
                                     const std::string& filename,
                                     const std::filesystem::path& cache_dir,
                                     const FetchOptions& opts = {});

std::string sha256_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

enum class DType { F32, F16, BF16, I64, Bool, U8 };

int dtype_width(DType t);
DType dtype_from_string(const std::string& s);

struct TensorEntry {
    DType dtype;
    std::vector<int64_t> shape;
    size_t begin = 0;  // byte offsets into the blob
    size_t end = 0;

    int64_t numel() const;
};

// Parsed tensor container. Entries are zero-copy spans into one contiguous
// blob owned by the store; the store is immutable after load.
class TensorStore {
  public:
    static TensorStore load(const std::filesystem::path& path);

    bool has(const std::string& name) const;
    const TensorEntry& entry(const std::string& name) const;
    std::span<const std::byte> bytes(const std::string& name) const;
    const std::map<std::string, TensorEntry>& entries() const { return entries_; }

    // Materializes the named tensor as a float32 matrix (rows x cols for 2-D
    // tensors, 1 x n for 1-D). F16/BF16 payloads are promoted.
    MatrixF matrix(const std::string& name) const;
    VectorF vector(const std::string& name) const;

  private:
    std::vector<std::byte> blob_;
    std::map<std::string, TensorEntry> entries_;
};

// ---------------------------------------------------------------------------

struct ModelConfig {
    int n_layers = 0;
    int n_heads_per_layer = 0;
    int d_model = 0;
    int d_head = 0;
    int vocab_size = 0;
    int n_ctx = 0;
    float ln_eps = 1e-5f;

    void validate() const;
    static ModelConfig from_json_file(const std::filesystem::path& path);
};

// Versioned table mapping logical tensor roles to container names.
struct ArchMap {
    std::string version;
    std::string token_embedding;
    std::string positional_embedding;
    std::string final_ln_gain, final_ln_bias;
    // Per-layer names contain one "{L}" placeholder.
    std::string ln1_gain, ln1_bias;
    std::string ln2_gain, ln2_bias;
    std::string fused_qkv_weight, fused_qkv_bias;
    std::string attn_out_weight, attn_out_bias;
    std::string mlp_in_weight, mlp_in_bias;
    std::string mlp_out_weight, mlp_out_bias;

    std::string layer_name(const std::string& pattern, int layer) const;
    std::vector<std::string> all_names(int n_layers) const;

    static ArchMap gpt2();
    static ArchMap from_json_file(const std::filesystem::path& path);
};

// One attention head's weight slices, promoted to f32. All matrices follow
// the row-vector convention: x (1 x d_model) maps through read_* on the right.
struct HeadWeights {
    MatrixF read_q, read_k, read_v;  // d_model x d_head
    MatrixF write_o;                 // d_head x d_model
    VectorF bias_q, bias_k, bias_v;  // d_head
    VectorF bias_o;                  // d_model (shared across the layer's heads)
    VectorF ln_gain;                 // d_model, pre-attention layer norm scale
};

HeadWeights extract_head_weights(const TensorStore& store, const ModelConfig& config,
                                 const ArchMap& arch, int layer, int head);

}  // namespace hc::model
