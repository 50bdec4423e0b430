#include "hc/model_io.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstring>
#include <fstream>
#include <thread>

namespace hc::model {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// HubSource

std::string HubSource::url_for(const std::string& filename) const {
    std::string base = base_url;
    while (!base.empty() && base.back() == '/') base.pop_back();
    return base + "/" + repo_id + "/resolve/" + revision + "/" + filename;
}

void HubSource::validate() const {
    if (base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0)
        throw Error("HubSource.base_url must be an absolute http(s) URL: " + base_url);
    if (files.empty()) throw Error("HubSource.files must be non-empty");
    if (repo_id.empty()) throw Error("HubSource.repo_id must be set");
}

// ---------------------------------------------------------------------------
// Cache + fetch

fs::path default_cache_dir() {
    if (auto dir = env_var("HC_CACHE_DIR")) return fs::path(*dir);
    if (auto home = env_var("HOME")) return fs::path(*home) / ".cache" / "headchannels";
    return fs::path(".headchannels-cache");
}

bool offline_mode() { return env_flag("HC_OFFLINE"); }

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open for hashing: " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    std::vector<char> buf(1 << 20);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        EVP_DigestUpdate(ctx, buf.data(), static_cast<size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

namespace {

struct UrlParts {
    std::string origin;  // scheme://host[:port]
    std::string path;
};

UrlParts split_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error("not an absolute URL: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

// Single-writer guard per cache entry. Stale locks (no liveness heartbeat,
// just age) are broken after five minutes.
class LockFile {
  public:
    explicit LockFile(fs::path path) : path_(std::move(path)) {
        using namespace std::chrono;
        for (int spin = 0;; ++spin) {
            std::error_code ec;
            // O_EXCL-style create via noreplace ofstream is not portable;
            // use create_directory which is atomic on POSIX.
            if (fs::create_directory(path_, ec) && !ec) return;
            auto t = fs::last_write_time(path_, ec);
            if (!ec) {
                auto age = duration_cast<seconds>(fs::file_time_type::clock::now() - t);
                if (age > minutes(5)) {
                    fs::remove(path_, ec);
                    continue;
                }
            }
            if (spin > 12000) throw Error("timed out waiting for lock " + path_.string());
            std::this_thread::sleep_for(milliseconds(50));
        }
    }
    ~LockFile() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    LockFile(const LockFile&) = delete;
    LockFile& operator=(const LockFile&) = delete;

  private:
    fs::path path_;
};

void write_manifest(const fs::path& manifest, const std::string& url, const std::string& sha,
                    uint64_t bytes) {
    json j;
    j["url"] = url;
    j["sha256"] = sha;
    j["bytes"] = bytes;
    const auto now = std::chrono::system_clock::now();
    j["retrieved_at_unix"] =
        std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count();
    fs::path tmp = manifest;
    tmp += ".tmp";
    std::ofstream out(tmp);
    out << j.dump(2) << "\n";
    out.close();
    fs::rename(tmp, manifest);
}

// Download `url` to `dest` (via a temp file). Returns the sha256 of the body.
std::string download(const std::string& url, const fs::path& dest, int max_attempts) {
    const UrlParts parts = split_url(url);
    std::string last_error;
    for (int attempt = 1; attempt <= max_attempts; ++attempt) {
        httplib::Client client(parts.origin);
        client.set_follow_location(true);
        client.set_connection_timeout(30);
        client.set_read_timeout(300);

        fs::path tmp = dest;
        tmp += ".part";
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error("cannot write " + tmp.string());

        EVP_MD_CTX* md = EVP_MD_CTX_new();
        EVP_DigestInit_ex(md, EVP_sha256(), nullptr);
        uint64_t received = 0;
        auto res = client.Get(parts.path, [&](const char* data, size_t n) {
            out.write(data, static_cast<std::streamsize>(n));
            EVP_DigestUpdate(md, data, n);
            received += n;
            return true;
        });
        out.close();

        unsigned char digest[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(md, digest, &len);
        EVP_MD_CTX_free(md);

        if (!res) {
            std::error_code ec;
            fs::remove(tmp, ec);
            last_error = httplib::to_string(res.error());
            if (attempt < max_attempts)
                std::this_thread::sleep_for(std::chrono::milliseconds(200 * attempt));
            continue;
        }
        if (res->status == 404) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw NotFoundError("artifact not found (404): " + url);
        }
        if (res->status != 200) {
            std::error_code ec;
            fs::remove(tmp, ec);
            last_error = "HTTP status " + std::to_string(res->status);
            if (attempt < max_attempts)
                std::this_thread::sleep_for(std::chrono::milliseconds(200 * attempt));
            continue;
        }

        static const char* hex = "0123456789abcdef";
        std::string sha;
        sha.reserve(2 * len);
        for (unsigned i = 0; i < len; ++i) {
            sha.push_back(hex[digest[i] >> 4]);
            sha.push_back(hex[digest[i] & 0xf]);
        }

        // Servers that advertise a digest get it enforced.
        std::string advertised = res->get_header_value("X-Checksum-Sha256");
        if (!advertised.empty() && advertised != sha) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw ChecksumError("sha256 mismatch for " + url + ": got " + sha + ", server says " +
                                advertised);
        }
        fs::rename(tmp, dest);
        return sha;
    }
    throw NetworkError("download failed after " + std::to_string(max_attempts) + " attempts: " +
                       url + " (" + last_error + ")");
}

}  // namespace

fs::path fetch_artifact(const HubSource& source, const std::string& filename,
                        const fs::path& cache_dir, const FetchOptions& opts) {
    source.validate();
    std::string repo_dir = source.repo_id;
    for (auto& c : repo_dir)
        if (c == '/') c = '_';
    const fs::path dir = cache_dir / repo_dir / source.revision;
    fs::create_directories(dir);
    const fs::path dest = dir / filename;
    const fs::path manifest = dir / (filename + ".manifest.json");
    const std::string url = source.url_for(filename);

    LockFile lock(dir / (filename + ".lock"));

    if (fs::exists(dest) && fs::exists(manifest)) {
        std::ifstream in(manifest);
        json m = json::parse(in, nullptr, /*allow_exceptions=*/false);
        const bool size_ok = !m.is_discarded() && m.contains("bytes") &&
                             m["bytes"].get<uint64_t>() == fs::file_size(dest);
        bool digest_ok = true;
        if (size_ok && opts.verify_cache_digest)
            digest_ok = m.contains("sha256") && m["sha256"].get<std::string>() == sha256_file(dest);
        if (size_ok && digest_ok) return dest;
        // Stale or corrupted entry: purge and re-fetch.
        std::error_code ec;
        fs::remove(dest, ec);
        fs::remove(manifest, ec);
        if (!size_ok || !digest_ok) {
            if (offline_mode())
                throw ChecksumError("cached artifact failed verification and HC_OFFLINE is set: " +
                                    dest.string());
        }
    }

    if (offline_mode())
        throw NetworkError("HC_OFFLINE is set and " + filename + " is not in the cache at " +
                           dir.string());

    const std::string sha = download(url, dest, opts.max_attempts);
    write_manifest(manifest, url, sha, fs::file_size(dest));
    return dest;
}

// ---------------------------------------------------------------------------
// TensorStore (safetensors layout)

int dtype_width(DType t) {
    switch (t) {
        case DType::F32: return 4;
        case DType::F16: return 2;
        case DType::BF16: return 2;
        case DType::I64: return 8;
        case DType::Bool: return 1;
        case DType::U8: return 1;
    }
    throw Error("unreachable dtype");
}

DType dtype_from_string(const std::string& s) {
    if (s == "F32") return DType::F32;
    if (s == "F16") return DType::F16;
    if (s == "BF16") return DType::BF16;
    if (s == "I64") return DType::I64;
    if (s == "BOOL") return DType::Bool;
    if (s == "U8") return DType::U8;
    throw Error("unsupported tensor dtype: " + s);
}

int64_t TensorEntry::numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

TensorStore TensorStore::load(const fs::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw Error("cannot open tensor container: " + path.string());
    const auto file_size = static_cast<uint64_t>(in.tellg());
    in.seekg(0);
    if (file_size < 8) throw Error("malformed container (shorter than header length field)");

    uint8_t len_bytes[8];
    in.read(reinterpret_cast<char*>(len_bytes), 8);
    uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | len_bytes[i];
    if (8 + header_len > file_size)
        throw Error("malformed container: header length " + std::to_string(header_len) +
                    " exceeds file size");

    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    json header = json::parse(header_text, nullptr, false);
    if (header.is_discarded() || !header.is_object())
        throw Error("malformed container: header is not a JSON object");

    TensorStore store;
    const uint64_t blob_size = file_size - 8 - header_len;
    store.blob_.resize(blob_size);
    in.read(reinterpret_cast<char*>(store.blob_.data()), static_cast<std::streamsize>(blob_size));
    if (!in) throw Error("truncated container blob");

    // (begin, end, name) for the overlap scan below.
    std::vector<std::tuple<size_t, size_t, std::string>> spans;
    for (auto& [name, meta] : header.items()) {
        if (name == "__metadata__") continue;
        TensorEntry e;
        e.dtype = dtype_from_string(meta.at("dtype").get<std::string>());
        e.shape = meta.at("shape").get<std::vector<int64_t>>();
        auto offs = meta.at("data_offsets").get<std::vector<uint64_t>>();
        if (offs.size() != 2 || offs[1] < offs[0])
            throw Error("malformed data_offsets for tensor " + name);
        e.begin = offs[0];
        e.end = offs[1];
        if (e.end > blob_size)
            throw Error("tensor " + name + " span extends past end of blob");
        const auto expected = static_cast<uint64_t>(e.numel()) * dtype_width(e.dtype);
        if (e.end - e.begin != expected)
            throw Error("tensor " + name + " span length does not match shape x dtype");
        spans.emplace_back(e.begin, e.end, name);
        store.entries_.emplace(name, std::move(e));
    }
    std::sort(spans.begin(), spans.end());
    for (size_t i = 1; i < spans.size(); ++i) {
        if (std::get<0>(spans[i]) < std::get<1>(spans[i - 1]))
            throw Error("overlapping tensor spans: " + std::get<2>(spans[i - 1]) + " and " +
                        std::get<2>(spans[i]));
    }
    return store;
}

bool TensorStore::has(const std::string& name) const { return entries_.count(name) != 0; }

const TensorEntry& TensorStore::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("no tensor named '" + name + "' in container");
    return it->second;
}

std::span<const std::byte> TensorStore::bytes(const std::string& name) const {
    const TensorEntry& e = entry(name);
    return {blob_.data() + e.begin, e.end - e.begin};
}

namespace {

inline float f16_to_f32(uint16_t h) {
    const uint32_t sign = (h & 0x8000u) << 16;
    uint32_t exp = (h >> 10) & 0x1f;
    uint32_t frac = h & 0x3ff;
    uint32_t bits;
    if (exp == 0) {
        if (frac == 0) {
            bits = sign;
        } else {
            exp = 127 - 15 + 1;
            while ((frac & 0x400) == 0) {
                frac <<= 1;
                --exp;
            }
            frac &= 0x3ff;
            bits = sign | (exp << 23) | (frac << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (frac << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (frac << 13);
    }
    float out;
    std::memcpy(&out, &bits, 4);
    return out;
}

void promote_to_f32(const TensorEntry& e, std::span<const std::byte> raw, float* out) {
    const int64_t n = e.numel();
    switch (e.dtype) {
        case DType::F32:
            std::memcpy(out, raw.data(), static_cast<size_t>(n) * 4);
            break;
        case DType::F16: {
            const auto* src = reinterpret_cast<const uint16_t*>(raw.data());
            for (int64_t i = 0; i < n; ++i) out[i] = f16_to_f32(src[i]);
            break;
        }
        case DType::BF16: {
            const auto* src = reinterpret_cast<const uint16_t*>(raw.data());
            for (int64_t i = 0; i < n; ++i) {
                uint32_t bits = static_cast<uint32_t>(src[i]) << 16;
                std::memcpy(out + i, &bits, 4);
            }
            break;
        }
        default:
            throw Error("tensor dtype is not a float type; cannot promote");
    }
}

}  // namespace

MatrixF TensorStore::matrix(const std::string& name) const {
    const TensorEntry& e = entry(name);
    if (e.shape.size() != 2)
        throw ShapeError("tensor " + name + " is not 2-D");
    const auto rows = static_cast<Eigen::Index>(e.shape[0]);
    const auto cols = static_cast<Eigen::Index>(e.shape[1]);
    // Containers store row-major; fill through a row-major view.
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> tmp(rows, cols);
    promote_to_f32(e, bytes(name), tmp.data());
    return tmp;
}

VectorF TensorStore::vector(const std::string& name) const {
    const TensorEntry& e = entry(name);
    if (e.shape.size() != 1)
        throw ShapeError("tensor " + name + " is not 1-D");
    VectorF v(static_cast<Eigen::Index>(e.shape[0]));
    promote_to_f32(e, bytes(name), v.data());
    return v;
}

// ---------------------------------------------------------------------------
// ModelConfig / ArchMap

void ModelConfig::validate() const {
    if (n_layers <= 0 || n_heads_per_layer <= 0 || d_model <= 0 || d_head <= 0 ||
        vocab_size <= 0 || n_ctx <= 0)
        throw Error("ModelConfig: all counts must be positive");
    if (d_model != n_heads_per_layer * d_head)
        throw Error("ModelConfig: d_model must equal n_heads * d_head");
    if (!(ln_eps > 0.f)) throw Error("ModelConfig: ln_eps must be positive");
}

ModelConfig ModelConfig::from_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open model config: " + path.string());
    json j = json::parse(in);
    ModelConfig c;
    c.n_layers = j.at("n_layer").get<int>();
    c.n_heads_per_layer = j.at("n_head").get<int>();
    c.d_model = j.at("n_embd").get<int>();
    c.d_head = c.d_model / c.n_heads_per_layer;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.n_ctx = j.contains("n_positions") ? j["n_positions"].get<int>() : j.at("n_ctx").get<int>();
    if (j.contains("layer_norm_epsilon")) c.ln_eps = j["layer_norm_epsilon"].get<float>();
    c.validate();
    return c;
}

std::string ArchMap::layer_name(const std::string& pattern, int layer) const {
    const std::string tag = "{L}";
    auto pos = pattern.find(tag);
    if (pos == std::string::npos) throw Error("arch map pattern missing {L}: " + pattern);
    return pattern.substr(0, pos) + std::to_string(layer) + pattern.substr(pos + tag.size());
}

std::vector<std::string> ArchMap::all_names(int n_layers) const {
    std::vector<std::string> names{token_embedding, positional_embedding, final_ln_gain,
                                   final_ln_bias};
    for (int l = 0; l < n_layers; ++l) {
        for (const auto* p : {&ln1_gain, &ln1_bias, &ln2_gain, &ln2_bias, &fused_qkv_weight,
                              &fused_qkv_bias, &attn_out_weight, &attn_out_bias, &mlp_in_weight,
                              &mlp_in_bias, &mlp_out_weight, &mlp_out_bias})
            names.push_back(layer_name(*p, l));
    }
    return names;
}

ArchMap ArchMap::gpt2() {
    ArchMap m;
    m.version = "gpt2-v1";
    m.token_embedding = "wte.weight";
    m.positional_embedding = "wpe.weight";
    m.final_ln_gain = "ln_f.weight";
    m.final_ln_bias = "ln_f.bias";
    m.ln1_gain = "h.{L}.ln_1.weight";
    m.ln1_bias = "h.{L}.ln_1.bias";
    m.ln2_gain = "h.{L}.ln_2.weight";
    m.ln2_bias = "h.{L}.ln_2.bias";
    m.fused_qkv_weight = "h.{L}.attn.c_attn.weight";
    m.fused_qkv_bias = "h.{L}.attn.c_attn.bias";
    m.attn_out_weight = "h.{L}.attn.c_proj.weight";
    m.attn_out_bias = "h.{L}.attn.c_proj.bias";
    m.mlp_in_weight = "h.{L}.mlp.c_fc.weight";
    m.mlp_in_bias = "h.{L}.mlp.c_fc.bias";
    m.mlp_out_weight = "h.{L}.mlp.c_proj.weight";
    m.mlp_out_bias = "h.{L}.mlp.c_proj.bias";
    return m;
}

ArchMap ArchMap::from_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open arch map: " + path.string());
    json j = json::parse(in);
    ArchMap m;
    m.version = j.at("version").get<std::string>();
    auto s = [&](const char* k) { return j.at(k).get<std::string>(); };
    m.token_embedding = s("token_embedding");
    m.positional_embedding = s("positional_embedding");
    m.final_ln_gain = s("final_ln_gain");
    m.final_ln_bias = s("final_ln_bias");
    m.ln1_gain = s("ln1_gain");
    m.ln1_bias = s("ln1_bias");
    m.ln2_gain = s("ln2_gain");
    m.ln2_bias = s("ln2_bias");
    m.fused_qkv_weight = s("fused_qkv_weight");
    m.fused_qkv_bias = s("fused_qkv_bias");
    m.attn_out_weight = s("attn_out_weight");
    m.attn_out_bias = s("attn_out_bias");
    m.mlp_in_weight = s("mlp_in_weight");
    m.mlp_in_bias = s("mlp_in_bias");
    m.mlp_out_weight = s("mlp_out_weight");
    m.mlp_out_bias = s("mlp_out_bias");
    return m;
}

// ---------------------------------------------------------------------------

HeadWeights extract_head_weights(const TensorStore& store, const ModelConfig& config,
                                 const ArchMap& arch, int layer, int head) {
    if (layer < 0 || layer >= config.n_layers)
        throw RangeError("layer " + std::to_string(layer) + " out of range [0, " +
                         std::to_string(config.n_layers) + ")");
    if (head < 0 || head >= config.n_heads_per_layer)
        throw RangeError("head " + std::to_string(head) + " out of range [0, " +
                         std::to_string(config.n_heads_per_layer) + ")");

    const int d = config.d_model;
    const int dh = config.d_head;
    const MatrixF qkv_w = store.matrix(arch.layer_name(arch.fused_qkv_weight, layer));
    const VectorF qkv_b = store.vector(arch.layer_name(arch.fused_qkv_bias, layer));
    const MatrixF out_w = store.matrix(arch.layer_name(arch.attn_out_weight, layer));
    if (qkv_w.rows() != d || qkv_w.cols() != 3 * d)
        throw ShapeError("fused qkv weight has unexpected shape");
    if (out_w.rows() != d || out_w.cols() != d)
        throw ShapeError("attention output weight has unexpected shape");

    HeadWeights hw;
    // Fused layout along the output axis: q block, then k, then v.
    hw.read_q = qkv_w.block(0, head * dh, d, dh);
    hw.read_k = qkv_w.block(0, d + head * dh, d, dh);
    hw.read_v = qkv_w.block(0, 2 * d + head * dh, d, dh);
    hw.write_o = out_w.block(head * dh, 0, dh, d);
    hw.bias_q = qkv_b.segment(head * dh, dh);
    hw.bias_k = qkv_b.segment(d + head * dh, dh);
    hw.bias_v = qkv_b.segment(2 * d + head * dh, dh);
    hw.bias_o = store.vector(arch.layer_name(arch.attn_out_bias, layer));
    hw.ln_gain = store.vector(arch.layer_name(arch.ln1_gain, layer));
    return hw;
}

}  // namespace hc::model
