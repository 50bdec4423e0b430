#pragma once

#include "hc/common.hpp"
#include "hc/model_io.hpp"

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hc::runtime {

// One transformer block's weights, row-vector convention (x * W).
struct LayerWeights {
    VectorF ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    MatrixF qkv_weight;   // d x 3d, blocks [q | k | v]
    VectorF qkv_bias;     // 3d
    MatrixF out_weight;   // d x d, rows grouped by head
    VectorF out_bias;     // d
    MatrixF mlp_in_weight;   // d x 4d
    VectorF mlp_in_bias;
    MatrixF mlp_out_weight;  // 4d x d
    VectorF mlp_out_bias;
};

// Immutable full-model weights. Safe to share across threads.
class Model {
  public:
    static Model load(const model::TensorStore& store, const model::ModelConfig& config,
                      const model::ArchMap& arch, std::string checkpoint_digest = "");

    const model::ModelConfig& config() const { return config_; }
    const LayerWeights& layer(int i) const { return layers_.at(static_cast<size_t>(i)); }
    const MatrixF& token_embedding() const { return wte_; }
    const MatrixF& positional_embedding() const { return wpe_; }
    const VectorF& final_ln_gain() const { return lnf_gain_; }
    const VectorF& final_ln_bias() const { return lnf_bias_; }
    const std::string& checkpoint_digest() const { return digest_; }

  private:
    model::ModelConfig config_;
    std::vector<LayerWeights> layers_;
    MatrixF wte_, wpe_;
    VectorF lnf_gain_, lnf_bias_;
    std::string digest_;
};

// A model plus an optional per-layer weight overlay (used by weight edits).
// Unlisted layers resolve to the base model's weights.
class ModelView {
  public:
    ModelView(const Model& base) : base_(&base) {}  // NOLINT: implicit by design
    ModelView(const Model& base, const std::map<int, const LayerWeights*>* overlay)
        : base_(&base), overlay_(overlay) {}

    const Model& base() const { return *base_; }
    const model::ModelConfig& config() const { return base_->config(); }
    const LayerWeights& layer(int i) const {
        if (overlay_ != nullptr) {
            auto it = overlay_->find(i);
            if (it != overlay_->end()) return *it->second;
        }
        return base_->layer(i);
    }

  private:
    const Model* base_;
    const std::map<int, const LayerWeights*>* overlay_ = nullptr;
};

// ---------------------------------------------------------------------------
// Hooks

struct HookPoint {
    enum class Kind { ResidPre, HeadOutput, AttnPattern, Logits };
    enum class Select { All, Positions, Final };

    Kind kind;
    int layer = -1;
    int head = -1;
    Select select = Select::All;
    std::vector<int> positions;  // used when select == Positions

    static HookPoint resid_pre(int layer, Select sel = Select::All, std::vector<int> pos = {});
    static HookPoint head_output(int layer, int head, Select sel = Select::All,
                                 std::vector<int> pos = {});
    static HookPoint attn_pattern(int layer, int head);
    static HookPoint logits();

    // Identity for recording lookup (selector excluded).
    std::tuple<int, int, int> key() const { return {static_cast<int>(kind), layer, head}; }
};

struct HookAction {
    enum class Mode { Record, Replace, Add };
    Mode mode = Mode::Record;
    // Replace: 1 x d (applied to each selected position) or seq x d (select all).
    // Add: 1 x d added to each selected position.
    MatrixF payload;

    static HookAction record() { return {Mode::Record, {}}; }
    static HookAction replace(MatrixF value) { return {Mode::Replace, std::move(value)}; }
    static HookAction add(MatrixF value) { return {Mode::Add, std::move(value)}; }
};

struct Hook {
    HookPoint point;
    HookAction action;
};

struct ForwardOutput {
    MatrixF logits;  // seq x vocab
    // One slot per hook in call order; record hooks fill theirs.
    std::vector<std::optional<MatrixF>> recordings;
    std::vector<HookPoint> hook_points;

    // Last recording made at the given point, if any.
    const MatrixF* recorded(const HookPoint& point) const;
};

// Deterministic hooked forward pass. Hooks apply in list order at each point;
// a record hook sees modifications from hooks listed before it.
ForwardOutput forward(const ModelView& model, std::span<const int> ids,
                      std::span<const Hook> hooks = {});

// Post-softmax attention pattern recorded for (layer, head). Throws if the
// pattern was not requested.
const MatrixF& attention_pattern(const ForwardOutput& out, int layer, int head);

// Argmax over the final row of logits, lowest id on ties.
int greedy_next(const ForwardOutput& out);
float logit_of(const ForwardOutput& out, int token_id);

// ---------------------------------------------------------------------------
// Prefix-cached re-evaluation.
//
// A PrefixRun captures one clean forward pass (residuals and per-layer fused
// keys/values). A batch of interventions that only touch positions >= p and
// layers >= l can then be re-evaluated by recomputing the affected tail,
// reusing cached keys/values for untouched positions. Results are identical
// to runtime::forward with the same hooks; tests pin the equivalence.

struct SuffixEdit {
    // resid_pre additions at (absolute position, row vector), applied at the
    // resume layer's input.
    std::vector<std::pair<int, RowVectorF>> resid_add;
    // head_output replacements at the final position: (layer, head) -> row.
    std::map<std::pair<int, int>, RowVectorF> head_replace_final;
    // head_output additions at the final position.
    std::map<std::pair<int, int>, RowVectorF> head_add_final;
};

struct SuffixRequest {
    // Full final logits row per item; memory scales with batch x vocab.
    bool want_final_logits = true;
    // Lean alternative: just the argmax id and a few named token logits.
    bool want_greedy = false;
    std::vector<int> logit_ids;
    // (layer, head) attention-pattern final rows to capture.
    std::vector<std::pair<int, int>> want_final_pattern_rows;
    // (layer, head) head outputs at the final position to capture.
    std::vector<std::pair<int, int>> want_final_head_outputs;
};

struct SuffixResult {
    RowVectorF final_logits;
    int greedy_id = -1;
    std::vector<float> requested_logits;
    std::map<std::pair<int, int>, RowVectorF> final_pattern_rows;
    std::map<std::pair<int, int>, RowVectorF> final_head_outputs;
};

class PrefixRun {
  public:
    // Runs the clean pass, capturing state for all layers. `stop_after_layer`
    // limits work when only early layers are needed (-1 = all layers and
    // final logits row available).
    PrefixRun(const ModelView& model, std::span<const int> ids, int stop_after_layer = -1);

    int seq_len() const { return seq_; }
    const ModelView& model() const { return model_; }
    const std::vector<int>& ids() const { return ids_; }

    const MatrixF& resid_pre(int layer) const;  // seq x d
    const MatrixF& keys(int layer) const;       // seq x d, heads fused
    const MatrixF& values(int layer) const;     // seq x d
    // Clean pattern / head output, computed during the clean pass.
    const MatrixF& pattern(int layer, int head) const;            // seq x seq
    RowVectorF head_output_final(int layer, int head) const;      // 1 x d
    RowVectorF clean_final_logits() const;

    // Evaluates a batch of suffix edits. All edits must touch only layers
    // >= resume_layer; resid_add positions define the recomputed tail.
    std::vector<SuffixResult> resume(int resume_layer, std::span<const SuffixEdit> edits,
                                     const SuffixRequest& req) const;

  private:
    ModelView model_;
    std::vector<int> ids_;
    int seq_ = 0;
    int last_layer_ = -1;
    std::vector<MatrixF> resid_pre_;      // per layer, seq x d
    MatrixF resid_final_;                 // seq x d, input to final layer norm
    std::vector<MatrixF> keys_, values_;  // per layer, seq x d
    std::vector<std::vector<MatrixF>> patterns_;  // [layer][head], seq x seq
};

}  // namespace hc::runtime
