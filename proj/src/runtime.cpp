#include "hc/runtime.hpp"

#include <algorithm>
#include <cmath>

namespace hc::runtime {

namespace {

constexpr float kMaskValue = -1e30f;

// y = layernorm(x) * gain + bias, row-wise over a seq x d block.
MatrixF layer_norm(const MatrixF& x, const VectorF& gain, const VectorF& bias, float eps) {
    const VectorF mean = x.rowwise().mean();
    MatrixF centered = x.colwise() - mean;
    const VectorF var = centered.array().square().matrix().rowwise().mean();
    const VectorF inv_std = (var.array() + eps).rsqrt();
    centered.array().colwise() *= inv_std.array();
    centered.array().rowwise() *= gain.transpose().array();
    centered.array().rowwise() += bias.transpose().array();
    return centered;
}

inline void gelu_new_inplace(MatrixF& x) {
    constexpr float kSqrt2OverPi = 0.7978845608028654f;
    x = (0.5f * x.array() *
         (1.f + ((kSqrt2OverPi * (x.array() + 0.044715f * x.array().cube())).tanh())))
            .matrix();
}

// Stable softmax over each row, with entries equal to kMaskValue hitting 0.
void softmax_rows_inplace(MatrixF& scores) {
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        auto row = scores.row(r).array();
        row -= row.maxCoeff();
        row = row.exp();
        row /= row.sum();
    }
}

std::vector<int> selected_rows(const HookPoint& p, int seq) {
    switch (p.select) {
        case HookPoint::Select::All: {
            std::vector<int> all(static_cast<size_t>(seq));
            for (int i = 0; i < seq; ++i) all[static_cast<size_t>(i)] = i;
            return all;
        }
        case HookPoint::Select::Final:
            return {seq - 1};
        case HookPoint::Select::Positions:
            for (int pos : p.positions)
                if (pos < 0 || pos >= seq)
                    throw RangeError("hook position " + std::to_string(pos) +
                                     " outside sequence of length " + std::to_string(seq));
            return p.positions;
    }
    throw Error("unreachable");
}

void apply_modifier(MatrixF& x, const Hook& hook, int seq) {
    const MatrixF& payload = hook.action.payload;
    if (payload.cols() != x.cols())
        throw ShapeError("hook payload has " + std::to_string(payload.cols()) +
                         " columns, expected " + std::to_string(x.cols()));
    if (payload.rows() != 1 && payload.rows() != x.rows())
        throw ShapeError("hook payload must have 1 row or seq rows");
    for (int r : selected_rows(hook.point, seq)) {
        const auto src = payload.rows() == 1 ? payload.row(0) : payload.row(r);
        if (hook.action.mode == HookAction::Mode::Replace)
            x.row(r) = src;
        else
            x.row(r) += src;
    }
}

struct HookSet {
    std::span<const Hook> hooks;
    ForwardOutput* out;

    // Runs all hooks bound to `key` in list order against x.
    void run(const std::tuple<int, int, int>& key, MatrixF& x, int seq) const {
        for (size_t i = 0; i < hooks.size(); ++i) {
            const Hook& h = hooks[i];
            if (h.point.key() != key) continue;
            if (h.action.mode == HookAction::Mode::Record) {
                out->recordings[i] = x;
            } else {
                if (h.point.kind == HookPoint::Kind::AttnPattern)
                    throw Error("attention patterns support record hooks only");
                if (h.point.kind == HookPoint::Kind::Logits)
                    throw Error("logits support record hooks only");
                apply_modifier(x, h, seq);
            }
        }
    }

    bool any(const std::tuple<int, int, int>& key) const {
        return std::any_of(hooks.begin(), hooks.end(),
                           [&](const Hook& h) { return h.point.key() == key; });
    }
};

}  // namespace

// ---------------------------------------------------------------------------
// HookPoint / ForwardOutput

HookPoint HookPoint::resid_pre(int layer, Select sel, std::vector<int> pos) {
    return {Kind::ResidPre, layer, -1, sel, std::move(pos)};
}
HookPoint HookPoint::head_output(int layer, int head, Select sel, std::vector<int> pos) {
    return {Kind::HeadOutput, layer, head, sel, std::move(pos)};
}
HookPoint HookPoint::attn_pattern(int layer, int head) {
    return {Kind::AttnPattern, layer, head, Select::All, {}};
}
HookPoint HookPoint::logits() { return {Kind::Logits, -1, -1, Select::All, {}}; }

const MatrixF* ForwardOutput::recorded(const HookPoint& point) const {
    const MatrixF* found = nullptr;
    for (size_t i = 0; i < hook_points.size(); ++i) {
        if (hook_points[i].key() == point.key() && recordings[i].has_value())
            found = &*recordings[i];
    }
    return found;
}

// ---------------------------------------------------------------------------
// Model

Model Model::load(const model::TensorStore& store, const model::ModelConfig& config,
                  const model::ArchMap& arch, std::string checkpoint_digest) {
    config.validate();
    Model m;
    m.config_ = config;
    m.digest_ = std::move(checkpoint_digest);
    m.wte_ = store.matrix(arch.token_embedding);
    m.wpe_ = store.matrix(arch.positional_embedding);
    if (m.wte_.rows() != config.vocab_size || m.wte_.cols() != config.d_model)
        throw ShapeError("token embedding shape mismatch with config");
    m.lnf_gain_ = store.vector(arch.final_ln_gain);
    m.lnf_bias_ = store.vector(arch.final_ln_bias);
    m.layers_.reserve(static_cast<size_t>(config.n_layers));
    for (int l = 0; l < config.n_layers; ++l) {
        LayerWeights w;
        auto name = [&](const std::string& p) { return arch.layer_name(p, l); };
        w.ln1_gain = store.vector(name(arch.ln1_gain));
        w.ln1_bias = store.vector(name(arch.ln1_bias));
        w.ln2_gain = store.vector(name(arch.ln2_gain));
        w.ln2_bias = store.vector(name(arch.ln2_bias));
        w.qkv_weight = store.matrix(name(arch.fused_qkv_weight));
        w.qkv_bias = store.vector(name(arch.fused_qkv_bias));
        w.out_weight = store.matrix(name(arch.attn_out_weight));
        w.out_bias = store.vector(name(arch.attn_out_bias));
        w.mlp_in_weight = store.matrix(name(arch.mlp_in_weight));
        w.mlp_in_bias = store.vector(name(arch.mlp_in_bias));
        w.mlp_out_weight = store.matrix(name(arch.mlp_out_weight));
        w.mlp_out_bias = store.vector(name(arch.mlp_out_bias));
        if (w.qkv_weight.rows() != config.d_model || w.qkv_weight.cols() != 3 * config.d_model)
            throw ShapeError("layer " + std::to_string(l) + ": fused qkv shape mismatch");
        m.layers_.push_back(std::move(w));
    }
    return m;
}

// ---------------------------------------------------------------------------
// forward

ForwardOutput forward(const ModelView& model, std::span<const int> ids,
                      std::span<const Hook> hooks) {
    const auto& cfg = model.config();
    const int seq = static_cast<int>(ids.size());
    if (seq == 0) throw Error("empty input");
    if (seq > cfg.n_ctx)
        throw Error("context overflow: " + std::to_string(seq) + " > " +
                    std::to_string(cfg.n_ctx));
    for (int id : ids)
        if (id < 0 || id >= cfg.vocab_size)
            throw RangeError("token id out of range: " + std::to_string(id));
    for (const Hook& h : hooks) {
        if (h.point.kind != HookPoint::Kind::Logits) {
            if (h.point.layer < 0 || h.point.layer >= cfg.n_layers)
                throw RangeError("hook layer out of range");
            if (h.point.kind != HookPoint::Kind::ResidPre &&
                (h.point.head < 0 || h.point.head >= cfg.n_heads_per_layer))
                throw RangeError("hook head out of range");
        }
    }

    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const int nh = cfg.n_heads_per_layer;
    const float scale = 1.f / std::sqrt(static_cast<float>(dh));

    ForwardOutput out;
    out.recordings.resize(hooks.size());
    out.hook_points.reserve(hooks.size());
    for (const Hook& h : hooks) out.hook_points.push_back(h.point);
    HookSet hookset{hooks, &out};

    const Model& base = model.base();
    MatrixF x(seq, d);
    for (int i = 0; i < seq; ++i)
        x.row(i) = base.token_embedding().row(ids[i]) + base.positional_embedding().row(i);

    for (int l = 0; l < cfg.n_layers; ++l) {
        hookset.run(HookPoint::resid_pre(l).key(), x, seq);

        const LayerWeights& w = model.layer(l);
        const MatrixF h1 = layer_norm(x, w.ln1_gain, w.ln1_bias, cfg.ln_eps);
        MatrixF qkv = h1 * w.qkv_weight;
        qkv.array().rowwise() += w.qkv_bias.transpose().array();

        MatrixF attn_sum = MatrixF::Zero(seq, d);
        for (int head = 0; head < nh; ++head) {
            const auto q = qkv.middleCols(head * dh, dh);
            const auto k = qkv.middleCols(d + head * dh, dh);
            const auto v = qkv.middleCols(2 * d + head * dh, dh);

            MatrixF scores = (q * k.transpose()) * scale;
            for (int r = 0; r < seq; ++r)
                for (int c = r + 1; c < seq; ++c) scores(r, c) = kMaskValue;
            softmax_rows_inplace(scores);
            hookset.run(HookPoint::attn_pattern(l, head).key(), scores, seq);

            MatrixF head_out = (scores * v) * w.out_weight.middleRows(head * dh, dh);
            hookset.run(HookPoint::head_output(l, head).key(), head_out, seq);
            attn_sum += head_out;
        }
        attn_sum.array().rowwise() += w.out_bias.transpose().array();
        x += attn_sum;

        const MatrixF h2 = layer_norm(x, w.ln2_gain, w.ln2_bias, cfg.ln_eps);
        MatrixF inner = h2 * w.mlp_in_weight;
        inner.array().rowwise() += w.mlp_in_bias.transpose().array();
        gelu_new_inplace(inner);
        MatrixF mlp = inner * w.mlp_out_weight;
        mlp.array().rowwise() += w.mlp_out_bias.transpose().array();
        x += mlp;
    }

    const MatrixF final_state = layer_norm(x, base.final_ln_gain(), base.final_ln_bias(), cfg.ln_eps);
    out.logits.noalias() = final_state * base.token_embedding().transpose();
    hookset.run(HookPoint::logits().key(), out.logits, seq);
    return out;
}

const MatrixF& attention_pattern(const ForwardOutput& out, int layer, int head) {
    const MatrixF* rec = out.recorded(HookPoint::attn_pattern(layer, head));
    if (rec == nullptr)
        throw Error("attention pattern for " + std::to_string(layer) + "." +
                    std::to_string(head) + " was not recorded");
    return *rec;
}

int greedy_next(const ForwardOutput& out) {
    Eigen::Index best = 0;
    out.logits.row(out.logits.rows() - 1).maxCoeff(&best);
    return static_cast<int>(best);
}

float logit_of(const ForwardOutput& out, int token_id) {
    if (token_id < 0 || token_id >= out.logits.cols())
        throw RangeError("token id out of range for logits");
    return out.logits(out.logits.rows() - 1, token_id);
}

// ---------------------------------------------------------------------------
// PrefixRun

PrefixRun::PrefixRun(const ModelView& model, std::span<const int> ids, int stop_after_layer)
    : model_(model), ids_(ids.begin(), ids.end()) {
    const auto& cfg = model.config();
    seq_ = static_cast<int>(ids.size());
    if (seq_ == 0) throw Error("empty input");
    if (seq_ > cfg.n_ctx) throw Error("context overflow");
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const int nh = cfg.n_heads_per_layer;
    const float scale = 1.f / std::sqrt(static_cast<float>(dh));
    last_layer_ = stop_after_layer < 0 ? cfg.n_layers - 1 : stop_after_layer;

    const Model& base = model.base();
    MatrixF x(seq_, d);
    for (int i = 0; i < seq_; ++i)
        x.row(i) = base.token_embedding().row(ids_[static_cast<size_t>(i)]) +
                   base.positional_embedding().row(i);

    resid_pre_.resize(static_cast<size_t>(last_layer_) + 1);
    keys_.resize(static_cast<size_t>(last_layer_) + 1);
    values_.resize(static_cast<size_t>(last_layer_) + 1);
    patterns_.resize(static_cast<size_t>(last_layer_) + 1);

    for (int l = 0; l <= last_layer_; ++l) {
        resid_pre_[static_cast<size_t>(l)] = x;
        const LayerWeights& w = model.layer(l);
        const MatrixF h1 = layer_norm(x, w.ln1_gain, w.ln1_bias, cfg.ln_eps);
        MatrixF qkv = h1 * w.qkv_weight;
        qkv.array().rowwise() += w.qkv_bias.transpose().array();
        keys_[static_cast<size_t>(l)] = qkv.middleCols(d, d);
        values_[static_cast<size_t>(l)] = qkv.middleCols(2 * d, d);

        patterns_[static_cast<size_t>(l)].resize(static_cast<size_t>(nh));
        MatrixF attn_sum = MatrixF::Zero(seq_, d);
        for (int head = 0; head < nh; ++head) {
            const auto q = qkv.middleCols(head * dh, dh);
            const auto k = keys_[static_cast<size_t>(l)].middleCols(head * dh, dh);
            const auto v = values_[static_cast<size_t>(l)].middleCols(head * dh, dh);
            MatrixF scores = (q * k.transpose()) * scale;
            for (int r = 0; r < seq_; ++r)
                for (int c = r + 1; c < seq_; ++c) scores(r, c) = kMaskValue;
            softmax_rows_inplace(scores);
            attn_sum += (scores * v) * w.out_weight.middleRows(head * dh, dh);
            patterns_[static_cast<size_t>(l)][static_cast<size_t>(head)] = std::move(scores);
        }
        attn_sum.array().rowwise() += w.out_bias.transpose().array();
        x += attn_sum;

        const MatrixF h2 = layer_norm(x, w.ln2_gain, w.ln2_bias, cfg.ln_eps);
        MatrixF inner = h2 * w.mlp_in_weight;
        inner.array().rowwise() += w.mlp_in_bias.transpose().array();
        gelu_new_inplace(inner);
        MatrixF mlp = inner * w.mlp_out_weight;
        mlp.array().rowwise() += w.mlp_out_bias.transpose().array();
        x += mlp;
    }
    if (last_layer_ == cfg.n_layers - 1) resid_final_ = std::move(x);
}

const MatrixF& PrefixRun::resid_pre(int layer) const {
    return resid_pre_.at(static_cast<size_t>(layer));
}
const MatrixF& PrefixRun::keys(int layer) const { return keys_.at(static_cast<size_t>(layer)); }
const MatrixF& PrefixRun::values(int layer) const {
    return values_.at(static_cast<size_t>(layer));
}
const MatrixF& PrefixRun::pattern(int layer, int head) const {
    return patterns_.at(static_cast<size_t>(layer)).at(static_cast<size_t>(head));
}

RowVectorF PrefixRun::head_output_final(int layer, int head) const {
    const auto& cfg = model_.config();
    const int dh = cfg.d_head;
    const auto v = values(layer).middleCols(head * dh, dh);
    const RowVectorF z = pattern(layer, head).row(seq_ - 1) * v;
    return z * model_.layer(layer).out_weight.middleRows(head * dh, dh);
}

RowVectorF PrefixRun::clean_final_logits() const {
    if (resid_final_.size() == 0) throw Error("prefix run stopped before the last layer");
    const Model& base = model_.base();
    const MatrixF final_state = layer_norm(resid_final_.bottomRows(1), base.final_ln_gain(),
                                           base.final_ln_bias(), model_.config().ln_eps);
    return final_state * base.token_embedding().transpose();
}

std::vector<SuffixResult> PrefixRun::resume(int resume_layer, std::span<const SuffixEdit> edits,
                                            const SuffixRequest& req) const {
    const auto& cfg = model_.config();
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const int nh = cfg.n_heads_per_layer;
    const float scale = 1.f / std::sqrt(static_cast<float>(dh));
    if (resume_layer < 0 || resume_layer > last_layer_)
        throw RangeError("resume layer out of captured range");
    if (last_layer_ != cfg.n_layers - 1) throw Error("prefix run stopped early; cannot resume");

    // The tail start is the earliest edited position.
    int tail_start = seq_ - 1;
    for (const SuffixEdit& e : edits)
        for (const auto& [pos, vec] : e.resid_add) {
            if (pos < 0 || pos >= seq_) throw RangeError("resid_add position out of range");
            tail_start = std::min(tail_start, pos);
        }
    for (const SuffixEdit& e : edits)
        for (const auto& [lh, vec] : e.head_replace_final)
            if (lh.first < resume_layer) throw RangeError("head edit before resume layer");

    const int T = seq_ - tail_start;
    const auto B = static_cast<int>(edits.size());
    std::vector<SuffixResult> results(static_cast<size_t>(B));

    // Per-item tail residuals, seeded from the clean run.
    std::vector<MatrixF> tails(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        tails[static_cast<size_t>(b)] = resid_pre(resume_layer).bottomRows(T);
        for (const auto& [pos, vec] : edits[static_cast<size_t>(b)].resid_add)
            tails[static_cast<size_t>(b)].row(pos - tail_start) += vec;
    }

    const Model& base = model_.base();
    for (int l = resume_layer; l < cfg.n_layers; ++l) {
        const LayerWeights& w = model_.layer(l);
        // Stack tails for the dense projections.
        MatrixF stack(B * T, d);
        for (int b = 0; b < B; ++b) stack.middleRows(b * T, T) = tails[static_cast<size_t>(b)];
        const MatrixF h1 = layer_norm(stack, w.ln1_gain, w.ln1_bias, cfg.ln_eps);
        MatrixF qkv = h1 * w.qkv_weight;
        qkv.array().rowwise() += w.qkv_bias.transpose().array();

        MatrixF attn_stack = MatrixF::Zero(B * T, d);
        const MatrixF& k_clean = keys(l);
        const MatrixF& v_clean = values(l);
        if (T == 1) {
            // Single-row tails: batch the attention of all items per head.
            for (int head = 0; head < nh; ++head) {
                const auto wo = w.out_weight.middleRows(head * dh, dh);
                const auto k_top = k_clean.middleCols(head * dh, dh).topRows(tail_start);
                const auto v_top = v_clean.middleCols(head * dh, dh).topRows(tail_start);
                const auto q_all = qkv.middleCols(head * dh, dh);
                const auto k_self = qkv.middleCols(d + head * dh, dh);
                const auto v_self = qkv.middleCols(2 * d + head * dh, dh);

                MatrixF scores(B, seq_);
                scores.leftCols(tail_start).noalias() = q_all * k_top.transpose();
                scores.col(tail_start) = (q_all.array() * k_self.array()).rowwise().sum();
                scores *= scale;
                softmax_rows_inplace(scores);

                MatrixF z(B, dh);
                z.noalias() = scores.leftCols(tail_start) * v_top;
                z.array() += v_self.array().colwise() * scores.col(tail_start).array();
                MatrixF head_out = z * wo;

                for (int b = 0; b < B; ++b) {
                    const SuffixEdit& e = edits[static_cast<size_t>(b)];
                    auto rit = e.head_replace_final.find({l, head});
                    if (rit != e.head_replace_final.end()) head_out.row(b) = rit->second;
                    auto ait = e.head_add_final.find({l, head});
                    if (ait != e.head_add_final.end()) head_out.row(b) += ait->second;
                    for (const auto& [pl, ph] : req.want_final_pattern_rows)
                        if (pl == l && ph == head)
                            results[static_cast<size_t>(b)].final_pattern_rows[{l, head}] =
                                scores.row(b);
                    for (const auto& [pl, ph] : req.want_final_head_outputs)
                        if (pl == l && ph == head)
                            results[static_cast<size_t>(b)].final_head_outputs[{l, head}] =
                                head_out.row(b);
                }
                attn_stack += head_out;
            }
            attn_stack.array().rowwise() += w.out_bias.transpose().array();
            stack += attn_stack;

            const MatrixF h2f = layer_norm(stack, w.ln2_gain, w.ln2_bias, cfg.ln_eps);
            MatrixF innerf = h2f * w.mlp_in_weight;
            innerf.array().rowwise() += w.mlp_in_bias.transpose().array();
            gelu_new_inplace(innerf);
            MatrixF mlpf = innerf * w.mlp_out_weight;
            mlpf.array().rowwise() += w.mlp_out_bias.transpose().array();
            stack += mlpf;
            for (int b = 0; b < B; ++b) tails[static_cast<size_t>(b)] = stack.row(b);
            continue;
        }
        for (int head = 0; head < nh; ++head) {
            const auto wo = w.out_weight.middleRows(head * dh, dh);
            const auto k_top = k_clean.middleCols(head * dh, dh).topRows(tail_start);
            const auto v_top = v_clean.middleCols(head * dh, dh).topRows(tail_start);
            for (int b = 0; b < B; ++b) {
                const auto q_tail = qkv.block(b * T, head * dh, T, dh);
                const auto k_tail = qkv.block(b * T, d + head * dh, T, dh);
                const auto v_tail = qkv.block(b * T, 2 * d + head * dh, T, dh);
                MatrixF scores(T, seq_);
                scores.leftCols(tail_start).noalias() = q_tail * k_top.transpose();
                scores.rightCols(T).noalias() = q_tail * k_tail.transpose();
                scores *= scale;
                for (int r = 0; r < T; ++r)
                    for (int c = tail_start + r + 1; c < seq_; ++c) scores(r, c) = kMaskValue;
                softmax_rows_inplace(scores);

                MatrixF z(T, dh);
                z.noalias() = scores.leftCols(tail_start) * v_top;
                z.noalias() += scores.rightCols(T) * v_tail;
                MatrixF head_out = z * wo;

                const SuffixEdit& e = edits[static_cast<size_t>(b)];
                auto rit = e.head_replace_final.find({l, head});
                if (rit != e.head_replace_final.end()) head_out.row(T - 1) = rit->second;
                auto ait = e.head_add_final.find({l, head});
                if (ait != e.head_add_final.end()) head_out.row(T - 1) += ait->second;

                for (const auto& [pl, ph] : req.want_final_pattern_rows)
                    if (pl == l && ph == head)
                        results[static_cast<size_t>(b)].final_pattern_rows[{l, head}] =
                            scores.row(T - 1);
                for (const auto& [pl, ph] : req.want_final_head_outputs)
                    if (pl == l && ph == head)
                        results[static_cast<size_t>(b)].final_head_outputs[{l, head}] =
                            head_out.row(T - 1);

                attn_stack.middleRows(b * T, T) += head_out;
            }
        }
        attn_stack.array().rowwise() += w.out_bias.transpose().array();
        stack += attn_stack;

        const MatrixF h2 = layer_norm(stack, w.ln2_gain, w.ln2_bias, cfg.ln_eps);
        MatrixF inner = h2 * w.mlp_in_weight;
        inner.array().rowwise() += w.mlp_in_bias.transpose().array();
        gelu_new_inplace(inner);
        MatrixF mlp = inner * w.mlp_out_weight;
        mlp.array().rowwise() += w.mlp_out_bias.transpose().array();
        stack += mlp;
        for (int b = 0; b < B; ++b) tails[static_cast<size_t>(b)] = stack.middleRows(b * T, T);
    }

    if (req.want_final_logits || req.want_greedy || !req.logit_ids.empty()) {
        MatrixF finals(B, d);
        for (int b = 0; b < B; ++b) finals.row(b) = tails[static_cast<size_t>(b)].row(T - 1);
        const MatrixF normed =
            layer_norm(finals, base.final_ln_gain(), base.final_ln_bias(), cfg.ln_eps);
        // Chunked unembedding keeps the batch x vocab product bounded.
        const int chunk = 128;
        for (int start = 0; start < B; start += chunk) {
            const int rows = std::min(chunk, B - start);
            const MatrixF logits =
                normed.middleRows(start, rows) * base.token_embedding().transpose();
            for (int r = 0; r < rows; ++r) {
                SuffixResult& res = results[static_cast<size_t>(start + r)];
                if (req.want_final_logits) res.final_logits = logits.row(r);
                if (req.want_greedy) {
                    Eigen::Index arg = 0;
                    logits.row(r).maxCoeff(&arg);
                    res.greedy_id = static_cast<int>(arg);
                }
                for (int id : req.logit_ids) res.requested_logits.push_back(logits(r, id));
            }
        }
    }
    return results;
}

}  // namespace hc::runtime
