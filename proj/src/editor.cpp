#include "hc/editor.hpp"

#include <json.hpp>

#include <cmath>

namespace hc::edit {

using nlohmann::json;

void EditPlan::validate(const model::ModelConfig& cfg) const {
    std::set<std::tuple<int, int, int>> seen;
    for (const Entry& e : entries) {
        if (e.component.layer < 0 || e.component.layer >= cfg.n_layers)
            throw RangeError("edit plan: layer out of range for " + e.component.str());
        if (e.component.head < 0 || e.component.head >= cfg.n_heads_per_layer)
            throw RangeError("edit plan: head out of range for " + e.component.str());
        if (e.component.index < 0 || e.component.index >= cfg.d_head)
            throw RangeError("edit plan: component index out of range for " + e.component.str());
        if (!std::isfinite(e.multiplier) || e.multiplier < 0.f)
            throw Error("edit plan: multiplier must be finite and >= 0 for " + e.component.str());
        if (!seen.insert({e.component.layer, e.component.head, e.component.index}).second)
            throw Error("edit plan: duplicate entry for component " + e.component.str());
    }
}

std::string EditPlan::to_json() const {
    json j;
    j["edits"] = json::array();
    for (const Entry& e : entries)
        j["edits"].push_back({{"component", e.component.str()}, {"multiplier", e.multiplier}});
    j["scope_note"] = scope_note;
    return j.dump(2);
}

EditPlan EditPlan::from_json(const std::string& text) {
    json j = json::parse(text);
    EditPlan p;
    for (const auto& e : j.at("edits"))
        p.entries.push_back({compose::ComponentRef::parse(e.at("component").get<std::string>()),
                             e.at("multiplier").get<float>()});
    if (j.contains("scope_note")) p.scope_note = j["scope_note"].get<std::string>();
    return p;
}

EditedModel apply_edit(const runtime::Model& model, const EditPlan& plan) {
    plan.validate(model.config());
    const auto& cfg = model.config();
    const int d = cfg.d_model;
    const int dh = cfg.d_head;

    // Group multipliers per head.
    std::map<std::pair<int, int>, std::map<int, float>> per_head;
    for (const EditPlan::Entry& e : plan.entries)
        per_head[{e.component.layer, e.component.head}][e.component.index] = e.multiplier;

    EditedModel em;
    em.base_ = &model;
    em.plan_ = plan;

    const runtime::ModelView base_view(model);
    for (const auto& [lh, multipliers] : per_head) {
        const auto [layer, head] = lh;
        auto [it, inserted] = em.patched_layers_.try_emplace(layer, model.layer(layer));
        runtime::LayerWeights& w = it->second;

        // Raw (unfolded) OV factors of this head.
        const compose::SvdFactors f = compose::svd(compose::build_ov(base_view, layer, head));

        VectorF sigma_edited = f.sigma;
        for (const auto& [index, mult] : multipliers) sigma_edited(index) *= mult;
        const VectorF sqrt_sigma = sigma_edited.cwiseSqrt();

        const MatrixF read_v = f.left * sqrt_sigma.asDiagonal();          // d x dh
        const MatrixF write_o = sqrt_sigma.asDiagonal() * f.right.transpose();  // dh x d

        // Carry the value bias through the new basis: its residual-stream
        // contribution t = b_v^T W_O is re-expressed over kept components and
        // dropped along zeroed ones, matching the component-sum semantics.
        const RowVectorF b_v_old = w.qkv_bias.segment(2 * d + head * dh, dh).transpose();
        const RowVectorF t = b_v_old * w.out_weight.middleRows(head * dh, dh);
        RowVectorF b_v_new = t * f.right;  // 1 x dh, coefficients along right vectors
        for (int i = 0; i < dh; ++i)
            b_v_new(i) = sqrt_sigma(i) > 0.f ? b_v_new(i) / sqrt_sigma(i) : 0.f;

        w.qkv_weight.block(0, 2 * d + head * dh, d, dh) = read_v;
        w.qkv_bias.segment(2 * d + head * dh, dh) = b_v_new.transpose();
        w.out_weight.middleRows(head * dh, dh) = write_o;
    }
    for (auto& [layer, w] : em.patched_layers_) em.overlay_ptrs_[layer] = &w;
    return em;
}

EditedModel keep_only(const runtime::Model& model,
                      const std::map<std::pair<int, int>, std::set<int>>& kept_per_head) {
    const int dh = model.config().d_head;
    EditPlan plan;
    for (const auto& [lh, kept] : kept_per_head) {
        for (int idx : kept)
            if (idx < 0 || idx >= dh)
                throw RangeError("keep_only: component index out of range: " +
                                 std::to_string(idx));
        for (int i = 0; i < dh; ++i)
            if (kept.count(i) == 0)
                plan.entries.push_back({{lh.first, lh.second, i}, 0.f});
    }
    plan.scope_note = "keep_only: all unlisted components zeroed in the listed heads";
    return apply_edit(model, plan);
}

const runtime::Model& revert(const EditedModel& edited) { return edited.base(); }

}  // namespace hc::edit
