#pragma once

#include "hc/common.hpp"
#include "hc/composition.hpp"
#include "hc/runtime.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace hc::edit {

// Per-component singular value multipliers. 0 removes a component, 1 keeps
// it, anything in between rescales.
struct EditPlan {
    struct Entry {
        compose::ComponentRef component;
        float multiplier = 0.f;
    };
    std::vector<Entry> entries;
    std::string scope_note;

    void validate(const model::ModelConfig& cfg) const;
    std::string to_json() const;
    static EditPlan from_json(const std::string& text);
};

// A weight edit expressed as a per-layer overlay over an immutable base
// model. Unedited layers (and unedited heads inside edited layers) stay
// bit-identical to the base.
class EditedModel {
  public:
    runtime::ModelView view() const { return {*base_, &overlay_ptrs_}; }
    const runtime::Model& base() const { return *base_; }
    const EditPlan& plan() const { return plan_; }
    const std::string& checkpoint_digest() const { return base_->checkpoint_digest(); }

  private:
    friend EditedModel apply_edit(const runtime::Model&, const EditPlan&);
    const runtime::Model* base_ = nullptr;
    EditPlan plan_;
    std::map<int, runtime::LayerWeights> patched_layers_;
    std::map<int, const runtime::LayerWeights*> overlay_ptrs_;
};

// Zeroes or rescales singular values of each edited head's OV and
// re-factorizes into value/output weights (left sqrt(S') and sqrt(S') right^T,
// so the product is the component-edited matrix). The value bias is carried
// through the refactored basis so its resid-stream contribution along kept
// components is preserved; the shared output bias is untouched.
EditedModel apply_edit(const runtime::Model& model, const EditPlan& plan);

// Zeroes every component of the listed heads except the kept sets.
EditedModel keep_only(const runtime::Model& model,
                      const std::map<std::pair<int, int>, std::set<int>>& kept_per_head);

// The base model the edit was derived from, untouched.
const runtime::Model& revert(const EditedModel& edited);

}  // namespace hc::edit
