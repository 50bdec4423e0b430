#pragma once

#include "hc/common.hpp"
#include "hc/composition.hpp"
#include "hc/runtime.hpp"
#include "hc/tasks.hpp"

#include <string>
#include <vector>

namespace hc::interv {

// The mover head all IOI / Laundry List measurements read from.
struct MoverRef {
    int layer = 9;
    int head = 9;
};

// ---------------------------------------------------------------------------
// 1-D component scaling

struct ScaleSweep {
    compose::ComponentRef component;
    std::vector<float> alphas;  // strictly ascending
    // Default: replace the head output at the final position only. The
    // all-positions variant replaces it everywhere.
    bool all_positions = false;
    std::string dataset_id;
};

struct SweepPoint {
    float alpha = 0;
    double mean = 0;
    double stddev = 0;
    double mean_io_first = 0;
    double mean_s1_first = 0;
};

// Replaces the component's head output with alpha * write_direction and
// averages the mover-head inhibition score over the dataset.
std::vector<SweepPoint> run_scale_sweep(compose::ChannelCache& cache, const ScaleSweep& sweep,
                                        const std::vector<tasks::IoiExample>& dataset,
                                        MoverRef mover = {});

// Opposite monotone trends of the two prompt orders over alpha, the
// positional-signal signature. |rho| must reach `min_rho` on both subsets
// with opposite signs.
bool crossover_signature(const std::vector<SweepPoint>& curve, double min_rho = 0.8);

// ---------------------------------------------------------------------------
// Duplicate-channel additions

// alpha * (w1 + w2)/sqrt(2) for the two duplicate-channel components, added
// to the residual stream at the inhibition layer boundary at the named
// token's position. Returns the full hooked forward output.
runtime::ForwardOutput add_duplicate_signal(compose::ChannelCache& cache,
                                            const std::vector<compose::ComponentRef>& components,
                                            const tasks::IoiExample& ex, bool at_io, float alpha,
                                            int boundary_layer = 7, MoverRef mover = {});

struct DuplicateAddPoint {
    float alpha = 0;
    double mean_inhibition_at_io = 0;
    double mean_inhibition_at_s1 = 0;
};

std::vector<DuplicateAddPoint> run_duplicate_add_sweep(
    compose::ChannelCache& cache, const std::vector<compose::ComponentRef>& components,
    const std::vector<float>& alphas, const std::vector<tasks::IoiExample>& dataset,
    int boundary_layer = 7, MoverRef mover = {});

// ---------------------------------------------------------------------------
// 3-D traversal and region maps

struct GridPoint3 {
    float a1 = 0, a2 = 0, a3 = 0;
    auto operator<=>(const GridPoint3&) const = default;
};

std::vector<GridPoint3> grid_3d(float lo, float hi, float step);

struct AnswerCell {
    int n = 0;
    int n_correct = 0;         // greedy prediction equals the answer
    int n_attend_correct = 0;  // mover's modal attended index equals the answer index
};

struct GridRecord {
    GridPoint3 point;
    std::vector<int> attended_histogram;  // per object index
    int modal_attended = -1;
    double accuracy = 0;
    int n_examples = 0;
    std::vector<AnswerCell> per_answer;
};

// At every grid point, replaces the listed components' head outputs at the
// final position with their scaled write directions (components sharing a
// head sum) and records where the mover head attends plus task accuracy.
std::vector<GridRecord> traverse_grid(compose::ChannelCache& cache,
                                      const std::vector<compose::ComponentRef>& components,
                                      const std::vector<GridPoint3>& grid,
                                      const std::vector<tasks::LaundryExample>& dataset,
                                      MoverRef mover = {});

enum class Objective { Attention, Accuracy };

struct RegionMap {
    int n_objects = 0;
    std::vector<GridPoint3> point_per_index;  // answer index -> grid point
    std::string objective;
    uint64_t calibration_seed = 0;

    std::string to_json() const;
    static RegionMap from_json(const std::string& text);
};

// Per answer index, the grid point maximizing the objective over calibration
// examples with that index. Ties break to the lexicographically lowest
// coordinates; an index with no calibration examples is an error.
RegionMap build_region_map(const std::vector<GridRecord>& traversal, int n_objects,
                           Objective objective, uint64_t calibration_seed);

// Steered accuracy: each example runs at the grid point its answer index
// maps to.
double apply_region_map(compose::ChannelCache& cache, const RegionMap& map,
                        const std::vector<compose::ComponentRef>& components,
                        const std::vector<tasks::LaundryExample>& dataset);

// ---------------------------------------------------------------------------
// Minimal-pair subspace patching

struct PatchSpec {
    std::vector<compose::ComponentRef> components;
    const tasks::IoiExample* donor = nullptr;
    const tasks::IoiExample* recipient = nullptr;
};

struct PatchResult {
    double ld_clean = 0;    // logit(IO) - logit(S), clean run
    double ld_patched = 0;
    double fldd = 0;        // percent
    bool fldd_valid = false;  // false when ld_clean <= 0
    bool interchanged = false;
};

// Replaces the recipient's head-output projections onto the listed
// components' write directions with the donor's projections at the final
// position. FLDD = 100 * (LD_clean - LD_patched) / LD_clean; interchanged
// means the greedy prediction flipped to the donor-implied (subject) name.
PatchResult subspace_patch(compose::ChannelCache& cache, const PatchSpec& spec);

struct PatchAggregate {
    double mean_fldd = 0;
    double interchange_accuracy = 0;
    int n_valid = 0;
    int n_excluded = 0;  // ld_clean <= 0
};

// Each example acts once as recipient with its order-swapped neighbor as
// donor (examples 2k and 2k+1 pair up).
PatchAggregate run_subspace_patching(compose::ChannelCache& cache,
                                     const std::vector<compose::ComponentRef>& components,
                                     const std::vector<tasks::IoiExample>& dataset);

}  // namespace hc::interv
