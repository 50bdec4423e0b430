#include "hc/intervention.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace hc::interv {

using nlohmann::json;

namespace {

// Spearman rank correlation of y against ascending x order.
double spearman_vs_index(const std::vector<double>& y) {
    const size_t n = y.size();
    if (n < 2) return 0.0;
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return y[a] < y[b]; });
    std::vector<double> rank(n);
    for (size_t i = 0; i < n;) {
        size_t j = i;
        while (j + 1 < n && y[order[j + 1]] == y[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    const double mean_rank = (static_cast<double>(n) + 1.0) / 2.0;
    double num = 0, den_x = 0, den_y = 0;
    for (size_t i = 0; i < n; ++i) {
        const double dx = static_cast<double>(i) + 1.0 - mean_rank;
        const double dy = rank[i] - mean_rank;
        num += dx * dy;
        den_x += dx * dx;
        den_y += dy * dy;
    }
    if (den_x == 0 || den_y == 0) return 0.0;
    return num / std::sqrt(den_x * den_y);
}

// Groups components by owning head and returns, per head, the stacked write
// directions (rows) so a coefficient vector turns into one replacement row.
struct HeadChannels {
    int layer, head;
    MatrixF write_dirs;           // n_comp x d
    std::vector<size_t> comp_slot;  // index into the component list
};

std::vector<HeadChannels> group_by_head(compose::ChannelCache& cache,
                                        const std::vector<compose::ComponentRef>& components) {
    std::map<std::pair<int, int>, std::vector<size_t>> grouped;
    for (size_t i = 0; i < components.size(); ++i)
        grouped[{components[i].layer, components[i].head}].push_back(i);
    std::vector<HeadChannels> out;
    const int d = cache.model().config().d_model;
    for (const auto& [lh, slots] : grouped) {
        HeadChannels hc{lh.first, lh.second, MatrixF(static_cast<Eigen::Index>(slots.size()), d),
                        slots};
        for (size_t r = 0; r < slots.size(); ++r)
            hc.write_dirs.row(static_cast<Eigen::Index>(r)) =
                cache.write_dir(components[slots[r]]);
        out.push_back(std::move(hc));
    }
    return out;
}

int min_layer(const std::vector<compose::ComponentRef>& components) {
    int m = std::numeric_limits<int>::max();
    for (const auto& c : components) m = std::min(m, c.layer);
    return m;
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<SweepPoint> run_scale_sweep(compose::ChannelCache& cache, const ScaleSweep& sweep,
                                        const std::vector<tasks::IoiExample>& dataset,
                                        MoverRef mover) {
    if (sweep.alphas.empty()) throw Error("sweep needs at least one alpha");
    if (!std::is_sorted(sweep.alphas.begin(), sweep.alphas.end(),
                        [](float a, float b) { return a <= b; }))
        throw Error("sweep alphas must be strictly ascending");
    if (dataset.empty()) throw Error("sweep dataset is empty");

    const RowVectorF w = cache.write_dir(sweep.component);
    const int layer = sweep.component.layer;
    const int head = sweep.component.head;
    const auto n_alpha = sweep.alphas.size();

    struct Acc {
        double sum = 0, sumsq = 0, sum_io = 0, sum_s1 = 0;
        int n_io = 0, n_s1 = 0;
    };
    std::vector<std::vector<Acc>> per_example(dataset.size(),
                                              std::vector<Acc>(n_alpha));

#pragma omp parallel for schedule(dynamic)
    for (long long e = 0; e < static_cast<long long>(dataset.size()); ++e) {
        const auto& ex = dataset[static_cast<size_t>(e)];
        const runtime::ModelView& model = cache.model();
        if (!sweep.all_positions) {
            const runtime::PrefixRun run(model, ex.ids);
            std::vector<runtime::SuffixEdit> edits(n_alpha);
            for (size_t a = 0; a < n_alpha; ++a)
                edits[a].head_replace_final[{layer, head}] = sweep.alphas[a] * w;
            runtime::SuffixRequest req;
            req.want_final_logits = false;
            req.want_final_pattern_rows = {{mover.layer, mover.head}};
            const auto results = run.resume(layer, edits, req);
            for (size_t a = 0; a < n_alpha; ++a) {
                const float s = tasks::inhibition_score_from_final_row(
                    results[a].final_pattern_rows.at({mover.layer, mover.head}), ex);
                Acc& acc = per_example[static_cast<size_t>(e)][a];
                acc.sum = s;
                if (ex.io_first) {
                    acc.sum_io = s;
                    acc.n_io = 1;
                } else {
                    acc.sum_s1 = s;
                    acc.n_s1 = 1;
                }
            }
        } else {
            for (size_t a = 0; a < n_alpha; ++a) {
                std::vector<runtime::Hook> hooks;
                hooks.push_back({runtime::HookPoint::head_output(layer, head),
                                 runtime::HookAction::replace(sweep.alphas[a] * w)});
                hooks.push_back({runtime::HookPoint::attn_pattern(mover.layer, mover.head),
                                 runtime::HookAction::record()});
                const auto out = runtime::forward(model, ex.ids, hooks);
                const float s =
                    tasks::inhibition_score(runtime::attention_pattern(out, mover.layer, mover.head), ex);
                Acc& acc = per_example[static_cast<size_t>(e)][a];
                acc.sum = s;
                if (ex.io_first) {
                    acc.sum_io = s;
                    acc.n_io = 1;
                } else {
                    acc.sum_s1 = s;
                    acc.n_s1 = 1;
                }
            }
        }
    }

    std::vector<SweepPoint> curve(n_alpha);
    for (size_t a = 0; a < n_alpha; ++a) {
        SweepPoint& p = curve[a];
        p.alpha = sweep.alphas[a];
        double sum = 0, sumsq = 0, sum_io = 0, sum_s1 = 0;
        int n_io = 0, n_s1 = 0;
        for (size_t e = 0; e < dataset.size(); ++e) {
            const Acc& acc = per_example[e][a];
            sum += acc.sum;
            sumsq += acc.sum * acc.sum;
            sum_io += acc.sum_io;
            sum_s1 += acc.sum_s1;
            n_io += acc.n_io;
            n_s1 += acc.n_s1;
        }
        const auto n = static_cast<double>(dataset.size());
        p.mean = sum / n;
        p.stddev = std::sqrt(std::max(0.0, sumsq / n - p.mean * p.mean));
        p.mean_io_first = n_io > 0 ? sum_io / n_io : 0.0;
        p.mean_s1_first = n_s1 > 0 ? sum_s1 / n_s1 : 0.0;
    }
    return curve;
}

bool crossover_signature(const std::vector<SweepPoint>& curve, double min_rho) {
    std::vector<double> io, s1;
    for (const SweepPoint& p : curve) {
        io.push_back(p.mean_io_first);
        s1.push_back(p.mean_s1_first);
    }
    const double rho_io = spearman_vs_index(io);
    const double rho_s1 = spearman_vs_index(s1);
    return std::abs(rho_io) >= min_rho && std::abs(rho_s1) >= min_rho &&
           rho_io * rho_s1 < 0;
}

// ---------------------------------------------------------------------------

runtime::ForwardOutput add_duplicate_signal(compose::ChannelCache& cache,
                                            const std::vector<compose::ComponentRef>& components,
                                            const tasks::IoiExample& ex, bool at_io, float alpha,
                                            int boundary_layer, MoverRef mover) {
    if (components.empty()) throw Error("duplicate signal needs at least one component");
    RowVectorF dir = RowVectorF::Zero(cache.model().config().d_model);
    for (const auto& c : components) dir += cache.write_dir(c);
    dir /= std::sqrt(static_cast<float>(components.size()));

    const int pos = at_io ? ex.io_pos : ex.s1_pos;
    if (pos < 0 || pos >= static_cast<int>(ex.ids.size()))
        throw RangeError("role position missing from example");
    std::vector<runtime::Hook> hooks;
    hooks.push_back({runtime::HookPoint::resid_pre(boundary_layer,
                                                   runtime::HookPoint::Select::Positions, {pos}),
                     runtime::HookAction::add(alpha * dir)});
    hooks.push_back({runtime::HookPoint::attn_pattern(mover.layer, mover.head),
                     runtime::HookAction::record()});
    return runtime::forward(cache.model(), ex.ids, hooks);
}

std::vector<DuplicateAddPoint> run_duplicate_add_sweep(
    compose::ChannelCache& cache, const std::vector<compose::ComponentRef>& components,
    const std::vector<float>& alphas, const std::vector<tasks::IoiExample>& dataset,
    int boundary_layer, MoverRef mover) {
    RowVectorF dir = RowVectorF::Zero(cache.model().config().d_model);
    for (const auto& c : components) dir += cache.write_dir(c);
    dir /= std::sqrt(static_cast<float>(components.size()));

    const auto n_alpha = alphas.size();
    std::vector<std::vector<double>> sums_io(n_alpha, std::vector<double>(dataset.size(), 0));
    std::vector<std::vector<double>> sums_s1(n_alpha, std::vector<double>(dataset.size(), 0));

#pragma omp parallel for schedule(dynamic)
    for (long long e = 0; e < static_cast<long long>(dataset.size()); ++e) {
        const auto& ex = dataset[static_cast<size_t>(e)];
        const runtime::PrefixRun run(cache.model(), ex.ids);
        runtime::SuffixRequest req;
        req.want_final_logits = false;
        req.want_final_pattern_rows = {{mover.layer, mover.head}};
        for (const bool at_io : {true, false}) {
            const int pos = at_io ? ex.io_pos : ex.s1_pos;
            std::vector<runtime::SuffixEdit> edits(n_alpha);
            for (size_t a = 0; a < n_alpha; ++a)
                edits[a].resid_add.emplace_back(pos, alphas[a] * dir);
            const auto results = run.resume(boundary_layer, edits, req);
            for (size_t a = 0; a < n_alpha; ++a) {
                const float s = tasks::inhibition_score_from_final_row(
                    results[a].final_pattern_rows.at({mover.layer, mover.head}), ex);
                (at_io ? sums_io : sums_s1)[a][static_cast<size_t>(e)] = s;
            }
        }
    }

    std::vector<DuplicateAddPoint> out(n_alpha);
    for (size_t a = 0; a < n_alpha; ++a) {
        out[a].alpha = alphas[a];
        out[a].mean_inhibition_at_io =
            std::accumulate(sums_io[a].begin(), sums_io[a].end(), 0.0) / dataset.size();
        out[a].mean_inhibition_at_s1 =
            std::accumulate(sums_s1[a].begin(), sums_s1[a].end(), 0.0) / dataset.size();
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<GridPoint3> grid_3d(float lo, float hi, float step) {
    if (step <= 0 || hi < lo) throw Error("bad grid range");
    std::vector<float> axis;
    for (float v = lo; v <= hi + 1e-6f; v += step) axis.push_back(v);
    std::vector<GridPoint3> grid;
    grid.reserve(axis.size() * axis.size() * axis.size());
    for (float a : axis)
        for (float b : axis)
            for (float c : axis) grid.push_back({a, b, c});
    return grid;
}

std::vector<GridRecord> traverse_grid(compose::ChannelCache& cache,
                                      const std::vector<compose::ComponentRef>& components,
                                      const std::vector<GridPoint3>& grid,
                                      const std::vector<tasks::LaundryExample>& dataset,
                                      MoverRef mover) {
    if (grid.empty()) throw Error("grid is empty");
    if (components.size() != 3) throw Error("traverse_grid expects exactly three components");
    if (dataset.empty()) throw Error("traversal dataset is empty");
    const int n_objects = dataset.front().n_objects;

    const auto heads = group_by_head(cache, components);
    const int resume_layer = min_layer(components);

    // Precompute per grid point, per head, the replacement rows.
    std::vector<std::vector<RowVectorF>> replacement(heads.size());
    for (size_t h = 0; h < heads.size(); ++h) {
        replacement[h].resize(grid.size());
        for (size_t g = 0; g < grid.size(); ++g) {
            const float coeffs[3] = {grid[g].a1, grid[g].a2, grid[g].a3};
            RowVectorF row = RowVectorF::Zero(heads[h].write_dirs.cols());
            for (size_t r = 0; r < heads[h].comp_slot.size(); ++r)
                row += coeffs[heads[h].comp_slot[r]] *
                       heads[h].write_dirs.row(static_cast<Eigen::Index>(r));
            replacement[h][g] = std::move(row);
        }
    }

    struct Tally {
        std::vector<int> attended;  // per object index
        int n = 0, n_correct = 0;
        std::vector<AnswerCell> per_answer;
    };
    std::vector<Tally> tallies(grid.size());
    for (Tally& t : tallies) {
        t.attended.assign(static_cast<size_t>(n_objects), 0);
        t.per_answer.assign(static_cast<size_t>(n_objects), {});
    }

#pragma omp parallel
    {
        std::vector<Tally> local(grid.size());
        for (Tally& t : local) {
            t.attended.assign(static_cast<size_t>(n_objects), 0);
            t.per_answer.assign(static_cast<size_t>(n_objects), {});
        }
#pragma omp for schedule(dynamic)
        for (long long e = 0; e < static_cast<long long>(dataset.size()); ++e) {
            const auto& ex = dataset[static_cast<size_t>(e)];
            const runtime::PrefixRun run(cache.model(), ex.ids);
            std::vector<runtime::SuffixEdit> edits(grid.size());
            for (size_t g = 0; g < grid.size(); ++g)
                for (size_t h = 0; h < heads.size(); ++h)
                    edits[g].head_replace_final[{heads[h].layer, heads[h].head}] =
                        replacement[h][g];
            runtime::SuffixRequest req;
            req.want_final_logits = false;
            req.want_greedy = true;
            req.want_final_pattern_rows = {{mover.layer, mover.head}};
            const auto results = run.resume(resume_layer, edits, req);
            for (size_t g = 0; g < grid.size(); ++g) {
                const int idx = tasks::attended_index_from_final_row(
                    results[g].final_pattern_rows.at({mover.layer, mover.head}), ex);
                const bool correct = results[g].greedy_id == ex.answer_id;
                Tally& t = local[g];
                t.attended[static_cast<size_t>(idx)] += 1;
                t.n += 1;
                t.n_correct += correct ? 1 : 0;
                AnswerCell& cell = t.per_answer[static_cast<size_t>(ex.missing_index)];
                cell.n += 1;
                cell.n_correct += correct ? 1 : 0;
                cell.n_attend_correct += (idx == ex.missing_index) ? 1 : 0;
            }
        }
#pragma omp critical
        for (size_t g = 0; g < grid.size(); ++g) {
            Tally& t = tallies[g];
            const Tally& l = local[g];
            for (int i = 0; i < n_objects; ++i) t.attended[static_cast<size_t>(i)] += l.attended[static_cast<size_t>(i)];
            t.n += l.n;
            t.n_correct += l.n_correct;
            for (int i = 0; i < n_objects; ++i) {
                t.per_answer[static_cast<size_t>(i)].n += l.per_answer[static_cast<size_t>(i)].n;
                t.per_answer[static_cast<size_t>(i)].n_correct +=
                    l.per_answer[static_cast<size_t>(i)].n_correct;
                t.per_answer[static_cast<size_t>(i)].n_attend_correct +=
                    l.per_answer[static_cast<size_t>(i)].n_attend_correct;
            }
        }
    }

    std::vector<GridRecord> records(grid.size());
    for (size_t g = 0; g < grid.size(); ++g) {
        GridRecord& r = records[g];
        r.point = grid[g];
        r.attended_histogram = tallies[g].attended;
        int modal = 0;
        for (int i = 1; i < n_objects; ++i)
            if (r.attended_histogram[static_cast<size_t>(i)] >
                r.attended_histogram[static_cast<size_t>(modal)])
                modal = i;
        r.modal_attended = modal;
        r.n_examples = tallies[g].n;
        r.accuracy = tallies[g].n > 0
                         ? static_cast<double>(tallies[g].n_correct) / tallies[g].n
                         : 0.0;
        r.per_answer = tallies[g].per_answer;
    }
    return records;
}

std::string RegionMap::to_json() const {
    json j;
    j["n_objects"] = n_objects;
    j["objective"] = objective;
    j["calibration_seed"] = calibration_seed;
    json pts = json::array();
    for (const GridPoint3& p : point_per_index) pts.push_back({p.a1, p.a2, p.a3});
    j["point_per_index"] = pts;
    return j.dump(2);
}

RegionMap RegionMap::from_json(const std::string& text) {
    json j = json::parse(text);
    RegionMap m;
    m.n_objects = j.at("n_objects").get<int>();
    m.objective = j.at("objective").get<std::string>();
    m.calibration_seed = j.at("calibration_seed").get<uint64_t>();
    for (const auto& p : j.at("point_per_index"))
        m.point_per_index.push_back({p.at(0).get<float>(), p.at(1).get<float>(), p.at(2).get<float>()});
    return m;
}

RegionMap build_region_map(const std::vector<GridRecord>& traversal, int n_objects,
                           Objective objective, uint64_t calibration_seed) {
    if (traversal.empty()) throw Error("empty traversal");
    RegionMap map;
    map.n_objects = n_objects;
    map.objective = objective == Objective::Attention ? "attention" : "accuracy";
    map.calibration_seed = calibration_seed;
    map.point_per_index.resize(static_cast<size_t>(n_objects));

    for (int idx = 0; idx < n_objects; ++idx) {
        double best = -1.0;
        const GridPoint3* best_point = nullptr;
        for (const GridRecord& r : traversal) {
            const AnswerCell& cell = r.per_answer.at(static_cast<size_t>(idx));
            if (cell.n == 0) continue;
            const double value =
                objective == Objective::Attention
                    ? static_cast<double>(cell.n_attend_correct) / cell.n
                    : static_cast<double>(cell.n_correct) / cell.n;
            if (value > best || (value == best && best_point != nullptr && r.point < *best_point)) {
                best = value;
                best_point = &r.point;
            }
        }
        if (best_point == nullptr)
            throw Error("empty calibration cell for answer index " + std::to_string(idx));
        map.point_per_index[static_cast<size_t>(idx)] = *best_point;
    }
    return map;
}

double apply_region_map(compose::ChannelCache& cache, const RegionMap& map,
                        const std::vector<compose::ComponentRef>& components,
                        const std::vector<tasks::LaundryExample>& dataset) {
    if (components.size() != 3) throw Error("region map steering expects three components");
    const auto heads = group_by_head(cache, components);
    const int resume_layer = min_layer(components);

    std::vector<int> correct(dataset.size(), 0);
#pragma omp parallel for schedule(dynamic)
    for (long long e = 0; e < static_cast<long long>(dataset.size()); ++e) {
        const auto& ex = dataset[static_cast<size_t>(e)];
        const GridPoint3& p = map.point_per_index.at(static_cast<size_t>(ex.missing_index));
        const float coeffs[3] = {p.a1, p.a2, p.a3};
        const runtime::PrefixRun run(cache.model(), ex.ids);
        runtime::SuffixEdit edit;
        for (const auto& head : heads) {
            RowVectorF row = RowVectorF::Zero(head.write_dirs.cols());
            for (size_t r = 0; r < head.comp_slot.size(); ++r)
                row += coeffs[head.comp_slot[r]] *
                       head.write_dirs.row(static_cast<Eigen::Index>(r));
            edit.head_replace_final[{head.layer, head.head}] = std::move(row);
        }
        runtime::SuffixRequest req;
        req.want_final_logits = false;
        req.want_greedy = true;
        const auto results = run.resume(resume_layer, {&edit, 1}, req);
        correct[static_cast<size_t>(e)] = results[0].greedy_id == ex.answer_id ? 1 : 0;
    }
    double n = 0;
    for (int c : correct) n += c;
    return n / static_cast<double>(dataset.size());
}

// ---------------------------------------------------------------------------

PatchResult subspace_patch(compose::ChannelCache& cache, const PatchSpec& spec) {
    if (spec.donor == nullptr || spec.recipient == nullptr)
        throw Error("patch spec needs donor and recipient");
    if (spec.donor->ids.size() != spec.recipient->ids.size())
        throw Error("donor/recipient token lengths differ; not a minimal pair");
    if (spec.components.empty()) throw Error("patch spec has no components");

    const auto heads = group_by_head(cache, spec.components);
    const int resume_layer = min_layer(spec.components);

    const runtime::PrefixRun donor_run(cache.model(), spec.donor->ids);
    const runtime::PrefixRun recip_run(cache.model(), spec.recipient->ids);

    runtime::SuffixEdit edit;
    for (const auto& head : heads) {
        const RowVectorF donor_out = donor_run.head_output_final(head.layer, head.head);
        const RowVectorF recip_out = recip_run.head_output_final(head.layer, head.head);
        RowVectorF patched = recip_out;
        for (Eigen::Index r = 0; r < head.write_dirs.rows(); ++r) {
            const RowVectorF w = head.write_dirs.row(r);
            const float delta = donor_out.dot(w) - recip_out.dot(w);
            patched += delta * w;
        }
        edit.head_replace_final[{head.layer, head.head}] = std::move(patched);
    }

    runtime::SuffixRequest req;
    req.want_final_logits = false;
    req.want_greedy = true;
    req.logit_ids = {spec.recipient->answer_id, spec.recipient->s_token_id};
    const auto results = recip_run.resume(resume_layer, {&edit, 1}, req);

    const RowVectorF clean_logits = recip_run.clean_final_logits();
    PatchResult res;
    res.ld_clean = static_cast<double>(clean_logits(spec.recipient->answer_id)) -
                   clean_logits(spec.recipient->s_token_id);
    res.ld_patched =
        static_cast<double>(results[0].requested_logits[0]) - results[0].requested_logits[1];
    res.fldd_valid = res.ld_clean > 0;
    res.fldd = res.fldd_valid ? 100.0 * (res.ld_clean - res.ld_patched) / res.ld_clean : 0.0;
    res.interchanged = results[0].greedy_id == spec.recipient->s_token_id;
    return res;
}

PatchAggregate run_subspace_patching(compose::ChannelCache& cache,
                                     const std::vector<compose::ComponentRef>& components,
                                     const std::vector<tasks::IoiExample>& dataset) {
    if (dataset.size() % 2 != 0)
        throw Error("patching dataset must pair up (even size)");
    std::vector<PatchResult> results(dataset.size());
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < static_cast<long long>(dataset.size()); ++i) {
        const size_t pair_base = static_cast<size_t>(i) / 2 * 2;
        const size_t donor_idx = pair_base + (static_cast<size_t>(i) % 2 == 0 ? 1 : 0);
        PatchSpec spec;
        spec.components = components;
        spec.donor = &dataset[donor_idx];
        spec.recipient = &dataset[static_cast<size_t>(i)];
        results[static_cast<size_t>(i)] = subspace_patch(cache, spec);
    }
    PatchAggregate agg;
    double fldd_sum = 0;
    int interchanged = 0;
    for (const PatchResult& r : results) {
        if (!r.fldd_valid) {
            ++agg.n_excluded;
            continue;
        }
        ++agg.n_valid;
        fldd_sum += r.fldd;
        interchanged += r.interchanged ? 1 : 0;
    }
    if (agg.n_valid > 0) {
        agg.mean_fldd = fldd_sum / agg.n_valid;
        agg.interchange_accuracy = static_cast<double>(interchanged) / agg.n_valid;
    }
    return agg;
}

}  // namespace hc::interv
