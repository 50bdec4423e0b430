#include "hc/intervention.hpp"

#include "helpers.hpp"

#include <doctest.h>

#include <random>

using namespace hc;

TEST_CASE("grid generation covers the cube in lexicographic order") {
    const auto grid = interv::grid_3d(-100.f, 100.f, 20.f);
    CHECK(grid.size() == 11 * 11 * 11);
    CHECK(grid.front().a1 == -100.f);
    CHECK(grid.back().a3 == 100.f);
    CHECK(grid[0] < grid[1]);
    CHECK_THROWS_AS(interv::grid_3d(0.f, -1.f, 10.f), Error);
    CHECK_THROWS_AS(interv::grid_3d(0.f, 1.f, 0.f), Error);
}

TEST_CASE("region map selection: single point, ties, empty cells") {
    std::vector<interv::GridRecord> traversal(2);
    traversal[0].point = {0.f, 0.f, 0.f};
    traversal[0].per_answer.assign(3, {});
    traversal[1].point = {10.f, 0.f, 0.f};
    traversal[1].per_answer.assign(3, {});

    SUBCASE("single informative point wins everywhere") {
        for (int i = 0; i < 3; ++i) {
            traversal[0].per_answer[static_cast<size_t>(i)] = {4, 2, 1};
            traversal[1].per_answer[static_cast<size_t>(i)] = {4, 3, 2};
        }
        const auto map =
            interv::build_region_map(traversal, 3, interv::Objective::Accuracy, 0);
        for (int i = 0; i < 3; ++i)
            CHECK(map.point_per_index[static_cast<size_t>(i)] == traversal[1].point);
    }

    SUBCASE("ties break to the lexicographically lowest point") {
        for (int i = 0; i < 3; ++i) {
            traversal[0].per_answer[static_cast<size_t>(i)] = {4, 2, 2};
            traversal[1].per_answer[static_cast<size_t>(i)] = {4, 2, 2};
        }
        const auto map =
            interv::build_region_map(traversal, 3, interv::Objective::Accuracy, 0);
        for (int i = 0; i < 3; ++i)
            CHECK(map.point_per_index[static_cast<size_t>(i)] == traversal[0].point);
    }

    SUBCASE("an answer index with no examples is an error") {
        traversal[0].per_answer[0] = {4, 2, 2};
        traversal[1].per_answer[0] = {4, 2, 2};
        CHECK_THROWS_WITH_AS(
            interv::build_region_map(traversal, 3, interv::Objective::Accuracy, 0),
            doctest::Contains("empty calibration cell"), Error);
    }
}

TEST_CASE("region map json round trip") {
    interv::RegionMap map;
    map.n_objects = 2;
    map.objective = "accuracy";
    map.calibration_seed = 99;
    map.point_per_index = {{-20.f, 0.f, 40.f}, {10.f, -10.f, 0.f}};
    const auto back = interv::RegionMap::from_json(map.to_json());
    CHECK(back.n_objects == 2);
    CHECK(back.point_per_index == map.point_per_index);
    CHECK(back.calibration_seed == 99);
}

TEST_CASE("projection patch is idempotent") {
    // Patching replaces projections along orthonormal directions; doing it
    // twice from the same donor changes nothing the second time.
    std::mt19937_64 rng(3);
    std::normal_distribution<float> dist;
    RowVectorF w1(16), w2(16);
    for (int i = 0; i < 16; ++i) {
        w1(i) = dist(rng);
        w2(i) = dist(rng);
    }
    w1.normalize();
    w2 -= w2.dot(w1) * w1;
    w2.normalize();
    RowVectorF recipient(16), donor(16);
    for (int i = 0; i < 16; ++i) {
        recipient(i) = dist(rng);
        donor(i) = dist(rng);
    }
    auto apply = [&](RowVectorF x) {
        for (const RowVectorF* w : {&w1, &w2})
            x += (donor.dot(*w) - x.dot(*w)) * (*w);
        return x;
    };
    const RowVectorF once = apply(recipient);
    const RowVectorF twice = apply(once);
    CHECK((twice - once).cwiseAbs().maxCoeff() <= 1e-5f);
    CHECK(once.dot(w1) == doctest::Approx(donor.dot(w1)).epsilon(1e-4));
}

TEST_CASE("crossover signature detects opposite monotone trends") {
    std::vector<interv::SweepPoint> curve(11);
    for (int i = 0; i < 11; ++i) {
        curve[static_cast<size_t>(i)].alpha = static_cast<float>(i - 5);
        curve[static_cast<size_t>(i)].mean_io_first = 0.1 * i;
        curve[static_cast<size_t>(i)].mean_s1_first = -0.07 * i;
    }
    CHECK(interv::crossover_signature(curve));
    for (auto& p : curve) p.mean_s1_first = -p.mean_s1_first;  // same direction now
    CHECK_FALSE(interv::crossover_signature(curve));
    for (auto& p : curve) {
        p.mean_io_first = 0.0;  // flat: no signal
        p.mean_s1_first = 0.0;
    }
    CHECK_FALSE(interv::crossover_signature(curve));
}

// --- model-backed checks ------------------------------------------------------

TEST_CASE("sweep at alpha zero equals explicit zero replacement") {
    HC_REQUIRE_MODEL(assets);
    compose::ChannelCache cache(runtime::ModelView(*assets->model));
    const auto dataset = tasks::gen_ioi(*assets->tokenizer, 4, 5);

    interv::ScaleSweep sweep;
    sweep.component = {8, 10, 1};
    sweep.alphas = {0.f};
    const auto curve = interv::run_scale_sweep(cache, sweep, dataset);

    double expect = 0;
    for (const auto& ex : dataset) {
        std::vector<runtime::Hook> hooks{
            {runtime::HookPoint::head_output(8, 10, runtime::HookPoint::Select::Final),
             runtime::HookAction::replace(RowVectorF::Zero(768))},
            {runtime::HookPoint::attn_pattern(9, 9), runtime::HookAction::record()}};
        const auto out = runtime::forward(*assets->model, ex.ids, hooks);
        expect += tasks::inhibition_score(runtime::attention_pattern(out, 9, 9), ex);
    }
    expect /= static_cast<double>(dataset.size());
    CHECK(curve[0].mean == doctest::Approx(expect).epsilon(1e-4));
}

TEST_CASE("duplicate-signal addition at alpha zero is the clean forward") {
    HC_REQUIRE_MODEL(assets);
    compose::ChannelCache cache(runtime::ModelView(*assets->model));
    const auto dataset = tasks::gen_ioi(*assets->tokenizer, 1, 6);
    const std::vector<compose::ComponentRef> comps = {{3, 0, 1}, {3, 0, 2}};

    const auto clean = runtime::forward(*assets->model, dataset[0].ids);
    const auto out = interv::add_duplicate_signal(cache, comps, dataset[0], true, 0.f);
    CHECK((out.logits - clean.logits).cwiseAbs().maxCoeff() == 0.f);
}

TEST_CASE("traversal at the origin matches the all-zeroed baseline") {
    HC_REQUIRE_MODEL(assets);
    compose::ChannelCache cache(runtime::ModelView(*assets->model));
    const auto data = tasks::gen_laundry(*assets->tokenizer, 3, 6, 11);
    const std::vector<compose::ComponentRef> comps = {{7, 9, 6}, {8, 6, 2}, {8, 6, 10}};
    const std::vector<interv::GridPoint3> grid = {{0.f, 0.f, 0.f}};
    const auto records = interv::traverse_grid(cache, comps, grid, data);
    REQUIRE(records.size() == 1);
    CHECK(records[0].n_examples == 6);

    // Baseline: both heads' outputs zeroed at the final position.
    int correct = 0;
    for (const auto& ex : data) {
        std::vector<runtime::Hook> hooks{
            {runtime::HookPoint::head_output(7, 9, runtime::HookPoint::Select::Final),
             runtime::HookAction::replace(RowVectorF::Zero(768))},
            {runtime::HookPoint::head_output(8, 6, runtime::HookPoint::Select::Final),
             runtime::HookAction::replace(RowVectorF::Zero(768))}};
        const auto out = runtime::forward(*assets->model, ex.ids, hooks);
        correct += runtime::greedy_next(out) == ex.answer_id ? 1 : 0;
    }
    CHECK(records[0].accuracy ==
          doctest::Approx(static_cast<double>(correct) / 6.0).epsilon(1e-9));
}

TEST_CASE("self-patch is the identity") {
    HC_REQUIRE_MODEL(assets);
    compose::ChannelCache cache(runtime::ModelView(*assets->model));
    const auto dataset = tasks::gen_ioi(*assets->tokenizer, 1, 8);
    interv::PatchSpec spec;
    spec.components = {{7, 9, 6}, {8, 6, 2}, {8, 6, 10}};
    spec.donor = &dataset[0];
    spec.recipient = &dataset[0];
    const auto res = interv::subspace_patch(cache, spec);
    CHECK(res.fldd == doctest::Approx(0.0).epsilon(1e-3));
    CHECK_FALSE(res.interchanged);
}

TEST_CASE("replacement at the final position leaves earlier logits unchanged") {
    HC_REQUIRE_MODEL(assets);
    const auto dataset = tasks::gen_ioi(*assets->tokenizer, 1, 9);
    const auto& ids = dataset[0].ids;
    const auto clean = runtime::forward(*assets->model, ids);
    std::vector<runtime::Hook> hooks{
        {runtime::HookPoint::head_output(7, 9, runtime::HookPoint::Select::Final),
         runtime::HookAction::replace(RowVectorF::Constant(768, 3.f))}};
    const auto out = runtime::forward(*assets->model, ids, hooks);
    const auto rows = clean.logits.rows();
    CHECK((out.logits.topRows(rows - 1) - clean.logits.topRows(rows - 1))
              .cwiseAbs()
              .maxCoeff() == 0.f);
    CHECK((out.logits.row(rows - 1) - clean.logits.row(rows - 1)).cwiseAbs().maxCoeff() >
          0.f);
}

TEST_CASE("patch spec validation") {
    HC_REQUIRE_MODEL(assets);
    compose::ChannelCache cache(runtime::ModelView(*assets->model));
    interv::PatchSpec spec;
    spec.components = {{7, 9, 6}};
    CHECK_THROWS_AS(interv::subspace_patch(cache, spec), Error);

    auto data = tasks::gen_ioi(*assets->tokenizer, 1, 10);
    tasks::IoiExample longer = data[0];
    longer.ids.push_back(longer.ids.back());
    spec.donor = &data[0];
    spec.recipient = &longer;
    CHECK_THROWS_WITH_AS(interv::subspace_patch(cache, spec),
                         doctest::Contains("minimal pair"), Error);
}
