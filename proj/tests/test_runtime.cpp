#include "hc/runtime.hpp"

#include "helpers.hpp"

#include <doctest.h>
#include <json.hpp>

#include <fstream>
#include <random>

using namespace hc;
using runtime::Hook;
using runtime::HookAction;
using runtime::HookPoint;

namespace {

std::vector<int> ioi_ids(const harness::Assets& assets) {
    return assets.tokenizer->encode(
        "Then, John and Mary went to the store. John gave a drink to");
}

}  // namespace

TEST_CASE("greedy_next picks the argmax, lowest id on ties") {
    runtime::ForwardOutput out;
    out.logits = MatrixF::Zero(2, 5);
    out.logits(1, 3) = 2.f;
    CHECK(runtime::greedy_next(out) == 3);
    CHECK(runtime::logit_of(out, 3) == 2.f);
    out.logits(1, 1) = 2.f;  // tie: lowest id wins
    CHECK(runtime::greedy_next(out) == 1);
    CHECK_THROWS_AS(runtime::logit_of(out, 99), RangeError);
}

TEST_CASE("IOI prompt greedily continues with the indirect object") {
    HC_REQUIRE_MODEL(assets);
    const auto out = runtime::forward(*assets->model, ioi_ids(*assets));
    CHECK(runtime::greedy_next(out) == assets->tokenizer->encode(" Mary")[0]);
}

TEST_CASE("attention patterns are causal softmax distributions") {
    HC_REQUIRE_MODEL(assets);
    std::vector<Hook> hooks;
    for (int h = 0; h < 12; ++h)
        hooks.push_back({HookPoint::attn_pattern(9, h), HookAction::record()});
    const auto out = runtime::forward(*assets->model, ioi_ids(*assets), hooks);
    for (int h = 0; h < 12; ++h) {
        const MatrixF& p = runtime::attention_pattern(out, 9, h);
        REQUIRE(p.rows() == p.cols());
        CHECK(p(0, 0) == doctest::Approx(1.f).epsilon(1e-6));
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
            CHECK(p.row(r).sum() == doctest::Approx(1.f).epsilon(1e-5));
            for (Eigen::Index c = r + 1; c < p.cols(); ++c) CHECK(p(r, c) == 0.f);
        }
    }
    CHECK_THROWS_AS(runtime::attention_pattern(out, 3, 0), Error);
}

TEST_CASE("record-then-replace with the recorded value is a no-op") {
    HC_REQUIRE_MODEL(assets);
    const auto ids = ioi_ids(*assets);
    std::vector<Hook> rec{{HookPoint::head_output(9, 9), HookAction::record()}};
    const auto clean = runtime::forward(*assets->model, ids, rec);
    const MatrixF* captured = clean.recorded(HookPoint::head_output(9, 9));
    REQUIRE(captured != nullptr);

    std::vector<Hook> rep{{HookPoint::head_output(9, 9), HookAction::replace(*captured)}};
    const auto replayed = runtime::forward(*assets->model, ids, rep);
    CHECK((replayed.logits - clean.logits).cwiseAbs().maxCoeff() <= 1e-5f);
}

TEST_CASE("hook algebra: add then subtract restores clean logits") {
    HC_REQUIRE_MODEL(assets);
    const auto ids = ioi_ids(*assets);
    const auto clean = runtime::forward(*assets->model, ids);
    std::mt19937_64 rng(3);
    RowVectorF v(768);
    for (int i = 0; i < 768; ++i)
        v(i) = std::uniform_real_distribution<float>(-1.f, 1.f)(rng);
    std::vector<Hook> hooks{
        {HookPoint::resid_pre(6, HookPoint::Select::Final), HookAction::add(v)},
        {HookPoint::resid_pre(6, HookPoint::Select::Final), HookAction::add(-v)}};
    const auto out = runtime::forward(*assets->model, ids, hooks);
    CHECK((out.logits - clean.logits).cwiseAbs().maxCoeff() <= 1e-4f);
}

TEST_CASE("record hooks observe modifications from hooks listed before them") {
    HC_REQUIRE_MODEL(assets);
    const auto ids = ioi_ids(*assets);
    const RowVectorF v = RowVectorF::Constant(768, 0.5f);
    std::vector<Hook> hooks{
        {HookPoint::head_output(5, 2), HookAction::record()},
        {HookPoint::head_output(5, 2, HookPoint::Select::All), HookAction::replace(v)},
        {HookPoint::head_output(5, 2), HookAction::record()}};
    const auto out = runtime::forward(*assets->model, ids, hooks);
    REQUIRE(out.recordings[0].has_value());
    REQUIRE(out.recordings[2].has_value());
    CHECK((out.recordings[2]->row(0) - v).cwiseAbs().maxCoeff() == 0.f);
    CHECK((out.recordings[0]->row(0) - v).cwiseAbs().maxCoeff() > 0.f);
}

TEST_CASE("causality: tokens after p cannot influence logits at p") {
    HC_REQUIRE_MODEL(assets);
    auto ids = ioi_ids(*assets);
    const auto clean = runtime::forward(*assets->model, ids);
    const int p = 5;
    auto mutated = ids;
    for (size_t i = p + 1; i < mutated.size(); ++i) mutated[i] = 42;
    const auto out = runtime::forward(*assets->model, mutated);
    CHECK((out.logits.topRows(p + 1) - clean.logits.topRows(p + 1)).cwiseAbs().maxCoeff() ==
          0.f);
}

TEST_CASE("shape and range validation") {
    HC_REQUIRE_MODEL(assets);
    const auto ids = ioi_ids(*assets);
    std::vector<int> too_long(assets->config.n_ctx + 1, 0);
    CHECK_THROWS_WITH_AS(runtime::forward(*assets->model, too_long),
                         doctest::Contains("context overflow"), Error);

    std::vector<Hook> bad_dim{{HookPoint::head_output(9, 9, HookPoint::Select::Final),
                               HookAction::replace(RowVectorF::Zero(3))}};
    CHECK_THROWS_AS(runtime::forward(*assets->model, ids, bad_dim), ShapeError);

    std::vector<Hook> bad_head{{HookPoint::head_output(9, 99), HookAction::record()}};
    CHECK_THROWS_AS(runtime::forward(*assets->model, ids, bad_head), RangeError);

    std::vector<Hook> bad_pos{
        {HookPoint::resid_pre(0, HookPoint::Select::Positions, {1000}),
         HookAction::add(RowVectorF::Zero(768))}};
    CHECK_THROWS_AS(runtime::forward(*assets->model, ids, bad_pos), RangeError);
}

TEST_CASE("deterministic: repeated forward passes agree bitwise") {
    HC_REQUIRE_MODEL(assets);
    const auto ids = ioi_ids(*assets);
    const auto a = runtime::forward(*assets->model, ids);
    const auto b = runtime::forward(*assets->model, ids);
    CHECK((a.logits - b.logits).cwiseAbs().maxCoeff() == 0.f);
}

// --- PrefixRun equivalence -----------------------------------------------------

TEST_CASE("prefix resume with final-position replacements matches forward") {
    HC_REQUIRE_MODEL(assets);
    const auto ids = ioi_ids(*assets);
    std::mt19937_64 rng(11);
    RowVectorF va(768), vb(768);
    for (int i = 0; i < 768; ++i) {
        va(i) = std::uniform_real_distribution<float>(-2.f, 2.f)(rng);
        vb(i) = std::uniform_real_distribution<float>(-2.f, 2.f)(rng);
    }

    std::vector<Hook> hooks{
        {HookPoint::head_output(7, 9, HookPoint::Select::Final), HookAction::replace(va)},
        {HookPoint::head_output(8, 6, HookPoint::Select::Final), HookAction::replace(vb)},
        {HookPoint::attn_pattern(9, 9), HookAction::record()}};
    const auto reference = runtime::forward(*assets->model, ids, hooks);

    const runtime::PrefixRun run(*assets->model, ids);
    runtime::SuffixEdit edit;
    edit.head_replace_final[{7, 9}] = va;
    edit.head_replace_final[{8, 6}] = vb;
    runtime::SuffixRequest req;
    req.want_final_logits = true;
    req.want_greedy = true;
    req.want_final_pattern_rows = {{9, 9}};
    const auto results = run.resume(7, {&edit, 1}, req);

    const Eigen::Index last = reference.logits.rows() - 1;
    CHECK((results[0].final_logits - reference.logits.row(last)).cwiseAbs().maxCoeff() <=
          2e-3f);
    CHECK(results[0].greedy_id == runtime::greedy_next(reference));
    const MatrixF& ref_pattern = runtime::attention_pattern(reference, 9, 9);
    CHECK((results[0].final_pattern_rows.at({9, 9}) - ref_pattern.row(last))
              .cwiseAbs()
              .maxCoeff() <= 1e-5f);
}

TEST_CASE("prefix resume with early-position additions matches forward") {
    HC_REQUIRE_MODEL(assets);
    const auto ids = ioi_ids(*assets);
    std::mt19937_64 rng(13);
    RowVectorF v(768);
    for (int i = 0; i < 768; ++i)
        v(i) = std::uniform_real_distribution<float>(-5.f, 5.f)(rng);
    const int pos = 4;

    std::vector<Hook> hooks{
        {HookPoint::resid_pre(7, HookPoint::Select::Positions, {pos}), HookAction::add(v)},
        {HookPoint::attn_pattern(9, 9), HookAction::record()}};
    const auto reference = runtime::forward(*assets->model, ids, hooks);

    const runtime::PrefixRun run(*assets->model, ids);
    runtime::SuffixEdit edit;
    edit.resid_add.emplace_back(pos, v);
    runtime::SuffixRequest req;
    req.want_final_logits = true;
    req.want_final_pattern_rows = {{9, 9}};
    const auto results = run.resume(7, {&edit, 1}, req);

    const Eigen::Index last = reference.logits.rows() - 1;
    CHECK((results[0].final_logits - reference.logits.row(last)).cwiseAbs().maxCoeff() <=
          2e-3f);
    const MatrixF& ref_pattern = runtime::attention_pattern(reference, 9, 9);
    CHECK((results[0].final_pattern_rows.at({9, 9}) - ref_pattern.row(last))
              .cwiseAbs()
              .maxCoeff() <= 1e-5f);
}

TEST_CASE("prefix run exposes clean state consistent with forward") {
    HC_REQUIRE_MODEL(assets);
    const auto ids = ioi_ids(*assets);
    const auto clean = runtime::forward(*assets->model, ids);
    const runtime::PrefixRun run(*assets->model, ids);
    CHECK((run.clean_final_logits() - clean.logits.row(clean.logits.rows() - 1))
              .cwiseAbs()
              .maxCoeff() <= 2e-3f);

    // head_output_final equals a recorded head output's final row.
    std::vector<Hook> rec{{HookPoint::head_output(9, 9), HookAction::record()}};
    const auto with_rec = runtime::forward(*assets->model, ids, rec);
    const MatrixF* head_out = with_rec.recorded(HookPoint::head_output(9, 9));
    REQUIRE(head_out != nullptr);
    CHECK((run.head_output_final(9, 9) - head_out->row(head_out->rows() - 1))
              .cwiseAbs()
              .maxCoeff() <= 1e-4f);
}

TEST_CASE("forward parity with the reference implementation (sample)") {
    HC_REQUIRE_MODEL(assets);
    const auto dir = hc::test::fixtures_dir();
    std::ifstream meta_in(dir / "forward_parity_prompts.json");
    if (!meta_in.good()) {
        MESSAGE("forward-parity fixtures not present; skipping (acceptance gates this)");
        return;
    }
    nlohmann::json meta = nlohmann::json::parse(meta_in);
    std::ifstream logits_in(dir / "forward_parity_logits.f32", std::ios::binary);
    REQUIRE(logits_in.good());

    const int vocab = assets->config.vocab_size;
    std::vector<float> row(static_cast<size_t>(vocab));
    int checked = 0;
    for (size_t i = 0; i < meta.size() && checked < 25; i += 8, ++checked) {
        const auto ids = meta[i].at("ids").get<std::vector<int>>();
        logits_in.seekg(static_cast<std::streamoff>(i) * vocab * 4);
        logits_in.read(reinterpret_cast<char*>(row.data()),
                       static_cast<std::streamsize>(row.size() * 4));
        const auto out = runtime::forward(*assets->model, ids);
        const Eigen::Map<const RowVectorF> ref(row.data(), vocab);
        const float max_diff =
            (out.logits.row(out.logits.rows() - 1) - ref).cwiseAbs().maxCoeff();
        CAPTURE(i);
        CHECK(max_diff <= 1e-2f);
        CHECK(runtime::greedy_next(out) == meta[i].at("top1").get<int>());
    }
}
