#include "hc/harness.hpp"

#include "helpers.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace hc;
namespace fs = std::filesystem;

TEST_CASE("experiment config json round trip") {
    harness::ExperimentConfig cfg;
    cfg.experiment = "ll-steer";
    cfg.seed = 1234;
    cfg.preset = "full";
    cfg.ll_n_max = 8;
    cfg.traversal_components = {"7.9.6", "8.6.2", "8.6.10"};
    const auto back = harness::ExperimentConfig::from_json(cfg.to_json());
    CHECK(back.experiment == "ll-steer");
    CHECK(back.seed == 1234);
    CHECK(back.preset == "full");
    CHECK(back.ll_n_max == 8);
    CHECK(back.traversal_components == cfg.traversal_components);
    CHECK(back.inhibition_heads == cfg.inhibition_heads);
    CHECK(back.step() == 10.f);
}

TEST_CASE("manifest round trip and atomic write") {
    harness::RunManifest m;
    m.experiment = "demo";
    m.config_json = harness::ExperimentConfig{}.to_json();
    m.checkpoint_sha256 = "abc";
    m.wall_seconds = 1.5;
    m.metrics["x"] = 0.25;
    m.assertions["ok"] = true;

    const fs::path dir = fs::temp_directory_path() / "hc-manifest-test";
    fs::create_directories(dir);
    m.write_atomic(dir);
    const auto back = harness::RunManifest::read(dir);
    CHECK(back.experiment == "demo");
    CHECK(back.metrics.at("x") == 0.25);
    CHECK(back.assertions.at("ok"));
    CHECK(back.all_passed);
    CHECK_FALSE(fs::exists(dir / "manifest.json.tmp"));
}

TEST_CASE("report formats manifests") {
    SUBCASE("empty input yields an empty table") {
        std::string csv;
        const std::string text = harness::report({}, &csv);
        CHECK(text.find("experiment") != std::string::npos);
        CHECK(csv.find("metric") != std::string::npos);
    }

    SUBCASE("identical runs produce identical measured columns") {
        const fs::path a = fs::temp_directory_path() / "hc-report-a";
        const fs::path b = fs::temp_directory_path() / "hc-report-b";
        fs::create_directories(a);
        fs::create_directories(b);
        harness::RunManifest m;
        m.experiment = "same";
        m.config_json = "{}";
        m.metrics["metric"] = 0.5;
        m.write_atomic(a);
        m.write_atomic(b);
        std::string csv_a, csv_b;
        harness::report({a}, &csv_a);
        harness::report({b}, &csv_b);
        CHECK(csv_a == csv_b);
    }

    SUBCASE("missing manifest is an error") {
        CHECK_THROWS_AS(
            harness::report({fs::temp_directory_path() / "hc-no-such-run"}, nullptr),
            Error);
    }
}

TEST_CASE("unknown recipe lists the valid names") {
    harness::ExperimentConfig cfg;
    cfg.experiment = "does-not-exist";
    try {
        harness::run_recipe(cfg);
        FAIL("expected an error");
    } catch (const Error& e) {
        const std::string what = e.what();
        CHECK(what.find("unknown recipe") != std::string::npos);
        for (const auto& name : harness::recipe_names())
            CHECK(what.find(name) != std::string::npos);
    }
}

TEST_CASE("channel resolution finds strong per-head components") {
    HC_REQUIRE_MODEL(assets);
    harness::ExperimentConfig cfg;
    compose::ChannelCache cache(runtime::ModelView(*assets->model));
    const auto channels = harness::resolve_channels(cache, cfg);
    CHECK(channels.top1.size() == cfg.inhibition_heads.size());
    REQUIRE(channels.traversal.size() == 3);
    // The traversal components come from the inhibition heads.
    for (const auto& c : channels.traversal) {
        bool from_inhibition = false;
        for (const auto& [l, h] : cfg.inhibition_heads)
            if (c.layer == l && c.head == h) from_inhibition = true;
        CHECK(from_inhibition);
    }
    // Config override wins.
    harness::ExperimentConfig forced = cfg;
    forced.traversal_components = {"7.9.6", "8.6.2", "8.6.10"};
    const auto forced_channels = harness::resolve_channels(cache, forced);
    CHECK(forced_channels.traversal[0] == compose::ComponentRef{7, 9, 6});
}

TEST_CASE("clean inhibition score sits in the documented band") {
    HC_REQUIRE_MODEL(assets);
    harness::ExperimentConfig cfg;
    const auto dataset = tasks::gen_ioi(*assets->tokenizer, 20, 2);
    const double score = harness::mean_inhibition(runtime::ModelView(*assets->model), dataset,
                                                  cfg.mover_layer, cfg.mover_head);
    CHECK(score > 0.4);
    CHECK(score < 1.0);
}
