#pragma once

#include "hc/common.hpp"
#include "hc/composition.hpp"
#include "hc/intervention.hpp"
#include "hc/model_io.hpp"
#include "hc/runtime.hpp"
#include "hc/tasks.hpp"
#include "hc/tokenizer.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace hc::harness {

inline constexpr const char* kCodeVersion = "headchannels 0.1.0";

// Exit codes surfaced by the CLI.
enum ExitCode {
    kOk = 0,
    kError = 1,
    kUnknownRecipe = 2,
    kMissingAssets = 3,
    kAssertionFailed = 4,
};

struct ExperimentConfig {
    std::string experiment;

    // Checkpoint reference.
    std::string base_url = "https://huggingface.co";
    std::string repo_id = "gpt2";
    std::string revision = "main";
    std::string checkpoint_file = "model.safetensors";
    std::string model_config_file = "config.json";
    std::string vocab_file = "vocab.json";
    std::string merges_file = "merges.txt";
    std::string cache_dir;  // empty: HC_CACHE_DIR or ~/.cache/headchannels

    uint64_t seed = 0;
    std::string preset = "desk";  // desk | full
    std::string out_dir = "runs";
    bool assert_criteria = false;

    // Dataset parameters.
    int ioi_count_per_order = 100;
    int ll_count = 250;
    int ll_n_min = 3;
    int ll_n_max = 10;
    int ll_single_n = 3;          // ll-traverse target N
    int ll_calibration_count = 50;
    int ll_eval_count = 200;
    int dup_length = 100;
    int dup_count = 100;
    int dup_n_duplicates = 10;

    // Intervention parameters.
    float alpha_lo = -100.f;
    float alpha_hi = 100.f;
    // Grid/sweep step by preset: full = 10, desk = 20.
    float step() const { return preset == "full" ? 10.f : 20.f; }
    int sweep_examples() const { return preset == "full" ? 2 * ioi_count_per_order : 100; }

    // Circuit heads.
    int mover_layer = 9;
    int mover_head = 9;
    std::vector<std::pair<int, int>> inhibition_heads = {{7, 3}, {7, 9}, {8, 6}, {8, 10}};
    // The heads whose channels carry the inhibition signal; 7.3's edit effect
    // is documented as weak, so it stays out of the steering trio.
    std::vector<std::pair<int, int>> strong_inhibition_heads = {{7, 9}, {8, 6}, {8, 10}};
    int duplicate_layer = 3;
    int duplicate_head = 0;
    int inhibition_boundary_layer = 7;  // resid insertion point for duplicate adds
    // Optional overrides; empty = resolve from scans.
    std::vector<std::string> traversal_components;
    // Frozen pass threshold for duplicate-separability; set after the one
    // calibration run.
    double separability_frozen_threshold = 0.0;

    std::string to_json() const;
    static ExperimentConfig from_json(const std::string& text);
    static ExperimentConfig from_json_file(const std::filesystem::path& p);
};

struct Assets {
    model::ModelConfig config;
    std::shared_ptr<const runtime::Model> model;
    std::shared_ptr<const bpe::Tokenizer> tokenizer;
    std::string checkpoint_sha256;
};

// Fetches (or reuses) checkpoint + tokenizer files and loads them.
Assets load_assets(const ExperimentConfig& cfg);

// The communication-channel components resolved from weight scans.
struct ChannelSet {
    // Per inhibition head: top-1 component vs the mover QK (query kind).
    std::map<std::pair<int, int>, compose::ComponentRef> top1;
    std::map<std::pair<int, int>, compose::CompositionReport> reports;
    // z of each head's components against the pooled scan null (every
    // upstream component vs the mover QK).
    std::map<std::pair<int, int>, std::vector<double>> scan_z;
    double scan_pool_mean = 0;
    double scan_pool_std = 0;
    // One channel per strong inhibition head (its top-1 component); the
    // steering/patching trio.
    std::vector<compose::ComponentRef> traversal;
    // Kept components for the keep-only experiment: per-head top-1 of each
    // strong inhibition head; the weak head is untouched.
    std::map<std::pair<int, int>, std::set<int>> keep_top_sets;
};

ChannelSet resolve_channels(compose::ChannelCache& cache, const ExperimentConfig& cfg);

// Mean mover-head inhibition score over an IOI dataset.
double mean_inhibition(const runtime::ModelView& view,
                       const std::vector<tasks::IoiExample>& dataset, int mover_layer,
                       int mover_head);

struct RunManifest {
    std::string experiment;
    std::string config_json;
    std::string checkpoint_sha256;
    std::string code_version = kCodeVersion;
    double wall_seconds = 0;
    std::map<std::string, double> metrics;
    std::map<std::string, bool> assertions;
    bool all_passed = true;

    void write_atomic(const std::filesystem::path& dir) const;
    static RunManifest read(const std::filesystem::path& dir);
};

// Executes a named recipe, writing results + manifest under
// <out_dir>/<experiment>/. Returns an ExitCode.
int run_recipe(const ExperimentConfig& cfg);

const std::vector<std::string>& recipe_names();

// Summary over finished runs: one row per experiment with target vs measured
// and pass/fail. Returns the text table, optionally fills CSV.
std::string report(const std::vector<std::filesystem::path>& run_dirs, std::string* csv_out);

}  // namespace hc::harness
