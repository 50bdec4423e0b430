#include "hc/editor.hpp"
#include "hc/harness.hpp"
#include "hc/intervention.hpp"
#include "hc/tasks.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

using namespace hc;

harness::ExperimentConfig make_config(const std::string& config_path, uint64_t seed,
                                      const std::string& preset, bool assert_criteria,
                                      const std::string& out_dir) {
    harness::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = harness::ExperimentConfig::from_json_file(config_path);
    if (seed != static_cast<uint64_t>(-1)) cfg.seed = seed;
    if (!preset.empty()) cfg.preset = preset;
    if (assert_criteria) cfg.assert_criteria = true;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    return cfg;
}

int do_run(harness::ExperimentConfig cfg, const std::string& name) {
    cfg.experiment = name;
    const int code = harness::run_recipe(cfg);
    const auto dir = std::filesystem::path(cfg.out_dir) / name;
    std::cout << harness::report({dir}, nullptr);
    if (code == harness::kAssertionFailed)
        std::cerr << "assertions failed for recipe " << name << "\n";
    return code;
}

std::string read_stdin() {
    std::stringstream ss;
    ss << std::cin.rdbuf();
    return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Discover, edit and causally test low-rank communication channels "
                 "between GPT-2 attention heads"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, preset, out_dir;
    uint64_t seed = static_cast<uint64_t>(-1);
    bool assert_criteria = false;
    app.add_option("--config", config_path, "JSON experiment config file")->envname("HC_CONFIG");
    app.add_option("--seed", seed, "Dataset / RNG seed");
    app.add_option("--preset", preset, "Scale preset: desk or full")
        ->check(CLI::IsMember({"desk", "full"}));
    app.add_flag("--assert", assert_criteria, "Exit non-zero if target bands are missed");
    app.add_option("--out", out_dir, "Output directory");

    // fetch -------------------------------------------------------------
    auto* fetch = app.add_subcommand("fetch", "Download model artifacts into the cache");
    // tokenize ------------------------------------------------------------
    auto* tokenize = app.add_subcommand("tokenize", "Encode text (or decode ids with --decode)");
    std::string tok_text;
    std::vector<int> tok_ids;
    tokenize->add_option("--text", tok_text, "Text to encode ('-' reads stdin)");
    tokenize->add_option("--decode", tok_ids, "Token ids to decode");
    // compose -------------------------------------------------------------
    auto* compose_cmd = app.add_subcommand("compose", "Per-component composition report");
    std::string src_head = "8.6", tgt_head = "9.9", kind_str = "query";
    bool fold_ln = false;
    compose_cmd->add_option("--source", src_head, "Source head L.H");
    compose_cmd->add_option("--target", tgt_head, "Target head L.H");
    compose_cmd->add_option("--kind", kind_str)->check(CLI::IsMember({"query", "key", "value"}));
    compose_cmd->add_flag("--fold-ln", fold_ln, "Fold pre-attention LN gains into reads");
    // scan ----------------------------------------------------------------
    auto* scan_cmd = app.add_subcommand("scan", "Rank heads composing with one component");
    std::string scan_comp = "7.9.6", scan_dir = "downstream", scan_kind = "query";
    scan_cmd->add_option("--component", scan_comp, "Component L.H.C");
    scan_cmd->add_option("--direction", scan_dir)
        ->check(CLI::IsMember({"upstream", "downstream"}));
    scan_cmd->add_option("--kind", scan_kind)->check(CLI::IsMember({"query", "key", "value"}));
    // edit ----------------------------------------------------------------
    auto* edit_cmd = app.add_subcommand("edit", "Apply an edit plan and measure IOI inhibition");
    std::string plan_path;
    edit_cmd->add_option("--plan", plan_path, "Edit plan JSON ('-' reads stdin)")->required();
    // sweep ---------------------------------------------------------------
    auto* sweep_cmd = app.add_subcommand("sweep", "1-D component scaling sweep on IOI");
    std::string sweep_comp;
    sweep_cmd->add_option("--component", sweep_comp, "Component L.H.C (default: 8.10 top-1)");
    // traverse ------------------------------------------------------------
    auto* traverse_cmd = app.add_subcommand("traverse", "3-D inhibition-space traversal");
    int traverse_n = 3;
    traverse_cmd->add_option("--objects", traverse_n, "Laundry List object count");
    // patch ---------------------------------------------------------------
    app.add_subcommand("patch", "Minimal-pair subspace patching (FLDD / interchange)");
    // gen -----------------------------------------------------------------
    auto* gen_cmd = app.add_subcommand("gen", "Generate a dataset as JSON lines");
    std::string gen_task = "ioi", gen_out;
    int gen_n = 3, gen_count = 0;
    gen_cmd->add_option("--task", gen_task)->check(CLI::IsMember({"ioi", "laundry", "dupseq"}));
    gen_cmd->add_option("--objects", gen_n, "Laundry List object count");
    gen_cmd->add_option("--count", gen_count, "Example count (0 = task default)");
    gen_cmd->add_option("--file", gen_out, "Output path (default stdout)");
    // eval ----------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "Clean baselines (IOI inhibition, LL accuracy)");
    std::string eval_task = "ioi";
    int eval_n = 3;
    eval_cmd->add_option("--task", eval_task)->check(CLI::IsMember({"ioi", "laundry"}));
    eval_cmd->add_option("--objects", eval_n, "Laundry List object count");
    // run -----------------------------------------------------------------
    auto* run_cmd = app.add_subcommand("run", "Run a named experiment recipe");
    std::string recipe;
    run_cmd->add_option("recipe", recipe, "Recipe name")->required();
    // report --------------------------------------------------------------
    auto* report_cmd = app.add_subcommand("report", "Summarize finished runs");
    std::vector<std::string> report_dirs;
    std::string report_csv;
    report_cmd->add_option("dirs", report_dirs, "Run output directories");
    report_cmd->add_option("--csv", report_csv, "Also write a CSV summary here");

    CLI11_PARSE(app, argc, argv);

    try {
        harness::ExperimentConfig cfg =
            make_config(config_path, seed, preset, assert_criteria, out_dir);

        if (fetch->parsed()) {
            const auto assets = harness::load_assets(cfg);
            std::cout << "checkpoint sha256: " << assets.checkpoint_sha256 << "\n"
                      << "layers: " << assets.config.n_layers
                      << ", heads: " << assets.config.n_heads_per_layer
                      << ", d_model: " << assets.config.d_model << "\n";
            return harness::kOk;
        }
        if (tokenize->parsed()) {
            const auto assets = harness::load_assets(cfg);
            if (!tok_ids.empty()) {
                std::cout << assets.tokenizer->decode(tok_ids) << "\n";
            } else {
                const std::string text = tok_text == "-" ? read_stdin() : tok_text;
                for (int id : assets.tokenizer->encode(text)) std::cout << id << " ";
                std::cout << "\n";
            }
            return harness::kOk;
        }
        if (compose_cmd->parsed()) {
            const auto assets = harness::load_assets(cfg);
            const auto src = compose::ComponentRef::parse(src_head + ".0");
            const auto tgt = compose::ComponentRef::parse(tgt_head + ".0");
            const auto rep = compose::component_scores(
                runtime::ModelView(*assets.model), src.layer, src.head, tgt.layer, tgt.head,
                compose::composition_kind_from_string(kind_str), compose::DecomposedSide::Source,
                fold_ln);
            std::cout << rep.to_json() << "\n";
            return harness::kOk;
        }
        if (scan_cmd->parsed()) {
            const auto assets = harness::load_assets(cfg);
            const auto ref = compose::ComponentRef::parse(scan_comp);
            const auto results = compose::scan_channel(
                runtime::ModelView(*assets.model), ref,
                scan_dir == "upstream" ? compose::ScanDirection::Upstream
                                       : compose::ScanDirection::Downstream,
                compose::composition_kind_from_string(scan_kind));
            std::cout << "layer,head,score\n";
            for (const auto& r : results)
                std::cout << r.layer << "," << r.head << "," << r.score << "\n";
            return harness::kOk;
        }
        if (edit_cmd->parsed()) {
            const auto assets = harness::load_assets(cfg);
            std::string plan_text;
            if (plan_path == "-") {
                plan_text = read_stdin();
            } else {
                std::ifstream in(plan_path);
                if (!in) throw Error("cannot open plan: " + plan_path);
                std::stringstream ss;
                ss << in.rdbuf();
                plan_text = ss.str();
            }
            const auto plan = edit::EditPlan::from_json(plan_text);
            const auto edited = edit::apply_edit(*assets.model, plan);
            const auto dataset =
                tasks::gen_ioi(*assets.tokenizer, cfg.ioi_count_per_order, cfg.seed);
            const double clean = harness::mean_inhibition(
                runtime::ModelView(*assets.model), dataset, cfg.mover_layer, cfg.mover_head);
            const double score = harness::mean_inhibition(edited.view(), dataset,
                                                          cfg.mover_layer, cfg.mover_head);
            std::cout << "clean mean inhibition:  " << clean << "\n"
                      << "edited mean inhibition: " << score << "\n"
                      << "relative drop: " << 100.0 * (clean - score) / clean << "%\n";
            return harness::kOk;
        }
        if (sweep_cmd->parsed()) {
            if (!sweep_comp.empty()) cfg.traversal_components = {sweep_comp};
            return do_run(cfg, "ioi-sweep");
        }
        if (traverse_cmd->parsed()) {
            cfg.ll_single_n = traverse_n;
            return do_run(cfg, "ll-traverse");
        }
        if (app.get_subcommand("patch")->parsed()) return do_run(cfg, "subspace-patch");
        if (gen_cmd->parsed()) {
            const auto assets = harness::load_assets(cfg);
            std::string payload;
            if (gen_task == "ioi") {
                payload = tasks::to_jsonl(tasks::gen_ioi(
                    *assets.tokenizer, gen_count > 0 ? gen_count / 2 : cfg.ioi_count_per_order,
                    cfg.seed));
            } else if (gen_task == "laundry") {
                payload = tasks::to_jsonl(tasks::gen_laundry(
                    *assets.tokenizer, gen_n, gen_count > 0 ? gen_count : cfg.ll_count,
                    cfg.seed));
            } else {
                payload = tasks::to_jsonl(tasks::gen_duplicate_seqs(
                    *assets.tokenizer, cfg.dup_length, cfg.dup_n_duplicates,
                    gen_count > 0 ? gen_count : cfg.dup_count, cfg.seed));
            }
            if (gen_out.empty()) {
                std::cout << payload;
            } else {
                std::ofstream out(gen_out);
                out << payload;
            }
            return harness::kOk;
        }
        if (eval_cmd->parsed()) {
            const auto assets = harness::load_assets(cfg);
            const runtime::ModelView view(*assets.model);
            if (eval_task == "ioi") {
                const auto dataset =
                    tasks::gen_ioi(*assets.tokenizer, cfg.ioi_count_per_order, cfg.seed);
                std::cout << "mean inhibition: "
                          << harness::mean_inhibition(view, dataset, cfg.mover_layer,
                                                      cfg.mover_head)
                          << "\n"
                          << "accuracy: " << tasks::task_accuracy(view, dataset) << "\n";
            } else {
                const auto dataset =
                    tasks::gen_laundry(*assets.tokenizer, eval_n, cfg.ll_count, cfg.seed);
                std::cout << "accuracy (N=" << eval_n
                          << "): " << tasks::task_accuracy(view, dataset) << "\n";
            }
            return harness::kOk;
        }
        if (run_cmd->parsed()) return do_run(cfg, recipe);
        if (report_cmd->parsed()) {
            std::vector<std::filesystem::path> dirs(report_dirs.begin(), report_dirs.end());
            std::string csv;
            std::cout << harness::report(dirs, &csv);
            if (!report_csv.empty()) {
                std::ofstream out(report_csv);
                out << csv;
            }
            return harness::kOk;
        }
    } catch (const hc::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        const std::string what = e.what();
        if (what.find("unknown recipe") != std::string::npos) return harness::kUnknownRecipe;
        if (what.find("HC_OFFLINE") != std::string::npos ||
            what.find("not found") != std::string::npos)
            return harness::kMissingAssets;
        return harness::kError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return harness::kError;
    }
    return harness::kOk;
}
