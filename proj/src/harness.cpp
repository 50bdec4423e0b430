#include "hc/harness.hpp"

#include "hc/editor.hpp"

#include <json.hpp>

#include <chrono>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace hc::harness {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

std::string ExperimentConfig::to_json() const {
    json j;
    j["experiment"] = experiment;
    j["base_url"] = base_url;
    j["repo_id"] = repo_id;
    j["revision"] = revision;
    j["checkpoint_file"] = checkpoint_file;
    j["model_config_file"] = model_config_file;
    j["vocab_file"] = vocab_file;
    j["merges_file"] = merges_file;
    j["cache_dir"] = cache_dir;
    j["seed"] = seed;
    j["preset"] = preset;
    j["out_dir"] = out_dir;
    j["assert"] = assert_criteria;
    j["ioi_count_per_order"] = ioi_count_per_order;
    j["ll_count"] = ll_count;
    j["ll_n_min"] = ll_n_min;
    j["ll_n_max"] = ll_n_max;
    j["ll_single_n"] = ll_single_n;
    j["ll_calibration_count"] = ll_calibration_count;
    j["ll_eval_count"] = ll_eval_count;
    j["dup_length"] = dup_length;
    j["dup_count"] = dup_count;
    j["dup_n_duplicates"] = dup_n_duplicates;
    j["alpha_lo"] = alpha_lo;
    j["alpha_hi"] = alpha_hi;
    j["mover_layer"] = mover_layer;
    j["mover_head"] = mover_head;
    json ih = json::array();
    for (const auto& [l, h] : inhibition_heads) ih.push_back({l, h});
    j["inhibition_heads"] = ih;
    json sih = json::array();
    for (const auto& [l, h] : strong_inhibition_heads) sih.push_back({l, h});
    j["strong_inhibition_heads"] = sih;
    j["duplicate_layer"] = duplicate_layer;
    j["duplicate_head"] = duplicate_head;
    j["inhibition_boundary_layer"] = inhibition_boundary_layer;
    j["traversal_components"] = traversal_components;
    j["separability_frozen_threshold"] = separability_frozen_threshold;
    return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    ExperimentConfig c;
    auto get = [&](const char* k, auto& field) {
        if (j.contains(k)) field = j[k].get<std::decay_t<decltype(field)>>();
    };
    get("experiment", c.experiment);
    get("base_url", c.base_url);
    get("repo_id", c.repo_id);
    get("revision", c.revision);
    get("checkpoint_file", c.checkpoint_file);
    get("model_config_file", c.model_config_file);
    get("vocab_file", c.vocab_file);
    get("merges_file", c.merges_file);
    get("cache_dir", c.cache_dir);
    get("seed", c.seed);
    get("preset", c.preset);
    get("out_dir", c.out_dir);
    get("assert", c.assert_criteria);
    get("ioi_count_per_order", c.ioi_count_per_order);
    get("ll_count", c.ll_count);
    get("ll_n_min", c.ll_n_min);
    get("ll_n_max", c.ll_n_max);
    get("ll_single_n", c.ll_single_n);
    get("ll_calibration_count", c.ll_calibration_count);
    get("ll_eval_count", c.ll_eval_count);
    get("dup_length", c.dup_length);
    get("dup_count", c.dup_count);
    get("dup_n_duplicates", c.dup_n_duplicates);
    get("alpha_lo", c.alpha_lo);
    get("alpha_hi", c.alpha_hi);
    get("mover_layer", c.mover_layer);
    get("mover_head", c.mover_head);
    if (j.contains("inhibition_heads")) {
        c.inhibition_heads.clear();
        for (const auto& p : j["inhibition_heads"])
            c.inhibition_heads.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    }
    if (j.contains("strong_inhibition_heads")) {
        c.strong_inhibition_heads.clear();
        for (const auto& p : j["strong_inhibition_heads"])
            c.strong_inhibition_heads.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    }
    get("duplicate_layer", c.duplicate_layer);
    get("duplicate_head", c.duplicate_head);
    get("inhibition_boundary_layer", c.inhibition_boundary_layer);
    get("traversal_components", c.traversal_components);
    get("separability_frozen_threshold", c.separability_frozen_threshold);
    return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw Error("cannot open config file: " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

// ---------------------------------------------------------------------------
// Assets

Assets load_assets(const ExperimentConfig& cfg) {
    model::HubSource source;
    source.base_url = env_var("HC_HUB_BASE_URL").value_or(cfg.base_url);
    source.repo_id = cfg.repo_id;
    source.revision = cfg.revision;
    source.files = {cfg.model_config_file, cfg.vocab_file, cfg.merges_file, cfg.checkpoint_file};
    const fs::path cache =
        cfg.cache_dir.empty() ? model::default_cache_dir() : fs::path(cfg.cache_dir);

    const fs::path config_path = model::fetch_artifact(source, cfg.model_config_file, cache);
    const fs::path vocab_path = model::fetch_artifact(source, cfg.vocab_file, cache);
    const fs::path merges_path = model::fetch_artifact(source, cfg.merges_file, cache);
    const fs::path ckpt_path = model::fetch_artifact(source, cfg.checkpoint_file, cache);

    Assets a;
    a.config = model::ModelConfig::from_json_file(config_path);
    const fs::path manifest = ckpt_path.parent_path() / (cfg.checkpoint_file + ".manifest.json");
    if (fs::exists(manifest)) {
        std::ifstream in(manifest);
        json m = json::parse(in, nullptr, false);
        if (!m.is_discarded() && m.contains("sha256"))
            a.checkpoint_sha256 = m["sha256"].get<std::string>();
    }
    const model::TensorStore store = model::TensorStore::load(ckpt_path);
    a.model = std::make_shared<runtime::Model>(
        runtime::Model::load(store, a.config, model::ArchMap::gpt2(), a.checkpoint_sha256));
    a.tokenizer = std::make_shared<bpe::Tokenizer>(
        bpe::Tokenizer::from_files(vocab_path, merges_path));
    return a;
}

// ---------------------------------------------------------------------------
// Channel resolution

ChannelSet resolve_channels(compose::ChannelCache& cache, const ExperimentConfig& cfg) {
    ChannelSet set;
    for (const auto& [l, h] : cfg.inhibition_heads) {
        compose::CompositionReport rep = compose::component_scores(
            cache.model(), l, h, cfg.mover_layer, cfg.mover_head, compose::CompositionKind::Query);
        set.top1[{l, h}] = {l, h, rep.top_component()};
        set.reports.emplace(std::make_pair(l, h), std::move(rep));
    }

    // Pooled scan null: every component of every head below the mover layer,
    // against the mover's QK.
    {
        const auto& mcfg = cache.model().config();
        const MatrixF qk =
            compose::build_qk(cache.model(), cfg.mover_layer, cfg.mover_head).matrix;
        const double qk_norm = qk.cast<double>().norm();
        std::vector<double> pool;
        std::map<std::pair<int, int>, std::vector<double>> per_head;
        for (int l = 0; l < cfg.mover_layer; ++l) {
            for (int h = 0; h < mcfg.n_heads_per_layer; ++h) {
                const auto& f = cache.factors(compose::MatrixKind::OV, l, h);
                const MatrixF vtm = f.right.transpose() * qk;
                auto& scores = per_head[{l, h}];
                for (Eigen::Index i = 0; i < f.sigma.size(); ++i) {
                    scores.push_back(vtm.row(i).cast<double>().norm() / qk_norm);
                    pool.push_back(scores.back());
                }
            }
        }
        double sum = 0;
        for (double s : pool) sum += s;
        set.scan_pool_mean = sum / static_cast<double>(pool.size());
        double ss = 0;
        for (double s : pool) ss += (s - set.scan_pool_mean) * (s - set.scan_pool_mean);
        set.scan_pool_std = std::sqrt(ss / static_cast<double>(pool.size()));
        for (const auto& [lh, scores] : per_head) {
            auto& z = set.scan_z[lh];
            for (double s : scores) z.push_back((s - set.scan_pool_mean) / set.scan_pool_std);
        }
    }

    if (!cfg.traversal_components.empty()) {
        for (const std::string& s : cfg.traversal_components)
            set.traversal.push_back(compose::ComponentRef::parse(s));
    } else {
        for (const auto& [l, h] : cfg.strong_inhibition_heads)
            set.traversal.push_back(set.top1.at({l, h}));
    }

    // Keep-sets cover the strong inhibition heads only; the weak head keeps
    // all of its components.
    for (const auto& lh : cfg.strong_inhibition_heads)
        set.keep_top_sets[lh].insert(set.top1.at(lh).index);
    return set;
}

double mean_inhibition(const runtime::ModelView& view,
                       const std::vector<tasks::IoiExample>& dataset, int mover_layer,
                       int mover_head) {
    std::vector<double> scores(dataset.size(), 0);
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < static_cast<long long>(dataset.size()); ++i) {
        const auto& ex = dataset[static_cast<size_t>(i)];
        const runtime::PrefixRun run(view, ex.ids, mover_layer);
        scores[static_cast<size_t>(i)] =
            tasks::inhibition_score(run.pattern(mover_layer, mover_head), ex);
    }
    return std::accumulate(scores.begin(), scores.end(), 0.0) /
           static_cast<double>(dataset.size());
}

// ---------------------------------------------------------------------------
// Manifest

void RunManifest::write_atomic(const fs::path& dir) const {
    json j;
    j["experiment"] = experiment;
    j["config"] = json::parse(config_json);
    j["checkpoint_sha256"] = checkpoint_sha256;
    j["code_version"] = code_version;
    j["wall_seconds"] = wall_seconds;
    j["metrics"] = metrics;
    j["assertions"] = assertions;
    j["all_passed"] = all_passed;
    const fs::path tmp = dir / "manifest.json.tmp";
    const fs::path final_path = dir / "manifest.json";
    std::ofstream out(tmp);
    out << j.dump(2) << "\n";
    out.close();
    fs::rename(tmp, final_path);
}

RunManifest RunManifest::read(const fs::path& dir) {
    const fs::path p = fs::is_directory(dir) ? dir / "manifest.json" : dir;
    std::ifstream in(p);
    if (!in) throw Error("missing manifest: " + p.string());
    json j = json::parse(in);
    RunManifest m;
    m.experiment = j.at("experiment").get<std::string>();
    m.config_json = j.at("config").dump();
    m.checkpoint_sha256 = j.value("checkpoint_sha256", "");
    m.code_version = j.value("code_version", "");
    m.wall_seconds = j.value("wall_seconds", 0.0);
    if (j.contains("metrics"))
        m.metrics = j["metrics"].get<std::map<std::string, double>>();
    if (j.contains("assertions"))
        m.assertions = j["assertions"].get<std::map<std::string, bool>>();
    m.all_passed = j.value("all_passed", true);
    return m;
}

// ---------------------------------------------------------------------------
// Recipe helpers

namespace {

std::vector<float> alpha_axis(const ExperimentConfig& cfg) {
    std::vector<float> axis;
    for (float a = cfg.alpha_lo; a <= cfg.alpha_hi + 1e-6f; a += cfg.step()) axis.push_back(a);
    return axis;
}

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream out(p);
    if (!out) throw Error("cannot write " + p.string());
    out << content;
}

std::string csv_sweep(const std::vector<interv::SweepPoint>& curve) {
    std::string s = "alpha,metric_mean,metric_std,mean_io_first,mean_s1_first\n";
    for (const auto& p : curve)
        s += std::to_string(p.alpha) + "," + std::to_string(p.mean) + "," +
             std::to_string(p.stddev) + "," + std::to_string(p.mean_io_first) + "," +
             std::to_string(p.mean_s1_first) + "\n";
    return s;
}

std::string csv_traversal(const std::vector<interv::GridRecord>& records, int n_objects) {
    std::string s = "alpha1,alpha2,alpha3,N,modal_index,accuracy,n_examples\n";
    for (const auto& r : records)
        s += std::to_string(r.point.a1) + "," + std::to_string(r.point.a2) + "," +
             std::to_string(r.point.a3) + "," + std::to_string(n_objects) + "," +
             std::to_string(r.modal_attended) + "," + std::to_string(r.accuracy) + "," +
             std::to_string(r.n_examples) + "\n";
    return s;
}

struct RecipeContext {
    const ExperimentConfig& cfg;
    Assets assets;
    fs::path out;
    RunManifest manifest;

    runtime::ModelView view() const { return {*assets.model}; }

    void check(const std::string& name, bool ok) {
        manifest.assertions[name] = ok;
        if (!ok) manifest.all_passed = false;
    }
    void metric(const std::string& name, double v) { manifest.metrics[name] = v; }
};

using RecipeFn = void (*)(RecipeContext&);

// --- compose-scan -----------------------------------------------------------

void recipe_compose_scan(RecipeContext& ctx) {
    const auto& cfg = ctx.cfg;
    compose::ChannelCache cache(ctx.view());
    const ChannelSet channels = resolve_channels(cache, cfg);

    for (const auto& [lh, rep] : channels.reports) {
        write_file(ctx.out / ("query_" + std::to_string(lh.first) + "." +
                              std::to_string(lh.second) + "_to_" +
                              std::to_string(cfg.mover_layer) + "." +
                              std::to_string(cfg.mover_head) + ".json"),
                   rep.to_json());
        const std::string tag =
            std::to_string(lh.first) + "." + std::to_string(lh.second);
        const int top = channels.top1.at(lh).index;
        ctx.metric("top1_index_" + tag, top);
        ctx.metric("top1_scan_z_" + tag,
                   channels.scan_z.at(lh)[static_cast<size_t>(top)]);
        ctx.metric("top1_report_z_" + tag, rep.z_scores[static_cast<size_t>(top)]);
    }

    // Value composition: the duplicate head against the inhibition channel
    // component it feeds (7.9's strongest query-composing component).
    const compose::ComponentRef inhib_comp = channels.top1.at({7, 9});
    const compose::CompositionReport value_rep = compose::component_scores_vs_component(
        cache.model(), cfg.duplicate_layer, cfg.duplicate_head, inhib_comp);
    write_file(ctx.out / ("value_3.0_to_" + inhib_comp.str() + ".json"), value_rep.to_json());
    const auto value_outliers = value_rep.outliers(5.0);
    ctx.metric("value_outlier_count", static_cast<double>(value_outliers.size()));
    for (size_t i = 0; i < value_outliers.size() && i < 3; ++i)
        ctx.metric("value_outlier_" + std::to_string(i), value_outliers[i]);

    // Key composition: previous-token head -> induction head.
    const compose::CompositionReport key_rep = compose::component_scores(
        cache.model(), 4, 11, 5, 5, compose::CompositionKind::Key);
    write_file(ctx.out / "key_4.11_to_5.5.json", key_rep.to_json());
    ctx.metric("key_outlier_count", static_cast<double>(key_rep.outliers(5.0).size()));

    // Channel scans around inhibition head 7.9's strongest component.
    const compose::ComponentRef anchor = channels.top1.count({7, 9})
                                             ? channels.top1.at({7, 9})
                                             : channels.traversal.at(0);
    const auto down = compose::scan_channel(cache.model(), anchor,
                                            compose::ScanDirection::Downstream,
                                            compose::CompositionKind::Query);
    const auto up = compose::scan_channel(cache.model(), anchor,
                                          compose::ScanDirection::Upstream,
                                          compose::CompositionKind::Value);
    std::string scan_csv = "direction,layer,head,score\n";
    for (const auto& r : down)
        scan_csv += "downstream," + std::to_string(r.layer) + "," + std::to_string(r.head) +
                    "," + std::to_string(r.score) + "\n";
    for (const auto& r : up)
        scan_csv += "upstream," + std::to_string(r.layer) + "," + std::to_string(r.head) + "," +
                    std::to_string(r.score) + "\n";
    write_file(ctx.out / ("scan_" + anchor.str() + ".csv"), scan_csv);
    for (size_t i = 0; i < down.size(); ++i)
        if (down[i].layer == cfg.mover_layer && down[i].head == cfg.mover_head)
            ctx.metric("downstream_mover_rank", static_cast<double>(i));
    for (size_t i = 0; i < up.size(); ++i)
        if (up[i].layer == cfg.duplicate_layer && up[i].head == cfg.duplicate_head)
            ctx.metric("upstream_duplicate_rank", static_cast<double>(i));

    for (const auto& lh : cfg.strong_inhibition_heads) {
        const std::string tag = std::to_string(lh.first) + "." + std::to_string(lh.second);
        const int top = channels.top1.at(lh).index;
        ctx.check("query_top1_scan_z_ge_5_" + tag,
                  channels.scan_z.at(lh)[static_cast<size_t>(top)] >= 5.0);
    }
    ctx.check("value_exactly_two_outliers", value_outliers.size() == 2);
    ctx.check("key_no_outliers", key_rep.outliers(5.0).empty());
}

// --- edit-inhibition ---------------------------------------------------------

void recipe_edit_inhibition(RecipeContext& ctx) {
    const auto& cfg = ctx.cfg;
    compose::ChannelCache cache(ctx.view());
    const ChannelSet channels = resolve_channels(cache, cfg);
    const auto dataset =
        tasks::gen_ioi(*ctx.assets.tokenizer, cfg.ioi_count_per_order, cfg.seed);

    const double clean = mean_inhibition(ctx.view(), dataset, cfg.mover_layer, cfg.mover_head);
    ctx.metric("clean_mean_inhibition", clean);

    std::string csv = "head,component,clean,edited,relative_drop_pct\n";
    std::map<std::pair<int, int>, double> drops;
    for (const auto& [lh, top] : channels.top1) {
        edit::EditPlan plan;
        plan.entries.push_back({top, 0.f});
        plan.scope_note = "zero the top query-composing component of " + top.str();
        const edit::EditedModel edited = edit::apply_edit(*ctx.assets.model, plan);
        const double score =
            mean_inhibition(edited.view(), dataset, cfg.mover_layer, cfg.mover_head);
        const double drop = 100.0 * (clean - score) / clean;
        drops[lh] = drop;
        csv += std::to_string(lh.first) + "." + std::to_string(lh.second) + "," + top.str() +
               "," + std::to_string(clean) + "," + std::to_string(score) + "," +
               std::to_string(drop) + "\n";
        ctx.metric("drop_pct_" + std::to_string(lh.first) + "." + std::to_string(lh.second),
                   drop);
    }
    write_file(ctx.out / "edit_inhibition.csv", csv);

    ctx.check("clean_mean_in_band", clean >= 0.60 && clean <= 0.80);
    double min_strong_drop = 1e9;
    for (const auto& [lh, drop] : drops) {
        if (lh == std::make_pair(7, 3)) continue;
        const std::string tag = std::to_string(lh.first) + "." + std::to_string(lh.second);
        ctx.check("drop_band_" + tag, drop >= 3.0 && drop <= 18.0);
        min_strong_drop = std::min(min_strong_drop, drop);
    }
    if (drops.count({7, 3}))
        ctx.check("weak_head_7.3_smaller_drop", drops.at({7, 3}) < min_strong_drop);
}

// --- keep-only ---------------------------------------------------------------

void recipe_keep_only(RecipeContext& ctx) {
    const auto& cfg = ctx.cfg;
    compose::ChannelCache cache(ctx.view());
    const ChannelSet channels = resolve_channels(cache, cfg);
    const auto dataset =
        tasks::gen_ioi(*ctx.assets.tokenizer, cfg.ioi_count_per_order, cfg.seed);

    const double clean = mean_inhibition(ctx.view(), dataset, cfg.mover_layer, cfg.mover_head);
    ctx.metric("clean_mean_inhibition", clean);

    // Keep only the strongest-composing components in their heads.
    std::map<std::pair<int, int>, std::set<int>> keep_top;
    for (const auto& [lh, kept] : channels.keep_top_sets)
        if (!kept.empty()) keep_top[lh] = kept;
    const edit::EditedModel top_model = edit::keep_only(*ctx.assets.model, keep_top);
    const double keep_top_score =
        mean_inhibition(top_model.view(), dataset, cfg.mover_layer, cfg.mover_head);
    ctx.metric("keep_top_mean_inhibition", keep_top_score);

    // Keep only the 0th component of every inhibition head.
    std::map<std::pair<int, int>, std::set<int>> keep_zero;
    for (const auto& [l, h] : cfg.inhibition_heads) keep_zero[{l, h}] = {0};
    const edit::EditedModel zero_model = edit::keep_only(*ctx.assets.model, keep_zero);
    const double keep_zero_score =
        mean_inhibition(zero_model.view(), dataset, cfg.mover_layer, cfg.mover_head);
    ctx.metric("keep_0th_mean_inhibition", keep_zero_score);

    std::string csv = "variant,mean_inhibition\n";
    csv += "clean," + std::to_string(clean) + "\n";
    csv += "keep_top," + std::to_string(keep_top_score) + "\n";
    csv += "keep_0th," + std::to_string(keep_zero_score) + "\n";
    write_file(ctx.out / "keep_only.csv", csv);

    ctx.check("keep_top_band", keep_top_score >= 0.20 && keep_top_score <= 0.40);
    ctx.check("keep_0th_band", keep_zero_score >= -0.01 && keep_zero_score <= 0.09);
}

// --- ioi-sweep ----------------------------------------------------------------

void recipe_ioi_sweep(RecipeContext& ctx) {
    const auto& cfg = ctx.cfg;
    compose::ChannelCache cache(ctx.view());
    const ChannelSet channels = resolve_channels(cache, cfg);
    auto dataset = tasks::gen_ioi(*ctx.assets.tokenizer, cfg.ioi_count_per_order, cfg.seed);
    if (cfg.preset != "full" &&
        static_cast<int>(dataset.size()) > cfg.sweep_examples())
        dataset.resize(static_cast<size_t>(cfg.sweep_examples()));

    // The channel component: 8.10's top-1 (positional signal example).
    compose::ComponentRef channel = channels.top1.count({8, 10})
                                        ? channels.top1.at({8, 10})
                                        : channels.traversal.at(0);

    interv::ScaleSweep sweep;
    sweep.component = channel;
    sweep.alphas = alpha_axis(cfg);
    sweep.dataset_id = "ioi-seed" + std::to_string(cfg.seed);
    const auto curve = interv::run_scale_sweep(cache, sweep, dataset,
                                               {cfg.mover_layer, cfg.mover_head});
    write_file(ctx.out / ("sweep_" + channel.str() + ".csv"), csv_sweep(curve));

    // Control: a non-channel component from a layer-8 head outside the
    // inhibition set, chosen by seed.
    std::mt19937_64 rng(cfg.seed + 17);
    std::vector<int> control_heads;
    for (int h = 0; h < ctx.assets.config.n_heads_per_layer; ++h) {
        bool inhib = false;
        for (const auto& [il, ih] : cfg.inhibition_heads)
            if (il == 8 && ih == h) inhib = true;
        if (!inhib) control_heads.push_back(h);
    }
    const int ctrl_head =
        control_heads[std::uniform_int_distribution<size_t>(0, control_heads.size() - 1)(rng)];
    // Avoid outlier components of the control head: use a mid-spectrum index.
    const int ctrl_index = std::uniform_int_distribution<int>(20, 40)(rng);
    interv::ScaleSweep control = sweep;
    control.component = {8, ctrl_head, ctrl_index};
    const auto control_curve = interv::run_scale_sweep(cache, control, dataset,
                                                       {cfg.mover_layer, cfg.mover_head});
    write_file(ctx.out / ("sweep_control_" + control.component.str() + ".csv"),
               csv_sweep(control_curve));

    const bool channel_cross = interv::crossover_signature(curve);
    const bool control_cross = interv::crossover_signature(control_curve);
    ctx.metric("channel_crossover", channel_cross ? 1 : 0);
    ctx.metric("control_crossover", control_cross ? 1 : 0);
    ctx.check("channel_shows_crossover", channel_cross);
    ctx.check("control_no_crossover", !control_cross);
}

// --- duplicate-add -------------------------------------------------------------

void recipe_duplicate_add(RecipeContext& ctx) {
    const auto& cfg = ctx.cfg;
    compose::ChannelCache cache(ctx.view());
    auto dataset = tasks::gen_ioi(*ctx.assets.tokenizer, cfg.ioi_count_per_order, cfg.seed);
    if (cfg.preset != "full" &&
        static_cast<int>(dataset.size()) > cfg.sweep_examples())
        dataset.resize(static_cast<size_t>(cfg.sweep_examples()));

    // Duplicate-channel components: the two strongest value-composers of the
    // duplicate head against the inhibition channel component of 7.9.
    const compose::CompositionReport inhib_rep = compose::component_scores(
        cache.model(), 7, 9, cfg.mover_layer, cfg.mover_head,
        compose::CompositionKind::Query);
    const compose::ComponentRef inhib_comp{7, 9, inhib_rep.top_component()};
    const compose::CompositionReport rep = compose::component_scores_vs_component(
        cache.model(), cfg.duplicate_layer, cfg.duplicate_head, inhib_comp);
    std::vector<int> order(rep.component_scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return rep.component_scores[static_cast<size_t>(a)] >
               rep.component_scores[static_cast<size_t>(b)];
    });
    std::vector<compose::ComponentRef> comps = {
        {cfg.duplicate_layer, cfg.duplicate_head, order[0]},
        {cfg.duplicate_layer, cfg.duplicate_head, order[1]}};
    ctx.metric("duplicate_component_a", order[0]);
    ctx.metric("duplicate_component_b", order[1]);

    const auto curve = interv::run_duplicate_add_sweep(
        cache, comps, alpha_axis(cfg), dataset, cfg.inhibition_boundary_layer,
        {cfg.mover_layer, cfg.mover_head});
    std::string csv = "alpha,mean_inhibition_at_io,mean_inhibition_at_s1\n";
    for (const auto& p : curve)
        csv += std::to_string(p.alpha) + "," + std::to_string(p.mean_inhibition_at_io) + "," +
               std::to_string(p.mean_inhibition_at_s1) + "\n";
    write_file(ctx.out / "duplicate_add.csv", csv);

    // Mean effect of positive alpha relative to zero, per insertion role.
    double base_io = 0, base_s1 = 0, pos_io = 0, pos_s1 = 0;
    int n_pos = 0;
    for (const auto& p : curve) {
        if (std::abs(p.alpha) < 1e-6f) {
            base_io = p.mean_inhibition_at_io;
            base_s1 = p.mean_inhibition_at_s1;
        }
    }
    for (const auto& p : curve) {
        if (p.alpha > 1e-6f) {
            pos_io += p.mean_inhibition_at_io - base_io;
            pos_s1 += p.mean_inhibition_at_s1 - base_s1;
            ++n_pos;
        }
    }
    pos_io /= std::max(1, n_pos);
    pos_s1 /= std::max(1, n_pos);
    ctx.metric("positive_alpha_effect_at_io", pos_io);
    ctx.metric("positive_alpha_effect_at_s1", pos_s1);
    ctx.check("opposite_directions", pos_io * pos_s1 < 0);
}

// --- subspace-patch -------------------------------------------------------------

void recipe_subspace_patch(RecipeContext& ctx) {
    const auto& cfg = ctx.cfg;
    compose::ChannelCache cache(ctx.view());
    const ChannelSet channels = resolve_channels(cache, cfg);
    const auto dataset =
        tasks::gen_ioi(*ctx.assets.tokenizer, cfg.ioi_count_per_order, cfg.seed);

    const interv::PatchAggregate agg =
        interv::run_subspace_patching(cache, channels.traversal, dataset);
    ctx.metric("mean_fldd_pct", agg.mean_fldd);
    ctx.metric("interchange_accuracy", agg.interchange_accuracy);
    ctx.metric("n_valid", agg.n_valid);
    ctx.metric("n_excluded", agg.n_excluded);

    std::string csv = "metric,value\n";
    csv += "mean_fldd_pct," + std::to_string(agg.mean_fldd) + "\n";
    csv += "interchange_accuracy," + std::to_string(agg.interchange_accuracy) + "\n";
    write_file(ctx.out / "subspace_patch.csv", csv);

    ctx.check("fldd_band", agg.mean_fldd >= 92.5 && agg.mean_fldd <= 102.5);
    ctx.check("interchange_band",
              agg.interchange_accuracy >= 0.25 && agg.interchange_accuracy <= 0.45);
}

// --- ll-baseline ----------------------------------------------------------------

void recipe_ll_baseline(RecipeContext& ctx) {
    const auto& cfg = ctx.cfg;
    std::string csv = "N,accuracy,n_examples\n";
    std::vector<double> accs;
    for (int n = cfg.ll_n_min; n <= cfg.ll_n_max; ++n) {
        const auto data =
            tasks::gen_laundry(*ctx.assets.tokenizer, n, cfg.ll_count, cfg.seed + n);
        const double acc = tasks::task_accuracy(ctx.view(), data);
        accs.push_back(acc);
        csv += std::to_string(n) + "," + std::to_string(acc) + "," +
               std::to_string(data.size()) + "\n";
        ctx.metric("accuracy_n" + std::to_string(n), acc);
    }
    write_file(ctx.out / "ll_baseline.csv", csv);

    // Spearman of accuracy against N (expected negative).
    std::vector<size_t> order(accs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return accs[a] < accs[b]; });
    std::vector<double> rank(accs.size());
    for (size_t i = 0; i < order.size(); ++i) rank[order[i]] = static_cast<double>(i) + 1;
    const double mean_rank = (static_cast<double>(accs.size()) + 1) / 2;
    double num = 0, dx = 0, dy = 0;
    for (size_t i = 0; i < accs.size(); ++i) {
        const double a = static_cast<double>(i) + 1 - mean_rank;
        const double b = rank[i] - mean_rank;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    const double rho = (dx > 0 && dy > 0) ? num / std::sqrt(dx * dy) : 0.0;
    ctx.metric("spearman_accuracy_vs_n", rho);

    if (cfg.ll_n_min <= 3 && cfg.ll_n_max >= 3) {
        const double acc3 = ctx.manifest.metrics.at("accuracy_n3");
        ctx.check("n3_accuracy_band", acc3 >= 0.56 && acc3 <= 0.72);
    }
    ctx.check("accuracy_decreases_with_n", rho < 0);
}

// --- ll-traverse -----------------------------------------------------------------

void recipe_ll_traverse(RecipeContext& ctx) {
    const auto& cfg = ctx.cfg;
    compose::ChannelCache cache(ctx.view());
    const ChannelSet channels = resolve_channels(cache, cfg);
    const int n = cfg.ll_single_n;
    const int count = cfg.preset == "full" ? cfg.ll_count : cfg.ll_calibration_count;
    const auto data = tasks::gen_laundry(*ctx.assets.tokenizer, n, count, cfg.seed + n);
    const auto grid = interv::grid_3d(cfg.alpha_lo, cfg.alpha_hi, cfg.step());
    const auto records =
        interv::traverse_grid(cache, channels.traversal, grid, data,
                              {cfg.mover_layer, cfg.mover_head});
    write_file(ctx.out / ("traversal_n" + std::to_string(n) + ".csv"),
               csv_traversal(records, n));

    // Fraction of grid points whose modal attended index sits in a contiguous
    // dominant region: summarized as per-index point counts.
    std::vector<int> counts(static_cast<size_t>(n), 0);
    for (const auto& r : records) counts[static_cast<size_t>(r.modal_attended)] += 1;
    for (int i = 0; i < n; ++i)
        ctx.metric("points_modal_index_" + std::to_string(i), counts[static_cast<size_t>(i)]);
    ctx.metric("grid_points", static_cast<double>(records.size()));
}

// --- ll-steer --------------------------------------------------------------------

void recipe_ll_steer(RecipeContext& ctx) {
    const auto& cfg = ctx.cfg;
    compose::ChannelCache cache(ctx.view());
    const ChannelSet channels = resolve_channels(cache, cfg);
    const auto grid = interv::grid_3d(cfg.alpha_lo, cfg.alpha_hi, cfg.step());

    std::string csv = "N,clean_accuracy,steered_accuracy,n_calibration,n_eval\n";
    bool steer_ge_clean = true;
    for (int n = cfg.ll_n_min; n <= cfg.ll_n_max; ++n) {
        const auto calib = tasks::gen_laundry(*ctx.assets.tokenizer, n,
                                              cfg.ll_calibration_count, cfg.seed + 1000 + n);
        const auto eval = tasks::gen_laundry(*ctx.assets.tokenizer, n, cfg.ll_eval_count,
                                             cfg.seed + 2000 + n);
        const auto traversal = interv::traverse_grid(cache, channels.traversal, grid, calib,
                                                     {cfg.mover_layer, cfg.mover_head});
        const interv::RegionMap map = interv::build_region_map(
            traversal, n, interv::Objective::Accuracy, cfg.seed + 1000 + n);
        write_file(ctx.out / ("region_map_n" + std::to_string(n) + ".json"), map.to_json());

        const double clean = tasks::task_accuracy(ctx.view(), eval);
        const double steered = interv::apply_region_map(cache, map, channels.traversal, eval);
        csv += std::to_string(n) + "," + std::to_string(clean) + "," + std::to_string(steered) +
               "," + std::to_string(calib.size()) + "," + std::to_string(eval.size()) + "\n";
        ctx.metric("clean_n" + std::to_string(n), clean);
        ctx.metric("steered_n" + std::to_string(n), steered);
        if (n <= 8 && steered < clean) steer_ge_clean = false;
    }
    write_file(ctx.out / "ll_steer.csv", csv);

    if (ctx.manifest.metrics.count("steered_n3"))
        ctx.check("steered_n3_ge_80", ctx.manifest.metrics.at("steered_n3") >= 0.80);
    if (ctx.manifest.metrics.count("steered_n8"))
        ctx.check("steered_n8_ge_45", ctx.manifest.metrics.at("steered_n8") >= 0.45);
    ctx.check("steered_ge_clean_up_to_n8", steer_ge_clean);
}

// --- duplicate-separability ---------------------------------------------------------

void recipe_duplicate_separability(RecipeContext& ctx) {
    const auto& cfg = ctx.cfg;
    compose::ChannelCache cache(ctx.view());

    const compose::CompositionReport inhib_rep = compose::component_scores(
        cache.model(), 7, 9, cfg.mover_layer, cfg.mover_head,
        compose::CompositionKind::Query);
    const compose::ComponentRef inhib_comp{7, 9, inhib_rep.top_component()};
    const compose::CompositionReport rep = compose::component_scores_vs_component(
        cache.model(), cfg.duplicate_layer, cfg.duplicate_head, inhib_comp);
    std::vector<int> order(rep.component_scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return rep.component_scores[static_cast<size_t>(a)] >
               rep.component_scores[static_cast<size_t>(b)];
    });
    const compose::SvdFactors& f =
        cache.factors(compose::MatrixKind::OV, cfg.duplicate_layer, cfg.duplicate_head);
    const RowVectorF w1 = compose::write_direction(f, order[0]);
    const RowVectorF w2 = compose::write_direction(f, order[1]);

    const auto seqs = tasks::gen_duplicate_seqs(*ctx.assets.tokenizer, cfg.dup_length,
                                                cfg.dup_n_duplicates, cfg.dup_count, cfg.seed);

    // Project the duplicate head's output at copy positions and at an equal
    // number of unduplicated positions onto the channel plane.
    std::vector<std::vector<std::pair<Eigen::Vector2f, bool>>> per_seq(seqs.size());
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < static_cast<long long>(seqs.size()); ++i) {
        const auto& ex = seqs[static_cast<size_t>(i)];
        const runtime::PrefixRun run(ctx.view(), ex.ids, cfg.duplicate_layer);
        const auto& cfg_model = ctx.assets.config;
        const int dh = cfg_model.d_head;
        const auto v = run.values(cfg.duplicate_layer)
                           .middleCols(cfg.duplicate_head * dh, dh);
        const MatrixF z = run.pattern(cfg.duplicate_layer, cfg.duplicate_head) * v;
        const MatrixF outs =
            z * ctx.view().layer(cfg.duplicate_layer)
                    .out_weight.middleRows(cfg.duplicate_head * dh, dh);

        std::set<int> copy_positions, source_positions;
        for (const auto& [s, d] : ex.duplicate_pairs) {
            copy_positions.insert(d);
            source_positions.insert(s);
        }
        std::mt19937_64 rng(cfg.seed * 7919 + static_cast<uint64_t>(i));
        std::vector<int> clean_positions;
        for (int p = 1; p < static_cast<int>(ex.ids.size()); ++p)
            if (copy_positions.count(p) == 0 && source_positions.count(p) == 0)
                clean_positions.push_back(p);
        std::shuffle(clean_positions.begin(), clean_positions.end(), rng);
        clean_positions.resize(
            std::min(clean_positions.size(), copy_positions.size()));

        auto& points = per_seq[static_cast<size_t>(i)];
        for (int p : copy_positions)
            points.push_back({{outs.row(p).dot(w1), outs.row(p).dot(w2)}, true});
        for (int p : clean_positions)
            points.push_back({{outs.row(p).dot(w1), outs.row(p).dot(w2)}, false});
    }
    std::vector<std::pair<Eigen::Vector2f, bool>> points;
    for (const auto& seq_points : per_seq)
        points.insert(points.end(), seq_points.begin(), seq_points.end());

    const tasks::SeparabilityResult sep = tasks::separability(points);
    ctx.metric("holdout_accuracy", sep.holdout_accuracy);
    ctx.metric("majority_baseline", sep.majority_baseline);
    ctx.metric("separator_angle_deg", sep.angle_degrees);
    ctx.metric("n_points", static_cast<double>(points.size()));
    ctx.metric("frozen_threshold", cfg.separability_frozen_threshold);

    ctx.check("beats_majority_by_20pts",
              sep.holdout_accuracy >= sep.majority_baseline + 0.20);
    if (cfg.separability_frozen_threshold > 0)
        ctx.check("meets_frozen_threshold",
                  sep.holdout_accuracy >= cfg.separability_frozen_threshold);
}

const std::map<std::string, RecipeFn>& recipes() {
    static const std::map<std::string, RecipeFn> table = {
        {"compose-scan", recipe_compose_scan},
        {"edit-inhibition", recipe_edit_inhibition},
        {"keep-only", recipe_keep_only},
        {"ioi-sweep", recipe_ioi_sweep},
        {"duplicate-add", recipe_duplicate_add},
        {"subspace-patch", recipe_subspace_patch},
        {"ll-baseline", recipe_ll_baseline},
        {"ll-traverse", recipe_ll_traverse},
        {"ll-steer", recipe_ll_steer},
        {"duplicate-separability", recipe_duplicate_separability},
    };
    return table;
}

}  // namespace

const std::vector<std::string>& recipe_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> v;
        for (const auto& [name, fn] : recipes()) v.push_back(name);
        return v;
    }();
    return names;
}

int run_recipe(const ExperimentConfig& cfg) {
    const auto it = recipes().find(cfg.experiment);
    if (it == recipes().end()) {
        std::string msg = "unknown recipe '" + cfg.experiment + "'; valid recipes:";
        for (const auto& n : recipe_names()) msg += " " + n;
        throw Error(msg);
    }

    const auto t0 = std::chrono::steady_clock::now();
    RecipeContext ctx{cfg, load_assets(cfg), fs::path(cfg.out_dir) / cfg.experiment, {}};
    fs::create_directories(ctx.out);
    ctx.manifest.experiment = cfg.experiment;
    ctx.manifest.config_json = cfg.to_json();
    ctx.manifest.checkpoint_sha256 = ctx.assets.checkpoint_sha256;

    it->second(ctx);

    ctx.manifest.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ctx.manifest.write_atomic(ctx.out);
    if (cfg.assert_criteria && !ctx.manifest.all_passed) return kAssertionFailed;
    return kOk;
}

std::string report(const std::vector<fs::path>& run_dirs, std::string* csv_out) {
    std::ostringstream text;
    std::ostringstream csv;
    csv << "experiment,metric,value,assertion,passed\n";
    text << "experiment              metric                                value      pass\n";
    text << "--------------------------------------------------------------------------\n";
    for (const fs::path& dir : run_dirs) {
        const RunManifest m = RunManifest::read(dir);
        for (const auto& [k, v] : m.metrics) {
            csv << m.experiment << "," << k << "," << v << ",,\n";
            text << m.experiment;
            for (size_t i = m.experiment.size(); i < 24; ++i) text << ' ';
            text << k;
            for (size_t i = k.size(); i < 38; ++i) text << ' ';
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%-10.4f", v);
            text << buf << "\n";
        }
        for (const auto& [k, ok] : m.assertions) {
            csv << m.experiment << "," << "" << ",," << k << "," << (ok ? "1" : "0") << "\n";
            text << m.experiment;
            for (size_t i = m.experiment.size(); i < 24; ++i) text << ' ';
            text << k;
            for (size_t i = k.size(); i < 38; ++i) text << ' ';
            text << (ok ? "PASS" : "FAIL") << "\n";
        }
    }
    if (csv_out != nullptr) *csv_out = csv.str();
    return text.str();
}

}  // namespace hc::harness
