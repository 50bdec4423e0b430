#include "hc/composition.hpp"

#include <json.hpp>

#include <Eigen/QR>
#include <Eigen/SVD>

#include <cmath>

namespace hc::compose {

using nlohmann::json;

std::string to_string(CompositionKind k) {
    switch (k) {
        case CompositionKind::Query: return "query";
        case CompositionKind::Key: return "key";
        case CompositionKind::Value: return "value";
    }
    throw Error("unreachable");
}

CompositionKind composition_kind_from_string(const std::string& s) {
    if (s == "query") return CompositionKind::Query;
    if (s == "key") return CompositionKind::Key;
    if (s == "value") return CompositionKind::Value;
    throw Error("unknown composition kind: " + s);
}

std::string ComponentRef::str() const {
    return std::to_string(layer) + "." + std::to_string(head) + "." + std::to_string(index);
}

ComponentRef ComponentRef::parse(const std::string& s) {
    ComponentRef r;
    const auto a = s.find('.');
    const auto b = s.find('.', a + 1);
    if (a == std::string::npos || b == std::string::npos)
        throw Error("component ref must be L.H.C: " + s);
    try {
        r.layer = std::stoi(s.substr(0, a));
        r.head = std::stoi(s.substr(a + 1, b - a - 1));
        r.index = std::stoi(s.substr(b + 1));
    } catch (const std::exception&) {
        throw Error("component ref must be numeric L.H.C: " + s);
    }
    return r;
}

// ---------------------------------------------------------------------------

namespace {

struct HeadSlices {
    MatrixF read_q, read_k, read_v;  // d x dh
    MatrixF write_o;                 // dh x d
    VectorF ln_gain;
};

HeadSlices slice_head(const runtime::ModelView& model, int layer, int head) {
    const auto& cfg = model.config();
    if (layer < 0 || layer >= cfg.n_layers) throw RangeError("layer out of range");
    if (head < 0 || head >= cfg.n_heads_per_layer) throw RangeError("head out of range");
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const runtime::LayerWeights& w = model.layer(layer);
    HeadSlices s;
    s.read_q = w.qkv_weight.block(0, head * dh, d, dh);
    s.read_k = w.qkv_weight.block(0, d + head * dh, d, dh);
    s.read_v = w.qkv_weight.block(0, 2 * d + head * dh, d, dh);
    s.write_o = w.out_weight.middleRows(head * dh, dh);
    s.ln_gain = w.ln1_gain;
    return s;
}

void normalize_signs(SvdFactors& f) {
    for (Eigen::Index i = 0; i < f.right.cols(); ++i) {
        Eigen::Index arg = 0;
        f.right.col(i).cwiseAbs().maxCoeff(&arg);
        if (f.right(arg, i) < 0.f) {
            f.right.col(i) = -f.right.col(i);
            f.left.col(i) = -f.left.col(i);
        }
    }
}

void flag_unstable(SvdFactors& f) {
    const auto h = static_cast<size_t>(f.sigma.size());
    f.unstable.assign(h, false);
    for (size_t i = 0; i + 1 < h; ++i) {
        const float a = f.sigma(static_cast<Eigen::Index>(i));
        const float b = f.sigma(static_cast<Eigen::Index>(i + 1));
        if (a > 0.f && (a - b) <= 1e-6f * a) {
            f.unstable[i] = true;
            f.unstable[i + 1] = true;
        }
    }
}

// Frobenius norm of (sigma * u v^T) * M without materializing the product.
double rank1_times_matrix_norm(float sigma, const VectorF& v, const MatrixF& m) {
    return static_cast<double>(sigma) * (v.transpose() * m).norm();
}

}  // namespace

HeadMatrix build_ov(const runtime::ModelView& model, int layer, int head, bool fold_ln) {
    HeadSlices s = slice_head(model, layer, head);
    HeadMatrix hm;
    hm.kind = MatrixKind::OV;
    hm.layer = layer;
    hm.head = head;
    hm.ln_folded = fold_ln;
    if (fold_ln) s.read_v.array().colwise() *= s.ln_gain.array();
    hm.rank_budget = model.config().d_head;
    hm.left_factor = std::move(s.read_v);
    hm.right_factor = std::move(s.write_o);
    hm.matrix.noalias() = hm.left_factor * hm.right_factor;
    return hm;
}

HeadMatrix build_qk(const runtime::ModelView& model, int layer, int head, bool fold_ln) {
    HeadSlices s = slice_head(model, layer, head);
    HeadMatrix hm;
    hm.kind = MatrixKind::QK;
    hm.layer = layer;
    hm.head = head;
    hm.ln_folded = fold_ln;
    if (fold_ln) {
        s.read_q.array().colwise() *= s.ln_gain.array();
        s.read_k.array().colwise() *= s.ln_gain.array();
    }
    hm.rank_budget = model.config().d_head;
    hm.left_factor = std::move(s.read_q);
    hm.right_factor = s.read_k.transpose();
    hm.matrix.noalias() = hm.left_factor * hm.right_factor;
    return hm;
}

double composition_score(const MatrixF& w1, const MatrixF& w2) {
    if (w1.cols() != w2.rows())
        throw ShapeError("composition_score: inner dimensions disagree");
    // Double accumulation: the score must be stable to 1e-9 under rescaling.
    const Eigen::MatrixXd a = w1.cast<double>();
    const Eigen::MatrixXd b = w2.cast<double>();
    const double n1 = a.norm();
    const double n2 = b.norm();
    if (n1 == 0.0 || n2 == 0.0)
        throw Error("composition score undefined for a zero matrix");
    return (a * b).norm() / (n1 * n2);
}

SvdFactors svd(const HeadMatrix& hm) {
    if (!hm.matrix.allFinite()) throw Error("head matrix contains non-finite values");
    SvdFactors f;
    if (hm.has_factors()) {
        // W = A B with A: d x h, B: h x d. QR both sides in double, then SVD
        // of the small core: W = Q1 (R1 R2^T) Q2^T. Double precision keeps
        // the factor columns orthonormal well past the stated tolerance.
        using MatrixD = Eigen::MatrixXd;
        const MatrixD a = hm.left_factor.cast<double>();
        const MatrixD bt = hm.right_factor.transpose().cast<double>();
        const auto h = a.cols();
        Eigen::HouseholderQR<MatrixD> qr1(a);
        Eigen::HouseholderQR<MatrixD> qr2(bt);
        const MatrixD q1 = qr1.householderQ() * MatrixD::Identity(a.rows(), h);
        const MatrixD q2 = qr2.householderQ() * MatrixD::Identity(bt.rows(), h);
        const MatrixD r1 = qr1.matrixQR().topRows(h).triangularView<Eigen::Upper>();
        const MatrixD r2 = qr2.matrixQR().topRows(h).triangularView<Eigen::Upper>();
        Eigen::JacobiSVD<MatrixD> core(r1 * r2.transpose(),
                                       Eigen::ComputeFullU | Eigen::ComputeFullV);
        if (core.info() != Eigen::Success)
            throw Error("SVD of factored core failed to converge");
        f.left = (q1 * core.matrixU()).cast<float>();
        f.right = (q2 * core.matrixV()).cast<float>();
        f.sigma = core.singularValues().cast<float>();
    } else {
        Eigen::BDCSVD<MatrixF> dense(hm.matrix, Eigen::ComputeThinU | Eigen::ComputeThinV);
        if (dense.info() != Eigen::Success)
            throw Error("dense SVD failed to converge");
        const auto keep = hm.rank_budget > 0
                              ? std::min<Eigen::Index>(hm.rank_budget, dense.singularValues().size())
                              : dense.singularValues().size();
        f.left = dense.matrixU().leftCols(keep);
        f.right = dense.matrixV().leftCols(keep);
        f.sigma = dense.singularValues().head(keep);
    }
    normalize_signs(f);
    flag_unstable(f);
    return f;
}

MatrixF component_matrix(const SvdFactors& f, int index) {
    if (index < 0 || index >= f.sigma.size())
        throw RangeError("component index out of range: " + std::to_string(index));
    return f.sigma(index) * (f.left.col(index) * f.right.col(index).transpose());
}

RowVectorF write_direction(const SvdFactors& f, int index) {
    if (index < 0 || index >= f.sigma.size())
        throw RangeError("component index out of range: " + std::to_string(index));
    return f.right.col(index).transpose();
}

RowVectorF read_direction(const SvdFactors& f, int index) {
    if (index < 0 || index >= f.sigma.size())
        throw RangeError("component index out of range: " + std::to_string(index));
    return f.left.col(index).transpose();
}

// ---------------------------------------------------------------------------

RobustZ sigma_clipped_z(const std::vector<double>& scores, double clip) {
    std::vector<char> keep(scores.size(), 1);
    auto stats = [&] {
        double sum = 0, n = 0;
        for (size_t i = 0; i < scores.size(); ++i)
            if (keep[i]) {
                sum += scores[i];
                n += 1;
            }
        const double mean = sum / n;
        double ss = 0;
        for (size_t i = 0; i < scores.size(); ++i)
            if (keep[i]) ss += (scores[i] - mean) * (scores[i] - mean);
        return std::pair<double, double>{mean, std::sqrt(ss / n)};
    };
    auto [mean, sd] = stats();
    for (int iter = 0; iter < 32; ++iter) {
        bool changed = false;
        for (size_t i = 0; i < scores.size(); ++i) {
            const bool k = std::abs(scores[i] - mean) <= clip * sd;
            if (k != static_cast<bool>(keep[i])) {
                keep[i] = k;
                changed = true;
            }
        }
        if (!changed) break;
        std::tie(mean, sd) = stats();
    }
    RobustZ out;
    out.mean = mean;
    out.stddev = sd;
    out.z.resize(scores.size());
    for (size_t i = 0; i < scores.size(); ++i)
        out.z[i] = sd > 0 ? (scores[i] - mean) / sd : 0.0;
    return out;
}

std::vector<int> CompositionReport::outliers(double z_threshold) const {
    std::vector<int> idx;
    for (size_t i = 0; i < robust_z.size(); ++i)
        if (robust_z[i] >= z_threshold) idx.push_back(static_cast<int>(i));
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        return component_scores[static_cast<size_t>(a)] > component_scores[static_cast<size_t>(b)];
    });
    return idx;
}

int CompositionReport::top_component() const {
    int best = 0;
    for (size_t i = 1; i < component_scores.size(); ++i)
        if (component_scores[i] > component_scores[static_cast<size_t>(best)])
            best = static_cast<int>(i);
    return best;
}

std::string CompositionReport::to_json() const {
    json j;
    j["source"] = {{"layer", source.layer}, {"head", source.head}};
    j["target"] = {{"layer", target_layer}, {"head", target_head}};
    j["kind"] = to_string(kind);
    j["ln_folded"] = ln_folded;
    j["full_score"] = full_score;
    j["component_scores"] = component_scores;
    j["target"]["component"] = target_component;
    j["mean"] = mean;
    j["stddev"] = stddev;
    j["z_scores"] = z_scores;
    j["null_mean"] = null_mean;
    j["null_std"] = null_std;
    j["robust_z"] = robust_z;
    j["unstable"] = unstable;
    return j.dump(2);
}

CompositionReport CompositionReport::from_json(const std::string& text) {
    json j = json::parse(text);
    CompositionReport r;
    r.source.layer = j.at("source").at("layer").get<int>();
    r.source.head = j.at("source").at("head").get<int>();
    r.target_layer = j.at("target").at("layer").get<int>();
    r.target_head = j.at("target").at("head").get<int>();
    r.kind = composition_kind_from_string(j.at("kind").get<std::string>());
    r.ln_folded = j.at("ln_folded").get<bool>();
    r.full_score = j.at("full_score").get<double>();
    r.component_scores = j.at("component_scores").get<std::vector<double>>();
    if (j.at("target").contains("component"))
        r.target_component = j["target"]["component"].get<int>();
    r.mean = j.at("mean").get<double>();
    r.stddev = j.at("stddev").get<double>();
    r.z_scores = j.at("z_scores").get<std::vector<double>>();
    r.null_mean = j.value("null_mean", 0.0);
    r.null_std = j.value("null_std", 0.0);
    if (j.contains("robust_z")) r.robust_z = j["robust_z"].get<std::vector<double>>();
    r.unstable = j.at("unstable").get<std::vector<bool>>();
    return r;
}

namespace {

MatrixF target_matrix(const runtime::ModelView& model, int layer, int head, CompositionKind kind,
                      bool fold_ln) {
    switch (kind) {
        case CompositionKind::Query: return build_qk(model, layer, head, fold_ln).matrix;
        case CompositionKind::Key:
            return build_qk(model, layer, head, fold_ln).matrix.transpose();
        case CompositionKind::Value: return build_ov(model, layer, head, fold_ln).matrix;
    }
    throw Error("unreachable");
}

void fill_stats(CompositionReport& r) {
    const auto n = static_cast<double>(r.component_scores.size());
    double sum = 0;
    for (double s : r.component_scores) sum += s;
    r.mean = sum / n;
    double ss = 0;
    for (double s : r.component_scores) ss += (s - r.mean) * (s - r.mean);
    r.stddev = std::sqrt(ss / n);
    r.z_scores.resize(r.component_scores.size());
    for (size_t i = 0; i < r.component_scores.size(); ++i)
        r.z_scores[i] = r.stddev > 0 ? (r.component_scores[i] - r.mean) / r.stddev : 0.0;
    const RobustZ robust = sigma_clipped_z(r.component_scores);
    r.null_mean = robust.mean;
    r.null_std = robust.stddev;
    r.robust_z = robust.z;
}

}  // namespace

CompositionReport component_scores(const runtime::ModelView& model, int source_layer,
                                   int source_head, int target_layer, int target_head,
                                   CompositionKind kind, DecomposedSide side, bool fold_ln) {
    if (source_layer >= target_layer)
        throw Error("source must live in an earlier layer than the target");
    const HeadMatrix src = build_ov(model, source_layer, source_head, fold_ln);
    const MatrixF tgt = target_matrix(model, target_layer, target_head, kind, fold_ln);

    CompositionReport r;
    r.source = {source_layer, source_head, -1};
    r.target_layer = target_layer;
    r.target_head = target_head;
    r.kind = kind;
    r.ln_folded = fold_ln;
    r.full_score = composition_score(src.matrix, tgt);

    const double tgt_norm = tgt.norm();
    if (side == DecomposedSide::Source) {
        const SvdFactors f = svd(src);
        r.unstable = f.unstable;
        r.component_scores.resize(static_cast<size_t>(f.sigma.size()));
        // CS(sigma_i u_i v_i^T, M) = ||v_i^T M|| / ||M||; batch the v^T M rows.
        const MatrixF vtm = f.right.transpose() * tgt;
        for (Eigen::Index i = 0; i < f.sigma.size(); ++i) {
            if (f.sigma(i) <= 0.f)
                throw Error("component " + std::to_string(i) +
                            " has zero singular value; score undefined");
            r.component_scores[static_cast<size_t>(i)] = vtm.row(i).norm() / tgt_norm;
        }
    } else {
        HeadMatrix tgt_hm;
        switch (kind) {
            case CompositionKind::Query:
            case CompositionKind::Key: tgt_hm = build_qk(model, target_layer, target_head, fold_ln); break;
            case CompositionKind::Value: tgt_hm = build_ov(model, target_layer, target_head, fold_ln); break;
        }
        SvdFactors f = svd(tgt_hm);
        r.unstable = f.unstable;
        r.component_scores.resize(static_cast<size_t>(f.sigma.size()));
        const double src_norm = src.matrix.norm();
        // Key composition reads through the transpose: CS(OV_src, C_i^T).
        // For a rank-1 C = u v^T: ||W u|| (key) or ||W v... || handled per kind.
        for (Eigen::Index i = 0; i < f.sigma.size(); ++i) {
            VectorF read_col =
                kind == CompositionKind::Key ? VectorF(f.right.col(i)) : VectorF(f.left.col(i));
            r.component_scores[static_cast<size_t>(i)] =
                (src.matrix * read_col).norm() / src_norm;
        }
    }
    fill_stats(r);
    return r;
}

CompositionReport component_scores_vs_component(const runtime::ModelView& model,
                                                int source_layer, int source_head,
                                                const ComponentRef& target, bool fold_ln) {
    if (source_layer >= target.layer)
        throw Error("source must live in an earlier layer than the target");
    const HeadMatrix src = build_ov(model, source_layer, source_head, fold_ln);
    const SvdFactors tgt_factors =
        svd(build_ov(model, target.layer, target.head, fold_ln));
    const MatrixF cmat = component_matrix(tgt_factors, target.index);

    CompositionReport r;
    r.source = {source_layer, source_head, -1};
    r.target_layer = target.layer;
    r.target_head = target.head;
    r.target_component = target.index;
    r.kind = CompositionKind::Value;
    r.ln_folded = fold_ln;
    r.full_score = composition_score(src.matrix, cmat);

    const SvdFactors f = svd(src);
    r.unstable = f.unstable;
    r.component_scores.resize(static_cast<size_t>(f.sigma.size()));
    const double cn = cmat.cast<double>().norm();
    const MatrixF vtm = f.right.transpose() * cmat;
    for (Eigen::Index i = 0; i < f.sigma.size(); ++i)
        r.component_scores[static_cast<size_t>(i)] =
            vtm.row(i).cast<double>().norm() / cn;
    fill_stats(r);
    return r;
}

ScanZ scan_zscores(const runtime::ModelView& model, int source_layer, int source_head,
                   int target_layer, int target_head, CompositionKind kind, bool fold_ln) {
    const auto& cfg = model.config();
    if (source_layer >= target_layer)
        throw Error("source must live in an earlier layer than the target");
    const MatrixF tgt = target_matrix(model, target_layer, target_head, kind, fold_ln);
    const double tgt_norm = tgt.cast<double>().norm();

    std::vector<double> pool;
    pool.reserve(static_cast<size_t>(target_layer) * cfg.n_heads_per_layer * cfg.d_head);
    std::vector<double> source_scores;
    for (int l = 0; l < target_layer; ++l) {
        for (int h = 0; h < cfg.n_heads_per_layer; ++h) {
            const SvdFactors f = svd(build_ov(model, l, h, fold_ln));
            const MatrixF vtm = f.right.transpose() * tgt;
            for (Eigen::Index i = 0; i < f.sigma.size(); ++i) {
                const double s = vtm.row(i).cast<double>().norm() / tgt_norm;
                pool.push_back(s);
                if (l == source_layer && h == source_head) source_scores.push_back(s);
            }
        }
    }
    double sum = 0;
    for (double s : pool) sum += s;
    const double mean = sum / static_cast<double>(pool.size());
    double ss = 0;
    for (double s : pool) ss += (s - mean) * (s - mean);
    const double sd = std::sqrt(ss / static_cast<double>(pool.size()));

    ScanZ out;
    out.pool_mean = mean;
    out.pool_std = sd;
    out.pool_size = pool.size();
    out.z.resize(source_scores.size());
    for (size_t i = 0; i < source_scores.size(); ++i)
        out.z[i] = sd > 0 ? (source_scores[i] - mean) / sd : 0.0;
    return out;
}

std::vector<ScanResult> scan_channel(const runtime::ModelView& model, const ComponentRef& ref,
                                     ScanDirection direction, CompositionKind kind, bool fold_ln) {
    const auto& cfg = model.config();
    if (ref.layer < 0 || ref.layer >= cfg.n_layers) throw RangeError("component layer out of range");
    const SvdFactors f = svd(build_ov(model, ref.layer, ref.head, fold_ln));
    const MatrixF cmat = component_matrix(f, ref.index);
    const VectorF u = f.left.col(ref.index);
    const VectorF v = f.right.col(ref.index);

    std::vector<ScanResult> out;
    if (direction == ScanDirection::Upstream) {
        for (int l = 0; l < ref.layer; ++l) {
            for (int h = 0; h < cfg.n_heads_per_layer; ++h) {
                const HeadMatrix ov = build_ov(model, l, h, fold_ln);
                // CS(OV, sigma u v^T) = ||OV u|| / ||OV||.
                const double score = (ov.matrix * u).norm() / ov.matrix.norm();
                out.push_back({l, h, score});
            }
        }
    } else {
        for (int l = ref.layer + 1; l < cfg.n_layers; ++l) {
            for (int h = 0; h < cfg.n_heads_per_layer; ++h) {
                const MatrixF tgt = target_matrix(model, l, h, kind, fold_ln);
                const double score = rank1_times_matrix_norm(1.f, v, tgt) / tgt.norm();
                out.push_back({l, h, score});
            }
        }
    }
    std::sort(out.begin(), out.end(),
              [](const ScanResult& a, const ScanResult& b) { return a.score > b.score; });
    return out;
}

const SvdFactors& ChannelCache::factors(MatrixKind kind, int layer, int head, bool fold_ln) {
    const auto key = std::make_tuple(static_cast<int>(kind), layer, head, fold_ln);
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const HeadMatrix hm = kind == MatrixKind::OV ? build_ov(model_, layer, head, fold_ln)
                                                 : build_qk(model_, layer, head, fold_ln);
    return cache_.emplace(key, svd(hm)).first->second;
}

RowVectorF ChannelCache::write_dir(const ComponentRef& ref, bool fold_ln) {
    return write_direction(factors(ref, fold_ln), ref.index);
}

}  // namespace hc::compose
