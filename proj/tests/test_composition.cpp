#include "hc/composition.hpp"

#include "helpers.hpp"

#include <doctest.h>

#include <random>

using namespace hc;
using compose::ComponentRef;
using compose::HeadMatrix;
using compose::SvdFactors;

namespace {

// Test-only oracle: cyclic Jacobi eigendecomposition of the Gram matrix
// W^T W. Eigenvalues of W^T W are the squared singular values of W. Kept
// deliberately independent of the SVD implementation under test.
std::vector<double> gram_eigenvalues(const MatrixF& w, int sweeps = 12) {
    const Eigen::MatrixXd gram = (w.transpose() * w).cast<double>();
    Eigen::MatrixXd a = gram;
    const Eigen::Index n = a.rows();
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        double off = 0;
        for (Eigen::Index p = 0; p < n; ++p)
            for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-22 * a.squaredNorm()) break;
        for (Eigen::Index p = 0; p < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) eig[static_cast<size_t>(i)] = std::max(0.0, a(i, i));
    std::sort(eig.rbegin(), eig.rend());
    return eig;
}

MatrixF random_matrix(int rows, int cols, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.f, 1.f);
    MatrixF m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
}

HeadMatrix fixture(MatrixF m, int rank_budget = 0) {
    HeadMatrix hm;
    hm.kind = compose::MatrixKind::OV;
    hm.layer = 0;
    hm.head = 0;
    hm.rank_budget = rank_budget;
    hm.matrix = std::move(m);
    return hm;
}

}  // namespace

TEST_CASE("component ref string round trip") {
    const ComponentRef r{8, 6, 2};
    CHECK(r.str() == "8.6.2");
    CHECK(ComponentRef::parse("8.6.2") == r);
    CHECK_THROWS_AS(ComponentRef::parse("86"), Error);
    CHECK_THROWS_AS(ComponentRef::parse("a.b.c"), Error);
}

TEST_CASE("composition score basics") {
    const int d = 768;
    const MatrixF eye = MatrixF::Identity(d, d);
    CHECK(compose::composition_score(eye, eye) ==
          doctest::Approx(1.0 / std::sqrt(768.0)).epsilon(1e-9));

    std::mt19937_64 rng(5);
    std::normal_distribution<float> dist;
    VectorF u(16), v(16), w(16), z(16);
    for (int i = 0; i < 16; ++i) {
        u(i) = dist(rng);
        v(i) = dist(rng);
        w(i) = dist(rng);
    }
    u.normalize();
    v.normalize();
    w.normalize();
    // z orthogonal to v
    z = w - w.dot(v) * v;
    z.normalize();

    const MatrixF uv = u * v.transpose();
    const MatrixF vw = v * w.transpose();
    const MatrixF zw = z * w.transpose();
    CHECK(compose::composition_score(uv, vw) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(compose::composition_score(uv, zw) == doctest::Approx(0.0).epsilon(1e-5));

    CHECK_THROWS_AS(compose::composition_score(MatrixF::Zero(4, 4), MatrixF::Identity(4, 4)),
                    Error);
    CHECK_THROWS_AS(compose::composition_score(MatrixF::Zero(4, 5), MatrixF::Identity(4, 4)),
                    ShapeError);
}

TEST_CASE("composition score is invariant to positive rescaling") {
    const MatrixF a = random_matrix(64, 64, 1);
    const MatrixF b = random_matrix(64, 64, 2);
    const double base = compose::composition_score(a, b);
    for (const auto& [x, y] : {std::pair{3.7f, 0.002f}, {1e-3f, 1e4f}, {128.f, 0.25f}}) {
        const double scaled = compose::composition_score(x * a, y * b);
        CHECK(std::abs(scaled - base) <= 1e-9);
    }
}

TEST_CASE("svd of identity and diagonal fixtures") {
    SUBCASE("768-d identity, top-64 retained, all singular values 1") {
        const SvdFactors f = compose::svd(fixture(MatrixF::Identity(768, 768), 64));
        REQUIRE(f.sigma.size() == 64);
        CHECK(f.sigma.minCoeff() == doctest::Approx(1.f).epsilon(1e-5));
        CHECK(f.sigma.maxCoeff() == doctest::Approx(1.f).epsilon(1e-5));
    }
    SUBCASE("diagonal fixture keeps descending order and canonical signs") {
        MatrixF m = MatrixF::Zero(3, 3);
        m(0, 0) = 5.f;
        m(1, 1) = 3.f;
        const SvdFactors f = compose::svd(fixture(std::move(m)));
        REQUIRE(f.sigma.size() == 3);
        CHECK(f.sigma(0) == doctest::Approx(5.f));
        CHECK(f.sigma(1) == doctest::Approx(3.f));
        CHECK(f.sigma(2) == doctest::Approx(0.f));
        // Canonical: each right vector's largest-magnitude entry positive.
        for (int i = 0; i < 2; ++i) {
            Eigen::Index arg = 0;
            f.right.col(i).cwiseAbs().maxCoeff(&arg);
            CHECK(f.right(arg, i) > 0.f);
        }
    }
    SUBCASE("non-finite input is rejected") {
        MatrixF m = MatrixF::Zero(4, 4);
        m(1, 1) = std::numeric_limits<float>::quiet_NaN();
        CHECK_THROWS_AS(compose::svd(fixture(std::move(m))), Error);
    }
}

TEST_CASE("factored svd agrees with the Gram-matrix eigendecomposition oracle") {
    const int d = 256, h = 64;
    HeadMatrix hm;
    hm.kind = compose::MatrixKind::OV;
    hm.layer = 0;
    hm.head = 0;
    hm.rank_budget = h;
    hm.left_factor = random_matrix(d, h, 21);
    hm.right_factor = random_matrix(h, d, 22);
    hm.matrix = hm.left_factor * hm.right_factor;

    const SvdFactors f = compose::svd(hm);
    REQUIRE(f.sigma.size() == h);

    const std::vector<double> eig = gram_eigenvalues(hm.matrix);
    for (int i = 0; i < h; ++i) {
        const double oracle_sigma = std::sqrt(eig[static_cast<size_t>(i)]);
        CHECK(f.sigma(i) == doctest::Approx(oracle_sigma).epsilon(1e-4));
    }
    // Rank-h structure: remaining Gram eigenvalues are numerically zero.
    CHECK(eig[static_cast<size_t>(h)] <= 1e-6 * eig[0]);

    // Reconstruction through Eq.-style component sum.
    MatrixF sum = MatrixF::Zero(d, d);
    for (int i = 0; i < h; ++i) sum += compose::component_matrix(f, i);
    CHECK((sum - hm.matrix).norm() / hm.matrix.norm() <= 1e-4f);

    // Orthonormal columns.
    CHECK((f.left.transpose() * f.left - MatrixF::Identity(h, h)).cwiseAbs().maxCoeff() <=
          1e-5f);
    CHECK((f.right.transpose() * f.right - MatrixF::Identity(h, h)).cwiseAbs().maxCoeff() <=
          1e-5f);
}

TEST_CASE("component matrices are rank one along the write direction") {
    HeadMatrix hm;
    hm.kind = compose::MatrixKind::OV;
    hm.layer = 0;
    hm.head = 0;
    hm.rank_budget = 8;
    hm.left_factor = random_matrix(32, 8, 31);
    hm.right_factor = random_matrix(8, 32, 32);
    hm.matrix = hm.left_factor * hm.right_factor;
    const SvdFactors f = compose::svd(hm);

    const RowVectorF w = compose::write_direction(f, 0);
    CHECK(w.norm() == doctest::Approx(1.f).epsilon(1e-5));
    CHECK(compose::read_direction(f, 0).norm() == doctest::Approx(1.f).epsilon(1e-5));

    const MatrixF c0 = compose::component_matrix(f, 0);
    std::mt19937_64 rng(9);
    std::normal_distribution<float> dist;
    RowVectorF x(32);
    for (int i = 0; i < 32; ++i) x(i) = dist(rng);
    RowVectorF mapped = x * c0;
    mapped.normalize();
    CHECK(std::abs(std::abs(mapped.dot(w)) - 1.f) <= 1e-4f);

    CHECK_THROWS_AS(compose::component_matrix(f, 8), RangeError);
    CHECK_THROWS_AS(compose::write_direction(f, -1), RangeError);
}

TEST_CASE("near-degenerate singular values are flagged unstable") {
    MatrixF m = MatrixF::Zero(6, 6);
    m(0, 0) = 2.f;
    m(1, 1) = 2.f * (1.f - 5e-7f);
    m(2, 2) = 1.f;
    const SvdFactors f = compose::svd(fixture(std::move(m)));
    CHECK(f.unstable[0]);
    CHECK(f.unstable[1]);
    CHECK_FALSE(f.unstable[2]);
}

// --- model-backed checks ------------------------------------------------------

TEST_CASE("head matrices are rank-bounded products of their factors") {
    HC_REQUIRE_MODEL(assets);
    const runtime::ModelView view(*assets->model);
    const HeadMatrix ov = compose::build_ov(view, 3, 0);
    CHECK(ov.matrix.rows() == 768);
    CHECK((ov.left_factor * ov.right_factor - ov.matrix).cwiseAbs().maxCoeff() == 0.f);

    const HeadMatrix qk = compose::build_qk(view, 9, 9);
    const SvdFactors f = compose::svd(qk);
    REQUIRE(f.sigma.size() == 64);
    MatrixF sum = MatrixF::Zero(768, 768);
    for (int i = 0; i < 64; ++i) sum += compose::component_matrix(f, i);
    CHECK((sum - qk.matrix).norm() / qk.matrix.norm() <= 1e-4f);

    CHECK_THROWS_AS(compose::build_ov(view, 99, 0), RangeError);
}

TEST_CASE("fold_ln rescales the read side only") {
    HC_REQUIRE_MODEL(assets);
    const runtime::ModelView view(*assets->model);
    const HeadMatrix plain = compose::build_ov(view, 3, 0, false);
    const HeadMatrix folded = compose::build_ov(view, 3, 0, true);
    const VectorF& g = assets->model->layer(3).ln1_gain;
    const MatrixF expect = g.asDiagonal() * plain.matrix;
    CHECK((folded.matrix - expect).cwiseAbs().maxCoeff() <= 1e-5f);
}

TEST_CASE("qk bilinear form matches the runtime query/key path") {
    HC_REQUIRE_MODEL(assets);
    const runtime::ModelView view(*assets->model);
    const HeadMatrix qk = compose::build_qk(view, 9, 9);
    const auto& w = assets->model->layer(9);
    const MatrixF read_q = w.qkv_weight.block(0, 9 * 64, 768, 64);
    const MatrixF read_k = w.qkv_weight.block(0, 768 + 9 * 64, 768, 64);

    std::mt19937_64 rng(17);
    std::normal_distribution<float> dist;
    for (int trial = 0; trial < 5; ++trial) {
        RowVectorF xq(768), xk(768);
        for (int i = 0; i < 768; ++i) {
            xq(i) = dist(rng);
            xk(i) = dist(rng);
        }
        const float via_matrix = xq * qk.matrix * xk.transpose();
        const float via_path = (xq * read_q).dot(xk * read_k);
        CHECK(via_matrix == doctest::Approx(via_path).epsilon(1e-3));
    }
}

TEST_CASE("per-component scores agree with explicit composition scores") {
    HC_REQUIRE_MODEL(assets);
    const runtime::ModelView view(*assets->model);
    const auto rep = compose::component_scores(view, 8, 6, 9, 9,
                                               compose::CompositionKind::Query);
    REQUIRE(rep.component_scores.size() == 64);

    // Cross-route: the batched rank-1 path equals composition_score on the
    // materialized component matrix.
    const SvdFactors f = compose::svd(compose::build_ov(view, 8, 6));
    const MatrixF qk = compose::build_qk(view, 9, 9).matrix;
    for (int i : {0, 2, 17, 63}) {
        const double direct = compose::composition_score(compose::component_matrix(f, i), qk);
        CHECK(rep.component_scores[static_cast<size_t>(i)] ==
              doctest::Approx(direct).epsilon(1e-5));
    }

    // z-scores consistent with mean/std.
    for (int i = 0; i < 64; ++i) {
        const double z = (rep.component_scores[static_cast<size_t>(i)] - rep.mean) / rep.stddev;
        CHECK(std::abs(z - rep.z_scores[static_cast<size_t>(i)]) <= 1e-9);
    }

    CHECK_THROWS_AS(
        compose::component_scores(view, 9, 9, 8, 6, compose::CompositionKind::Query), Error);
}

TEST_CASE("report json round trip") {
    HC_REQUIRE_MODEL(assets);
    const runtime::ModelView view(*assets->model);
    const auto rep =
        compose::component_scores(view, 3, 0, 7, 9, compose::CompositionKind::Value);
    const auto back = compose::CompositionReport::from_json(rep.to_json());
    CHECK(back.component_scores == rep.component_scores);
    CHECK(back.full_score == rep.full_score);
    CHECK(back.kind == rep.kind);
}

TEST_CASE("svd determinism across repeated runs") {
    HC_REQUIRE_MODEL(assets);
    const runtime::ModelView view(*assets->model);
    const SvdFactors a = compose::svd(compose::build_ov(view, 7, 9));
    const SvdFactors b = compose::svd(compose::build_ov(view, 7, 9));
    CHECK((a.sigma - b.sigma).cwiseAbs().maxCoeff() == 0.f);
    CHECK((a.left - b.left).cwiseAbs().maxCoeff() == 0.f);
    CHECK((a.right - b.right).cwiseAbs().maxCoeff() == 0.f);
}
