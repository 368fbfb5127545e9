#include "doctest.h"

#include "comln/memory.hpp"
#include "comln/oracles.hpp"
#include "helpers.hpp"

using namespace comln;
using testutil::random_matrix;
using testutil::random_set;

namespace {

SolverConfig tight(double rtol = 1e-10, double atol = 1e-12) {
    SolverConfig s;
    s.rtol = rtol;
    s.atol = atol;
    return s;
}

Vector vec(const Matrix& A) {
    Vector v(A.size());
    for (Eigen::Index a = 0; a < A.rows(); ++a)
        for (Eigen::Index k = 0; k < A.cols(); ++k)
            v(a * A.cols() + k) = A(a, k);
    return v;
}

Episode episode_from(EmbeddedSet train, EmbeddedSet test, std::size_t N) {
    Episode ep{std::move(train), std::move(test), N, 0, 0};
    ep.shots = ep.train.size() / N;
    ep.test_shots = ep.test.size() / N;
    return ep;
}

} // namespace

TEST_CASE("unroll tape") {
    std::mt19937_64 rng(41);
    const EmbeddedSet train = random_set(6, 3, 4, rng);
    const Matrix W0 = random_matrix(3, 4, rng);
    for (std::size_t K : {0u, 1u, 7u}) {
        const UnrollTape tape = unroll(W0, train, {0.2}, 0.05, K);
        CHECK(tape.iterates.size() == K + 1);
        CHECK(tape.steps() == K);
        CHECK(tape.W(0) == W0);
        for (std::size_t k = 0; k < K; ++k) {
            const Matrix expect = tape.W(k) - 0.05 * inner_grad(tape.W(k), W0, train, {0.2}).grad;
            CHECK(tape.W(k + 1) == expect);
        }
    }
    CHECK(testutil::max_abs(unroll(W0, train, {}, 0.05, 7).W(7) - testutil::plain_descent(W0, W0, train, 0.0, 0.05, 7)) <=
          1e-13);
    CHECK_THROWS_AS(unroll(W0, train, {}, 0.0, 3), OracleError);
}

TEST_CASE("backpropagation through descent") {
    std::mt19937_64 rng(42);
    const std::size_t N = 3, d = 4;
    const EmbeddedSet train = random_set(6, N, d, rng), test = random_set(9, N, d, rng);
    const Matrix W0 = random_matrix(3, 4, rng, 0.5);

    SUBCASE("no steps") {
        const MetaGradients g = bptt_embedded(W0, train, test, {}, 0.1, 0);
        CHECK(testutil::max_abs(g.grad_W0 - outer_partials(W0, test).V) == 0.0);
        CHECK(g.grad_phi_train.norm() == 0.0);
    }
    SUBCASE("one step by hand and by differences") {
        const double alpha = 0.3;
        const MetaGradients g = bptt_embedded(W0, train, test, {}, alpha, 1);
        const Matrix W1 = testutil::plain_descent(W0, W0, train, 0.0, alpha, 1);
        const Matrix V = outer_partials(W1, test).V;
        const Matrix H = dense_hessian(curvature(W0, train), train.features, 0.0);
        const Vector hand = (Matrix::Identity(12, 12) - alpha * H).transpose() * vec(V);
        CHECK((vec(g.grad_W0) - hand).cwiseAbs().maxCoeff() <= 1e-13);

        Matrix fd(3, 4);
        const double eps = 1e-5;
        for (Eigen::Index r = 0; r < 3; ++r)
            for (Eigen::Index c = 0; c < 4; ++c) {
                Matrix p = W0, m = W0;
                p(r, c) += eps;
                m(r, c) -= eps;
                fd(r, c) = (cross_entropy(testutil::plain_descent(p, p, train, 0.0, alpha, 1), test) -
                            cross_entropy(testutil::plain_descent(m, m, train, 0.0, alpha, 1), test)) /
                           (2 * eps);
            }
        CHECK(testutil::rel_err(g.grad_W0, fd) <= 1e-6);
    }
    SUBCASE("train embeddings by differences, with lambda") {
        const double alpha = 0.1, eps = 1e-5;
        const std::size_t K = 5;
        const MetaGradients g = bptt_embedded(W0, train, test, {0.3}, alpha, K);
        Matrix fd(6, 4);
        for (Eigen::Index r = 0; r < 6; ++r)
            for (Eigen::Index c = 0; c < 4; ++c) {
                EmbeddedSet p = train, m = train;
                p.features(r, c) += eps;
                m.features(r, c) -= eps;
                fd(r, c) = (cross_entropy(testutil::plain_descent(W0, W0, p, 0.3, alpha, K), test) -
                            cross_entropy(testutil::plain_descent(W0, W0, m, 0.3, alpha, K), test)) /
                           (2 * eps);
            }
        CHECK(testutil::rel_err(g.grad_phi_train, fd) <= 1e-6);
    }
    SUBCASE("ten steps against the euler run") {
        const Episode ep = episode_from(train, test, N);
        MetaParams meta{W0, EmbeddingParams{d, {}}, std::log(0.1)};
        SolverConfig e;
        e.method = Method::euler;
        e.fixed_step = 0.01;
        const MetaGradients a = bptt_metagrads(meta, ep, {}, 0.01, 10);
        const MetaGradients b = task_metagrads(meta, ep, {}, e);
        for (const auto& c : compare_metagrads(a, b))
            CHECK_MESSAGE(c.rel_err <= 1e-8, c.component);
    }
}

TEST_CASE("tape storage grows linearly while the augmented state does not") {
    std::mt19937_64 rng(43);
    const std::size_t N = 5, d = 64;
    const EmbeddedSet train = random_set(5, N, d, rng), test = random_set(10, N, d, rng);
    const Matrix W0 = random_matrix(5, 64, rng, 0.1);
    SolverConfig e;
    e.method = Method::euler;
    e.fixed_step = 0.01;
    std::vector<double> bptt, comln;
    for (std::size_t K : {1u, 10u, 100u, 1000u}) {
        {
            PeakScope scope;
            bptt_embedded(W0, train, test, {}, 0.01, K);
            bptt.push_back(static_cast<double>(scope.peak_bytes()));
        }
        {
            PeakScope scope;
            embedded_metagrads(W0, std::log(0.01 * static_cast<double>(K)), train, test, {}, e);
            comln.push_back(static_cast<double>(scope.peak_bytes()));
        }
    }
    for (double b : comln)
        CHECK(b == comln.front());
    const double unit = static_cast<double>(N * d * 8);
    for (std::size_t i = 1; i < bptt.size(); ++i)
        CHECK(bptt[i] > bptt[i - 1]);
    const double slope = (bptt[3] - bptt[2]) / 900.0;
    CHECK(slope >= unit);
    CHECK(slope <= 1.5 * unit);
    const double slope_lo = (bptt[2] - bptt[1]) / 90.0;
    CHECK(slope_lo == doctest::Approx(slope).epsilon(0.05));
}

TEST_CASE("dense forward sensitivity") {
    std::mt19937_64 rng(44);
    SUBCASE("vanishing horizon") {
        const EmbeddedSet train = random_set(3, 2, 3, rng);
        const Matrix W0 = random_matrix(2, 3, rng);
        const DenseJacobians J = naive_forward_sensitivity(W0, train, {}, 1e-12, tight());
        CHECK(testutil::max_abs(J.dW_dW0 - Matrix::Identity(6, 6)) <= 1e-10);
        for (const Matrix& D : J.dW_dphi)
            CHECK(testutil::max_abs(D) <= 1e-10);
    }
    SUBCASE("quadratic field against the matrix exponential") {
        QuadraticSpec q{Vector(3), Vector(3), 2.0};
        q.eigenvalues << 0.5, 2.0, 7.0;
        q.w0 << 1.0, -1.0, 0.5;
        const Matrix S = quadratic_sensitivity(q, tight(1e-12, 1e-14));
        const Matrix expect = testutil::expm_series(-Matrix(q.eigenvalues.asDiagonal()) * q.T);
        CHECK(testutil::max_abs(S - expect) <= 1e-8);

        // non-diagonal curvature through the generic system
        const Matrix R = random_matrix(4, 4, rng);
        const Matrix H = R * R.transpose() + 0.5 * Matrix::Identity(4, 4);
        DenseField f{4, 4, [&](const Vector& w, Vector& g, Matrix& Hw, Matrix& Gt) {
                         g = H * w;
                         Hw = H;
                         Gt = Matrix::Zero(4, 4);
                     }};
        const DenseSensitivity ds =
            integrate_dense_sensitivity(f, Vector::Ones(4), Matrix::Identity(4, 4), 0.7, tight(1e-12, 1e-14));
        CHECK(testutil::max_abs(ds.S_T - testutil::expm_series(-0.7 * H)) <= 1e-8);
        CHECK((ds.w_T - testutil::expm_series(-0.7 * H) * Vector::Ones(4)).cwiseAbs().maxCoeff() <= 1e-8);
    }
    SUBCASE("agrees with the decomposed state") {
        double worst = 0.0;
        for (int seed = 0; seed < 12; ++seed) {
            const std::size_t N = 2 + seed % 3, d = 2 + seed % 4, M = N + seed % 3;
            const EmbeddedSet train = random_set(M, N, d, rng);
            const Matrix W0 = random_matrix(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(d), rng, 0.5);
            const LossConfig cfg{seed % 2 ? 0.25 : 0.0};
            const double T = 0.3 + 0.4 * seed;
            const DenseJacobians naive = naive_forward_sensitivity(W0, train, cfg, T, tight());
            const AdaptResult r = adapt(W0, train, cfg, Horizon::from_T(T), tight(), true);
            const DenseJacobians asm_ = assemble_jacobians(W0, train.features, r.state);
            worst = std::max(worst, testutil::max_abs(naive.W_T - r.W_T));
            worst = std::max(worst, testutil::max_abs(naive.dW_dW0 - asm_.dW_dW0));
            for (std::size_t m = 0; m < M; ++m)
                worst = std::max(worst, testutil::max_abs(naive.dW_dphi[m] - asm_.dW_dphi[m]));
        }
        CHECK(worst <= 1e-6);
    }
    SUBCASE("size guard") {
        const EmbeddedSet train = random_set(5, 5, 13, rng);
        CHECK_THROWS_AS(naive_forward_sensitivity(Matrix::Zero(5, 13), train, {}, 1.0, tight()), OracleError);
    }
}

TEST_CASE("finite differences") {
    std::mt19937_64 rng(45);
    const std::size_t N = 2, d = 3;
    const Episode ep = episode_from(random_set(4, N, d, rng), random_set(6, N, d, rng), N);
    MetaParams meta{random_matrix(2, 3, rng, 0.5), EmbeddingParams{d, {}}, std::log(1e-12)};

    SUBCASE("no adaptation") {
        const MetaGradients fd = finite_diff_metagrads(meta, ep, {}, tight(), 1e-5);
        const Matrix V = outer_partials(meta.W0, ep.test).V;
        CHECK(testutil::max_abs(fd.grad_W0 - V) <= 1e-9);
        CHECK(std::isfinite(fd.grad_T));
    }
    SUBCASE("central-difference order") {
        meta.log_T = 0.0;
        const MetaGradients exact = task_metagrads(meta, ep, {}, tight(1e-12, 1e-14));
        std::vector<double> err;
        for (double eps : {4e-2, 2e-2, 1e-2}) {
            const MetaGradients fd = finite_diff_metagrads(meta, ep, {}, tight(1e-12, 1e-14), eps);
            err.push_back((fd.grad_W0 - exact.grad_W0).norm() + (fd.grad_phi_train - exact.grad_phi_train).norm());
        }
        CHECK(err[0] / err[1] == doctest::Approx(4.0).epsilon(1.5 / 4.0));
        CHECK(err[1] / err[2] == doctest::Approx(4.0).epsilon(1.5 / 4.0));
    }
    SUBCASE("rejects a non-positive step") {
        CHECK_THROWS_AS(finite_diff_metagrads(meta, ep, {}, tight(), 0.0), OracleError);
    }
}

TEST_CASE("comparison helpers") {
    CHECK(relative_error(Matrix::Zero(2, 2), Matrix::Zero(2, 2)) == 0.0);
    Matrix a = Matrix::Ones(2, 2), b = a;
    b(0, 0) = 1.5;
    CHECK(relative_error(a, b) == doctest::Approx(0.5 / b.norm()));
    MetaGradients x, y;
    x.grad_W0 = y.grad_W0 = a;
    x.grad_phi_train = y.grad_phi_train = a;
    x.grad_phi_test = y.grad_phi_test = a;
    x.grad_T = 1.0;
    y.grad_T = 1.1;
    const auto cmp = compare_metagrads(x, y);
    CHECK(cmp.size() == 4);
    CHECK(cmp.back().component == "T");
    CHECK(cmp.back().rel_err == doctest::Approx(0.1 / 1.1));
}

TEST_CASE("adjoint instability demo") {
    SolverConfig s = tight(1e-6, 1e-8);
    SUBCASE("stiff quadratic") {
        QuadraticSpec q{Vector(2), Vector::Ones(2), 5.0};
        q.eigenvalues << 1.0, 10.0;
        const AdjointReport r = adjoint_instability_demo(q, s);
        CHECK(r.forward_err <= 1e-5);
        CHECK(r.backward_err >= 1e3 * r.forward_err);
        CHECK(r.ratio >= 1e3);
        CHECK(r.times.size() == 51);
        CHECK(r.forward.rows() == 51);
        CHECK(r.exact(50, 1) == doctest::Approx(std::exp(-50.0)));
        CHECK(r.exact(0, 0) == 1.0);
    }
    SUBCASE("negligible horizon") {
        QuadraticSpec q{Vector(2), Vector::Ones(2), 1e-6};
        q.eigenvalues << 1.0, 10.0;
        const AdjointReport r = adjoint_instability_demo(q, s);
        CHECK(r.forward_err <= 1e-12);
        CHECK(r.backward_err <= 1e-12);
        CHECK(r.ratio <= 10.0);
    }
    SUBCASE("isotropic, short horizon") {
        QuadraticSpec q{Vector::Ones(2), Vector::Ones(2), 0.5};
        const AdjointReport r = adjoint_instability_demo(q, s);
        CHECK(r.backward_err <= 1e-6);
    }
    SUBCASE("invalid spec") {
        QuadraticSpec q{Vector(2), Vector::Ones(2), 1.0};
        q.eigenvalues << 1.0, -1.0;
        CHECK_THROWS_AS(adjoint_instability_demo(q, s), OracleError);
    }
}
