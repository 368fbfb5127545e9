#include "comln/oracles.hpp"

#include <algorithm>
#include <cmath>

namespace comln {

namespace {

Matrix to_matrix(const Buffer& b, std::size_t rows, std::size_t cols) {
    Matrix out(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = b[r * cols + c];
    return out;
}

Buffer to_buffer(const Matrix& m) {
    Buffer b(static_cast<std::size_t>(m.size()));
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            b[k++] = m(r, c);
    return b;
}

Vector vec(const Matrix& m) {
    Vector v(m.size());
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            v(k++) = m(r, c);
    return v;
}

Matrix unvec(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = v(r * cols + c);
    return m;
}

} // namespace

Matrix UnrollTape::W(std::size_t k) const { return to_matrix(iterates.at(k), N, d); }
Matrix UnrollTape::R(std::size_t k) const { return to_matrix(residuals.at(k), M, N); }

UnrollTape unroll(const Matrix& W0, const EmbeddedSet& train, const LossConfig& cfg, double alpha,
                  std::size_t K) {
    if (!(alpha > 0))
        throw OracleError("unroll: alpha must be positive");
    UnrollTape tape;
    tape.N = static_cast<std::size_t>(W0.rows());
    tape.d = static_cast<std::size_t>(W0.cols());
    tape.M = train.size();
    tape.alpha = alpha;
    tape.iterates.reserve(K + 1);
    tape.residuals.reserve(K);
    Matrix W = W0;
    tape.iterates.push_back(to_buffer(W));
    for (std::size_t k = 0; k < K; ++k) {
        InnerGradient g = inner_grad(W, W0, train, cfg);
        tape.residuals.push_back(to_buffer(g.residuals));
        W -= alpha * g.grad;
        tape.iterates.push_back(to_buffer(W));
    }
    return tape;
}

MetaGradients bptt_embedded(const Matrix& W0, const EmbeddedSet& train, const EmbeddedSet& test,
                            const LossConfig& cfg, double alpha, std::size_t K, Matrix* W_K) {
    const UnrollTape tape = unroll(W0, train, cfg, alpha, K);
    const Matrix WK = tape.W(K);
    const OuterPartials outer = outer_partials(WK, test);
    const Matrix& phi = train.features;
    const auto M = phi.rows();
    const double inv_m = 1.0 / static_cast<double>(M);
    const double lambda = cfg.lambda;

    Matrix adj = outer.V;  // dL/dW_{k+1}
    Matrix gW0_direct = Matrix::Zero(W0.rows(), W0.cols());
    Matrix gphi = Matrix::Zero(M, phi.cols());
    for (std::size_t k = K; k-- > 0;) {
        const Matrix Wk = tape.W(k);
        const Matrix R = tape.R(k);
        Matrix hvp = lambda * adj;
        for (Eigen::Index m = 0; m < M; ++m) {
            const Vector p = R.row(m).transpose() + train.labels.row(m).transpose();
            const Vector u = adj * phi.row(m).transpose();
            const Vector Ju = p.cwiseProduct(u) - p * p.dot(u);
            hvp += inv_m * Ju * phi.row(m);
            gphi.row(m) -= alpha * inv_m * (adj.transpose() * R.row(m).transpose() + Wk.transpose() * Ju).transpose();
        }
        gW0_direct += alpha * lambda * adj;
        adj -= alpha * hvp;
    }

    MetaGradients g;
    g.grad_W0 = adj + gW0_direct;
    g.grad_phi_train = gphi;
    g.grad_phi_test = outer.grad_phi_test;
    const Matrix inner = inner_grad(WK, W0, train, cfg).grad;
    g.diag_alignment = (outer.V.array() * inner.array()).sum();
    g.grad_T = grad_T(outer.V, inner);
    g.grad_logT = static_cast<double>(K) * alpha * g.grad_T;
    g.outer_loss = cross_entropy(WK, test);
    g.accuracy = accuracy(WK, test);
    if (W_K)
        *W_K = WK;
    return g;
}

MetaGradients bptt_metagrads(const MetaParams& meta, const Episode& episode, const LossConfig& cfg,
                             double alpha, std::size_t K, Matrix* W_K) {
    std::vector<Tape> train_tapes, test_tapes;
    const EmbeddedSet train{embed_rows(meta.embedding, episode.train.features, &train_tapes),
                            episode.train.labels};
    const EmbeddedSet test{embed_rows(meta.embedding, episode.test.features, &test_tapes),
                           episode.test.labels};
    MetaGradients g = bptt_embedded(meta.W0, train, test, cfg, alpha, K, W_K);
    backprop_embedding(meta.embedding, train_tapes, test_tapes, g);
    return g;
}

DenseSensitivity integrate_dense_sensitivity(const DenseField& field, const Vector& w0, const Matrix& S0,
                                             double T, const SolverConfig& solver) {
    const auto n = static_cast<Eigen::Index>(field.n);
    const auto p = static_cast<Eigen::Index>(field.p);
    if (w0.size() != n || S0.rows() != n || S0.cols() != p)
        throw DimensionError("dense sensitivity: initial conditions do not match the field");
    FlatState y;
    y.add_segment("w", {field.n});
    y.add_segment("S", {field.n, field.p});
    auto vals = y.values();
    for (Eigen::Index i = 0; i < n; ++i)
        vals[static_cast<std::size_t>(i)] = w0(i);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < p; ++j)
            vals[static_cast<std::size_t>(n + i * p + j)] = S0(i, j);

    RhsFunction rhs = [&](double, std::span<const double> s, std::span<double> ds) {
        Vector w(n);
        for (Eigen::Index i = 0; i < n; ++i)
            w(i) = s[static_cast<std::size_t>(i)];
        Matrix S(n, p);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < p; ++j)
                S(i, j) = s[static_cast<std::size_t>(n + i * p + j)];
        Vector g(n);
        Matrix H(n, n), Gt(n, p);
        field.eval(w, g, H, Gt);
        const Matrix dS = -(H * S) - Gt;
        for (Eigen::Index i = 0; i < n; ++i)
            ds[static_cast<std::size_t>(i)] = -g(i);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < p; ++j)
                ds[static_cast<std::size_t>(n + i * p + j)] = dS(i, j);
    };
    IntegrationResult res = integrate(rhs, y, 0.0, T, solver);
    DenseSensitivity out;
    out.w_T.resize(n);
    out.S_T.resize(n, p);
    const auto v = res.state.values();
    for (Eigen::Index i = 0; i < n; ++i)
        out.w_T(i) = v[static_cast<std::size_t>(i)];
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < p; ++j)
            out.S_T(i, j) = v[static_cast<std::size_t>(n + i * p + j)];
    out.stats = res.stats;
    return out;
}

DenseJacobians naive_forward_sensitivity(const Matrix& W0, const EmbeddedSet& train,
                                         const LossConfig& cfg, double T, const SolverConfig& solver) {
    const Eigen::Index N = W0.rows(), d = W0.cols(), M = train.features.rows();
    if (static_cast<std::size_t>(N * d) > kDenseOracleLimit)
        throw OracleError("naive forward sensitivity is limited to N * d <= " +
                          std::to_string(kDenseOracleLimit));
    if (train.features.cols() != d || train.labels.cols() != N)
        throw DimensionError("naive forward sensitivity: dimensions disagree");
    const Eigen::Index n = N * d, p = N * d + M * d;
    const double lambda = cfg.lambda;
    const double inv_m = 1.0 / static_cast<double>(M);

    DenseField field;
    field.n = static_cast<std::size_t>(n);
    field.p = static_cast<std::size_t>(p);
    field.eval = [&](const Vector& w, Vector& g, Matrix& H, Matrix& Gt) {
        const Matrix W = unvec(w, N, d);
        const InnerGradient ig = inner_grad(W, W0, train, cfg);
        g = vec(ig.grad);
        H = dense_hessian(curvature(W, train), train.features, lambda);
        Gt.setZero(n, p);
        // d g / d W0 = -lambda I
        for (Eigen::Index i = 0; i < n; ++i)
            Gt(i, i) = -lambda;
        // d g[a,k] / d phi_m[l] = ((J_m W)[a,l] phi_m[k] + r_m[a] delta_kl) / M
        for (Eigen::Index m = 0; m < M; ++m) {
            const Vector r = ig.residuals.row(m).transpose();
            const Vector pm = r + train.labels.row(m).transpose();
            const Matrix J = Matrix(pm.asDiagonal()) - pm * pm.transpose();
            const Matrix JW = J * W;
            for (Eigen::Index a = 0; a < N; ++a)
                for (Eigen::Index k = 0; k < d; ++k)
                    for (Eigen::Index l = 0; l < d; ++l)
                        Gt(a * d + k, n + m * d + l) =
                            inv_m * (JW(a, l) * train.features(m, k) + (k == l ? r(a) : 0.0));
        }
    };
    Matrix S0 = Matrix::Zero(n, p);
    S0.leftCols(n).setIdentity();
    const DenseSensitivity ds = integrate_dense_sensitivity(field, vec(W0), S0, T, solver);

    DenseJacobians out;
    out.W_T = unvec(ds.w_T, N, d);
    out.dW_dW0 = ds.S_T.leftCols(n);
    for (Eigen::Index m = 0; m < M; ++m)
        out.dW_dphi.push_back(ds.S_T.block(0, n + m * d, n, d));
    return out;
}

DenseJacobians assemble_jacobians(const Matrix& W0, const Matrix& phi, const AugmentedState& state) {
    const Eigen::Index N = W0.rows(), d = W0.cols(), M = phi.rows();
    if (static_cast<std::size_t>(M) != state.examples() || static_cast<std::size_t>(N) != state.ways() ||
        phi.cols() != d || !state.tracks_sensitivities())
        throw DimensionError("assemble_jacobians: dimensions disagree");
    const auto uM = static_cast<std::size_t>(M);
    const Eigen::Index n = N * d;

    DenseJacobians out;
    out.W_T = reconstruct_W(W0, state.s_matrix(), phi);
    out.dW_dW0 = Matrix::Identity(n, n);
    for (std::size_t i = 0; i < uM; ++i)
        for (std::size_t j = 0; j < uM; ++j) {
            const Matrix Bij = state.B_block(i, j);
            const auto pi = phi.row(static_cast<Eigen::Index>(i));
            const auto pj = phi.row(static_cast<Eigen::Index>(j));
            for (Eigen::Index a = 0; a < N; ++a)
                for (Eigen::Index b = 0; b < N; ++b)
                    for (Eigen::Index k = 0; k < d; ++k)
                        for (Eigen::Index l = 0; l < d; ++l)
                            out.dW_dW0(a * d + k, b * d + l) -= Bij(a, b) * pi(k) * pj(l);
        }

    for (std::size_t m = 0; m < uM; ++m) {
        Matrix J = Matrix::Zero(n, d);
        for (Eigen::Index a = 0; a < N; ++a)
            for (Eigen::Index k = 0; k < d; ++k)
                J(a * d + k, k) -= state.s(m, static_cast<std::size_t>(a));
        for (std::size_t i = 0; i < uM; ++i) {
            const Matrix BW = state.B_block(i, m) * W0;  // N x d
            const auto pi = phi.row(static_cast<Eigen::Index>(i));
            for (Eigen::Index a = 0; a < N; ++a)
                for (Eigen::Index k = 0; k < d; ++k)
                    for (Eigen::Index l = 0; l < d; ++l)
                        J(a * d + k, l) -= BW(a, l) * pi(k);
            for (std::size_t j = 0; j < uM; ++j) {
                const Vector z = state.z_vector(i, j, m);
                const auto pj = phi.row(static_cast<Eigen::Index>(j));
                for (Eigen::Index a = 0; a < N; ++a)
                    for (Eigen::Index k = 0; k < d; ++k)
                        for (Eigen::Index l = 0; l < d; ++l)
                            J(a * d + k, l) -= z(a) * pj(l) * pi(k);
            }
        }
        out.dW_dphi.push_back(std::move(J));
    }
    return out;
}

Matrix dense_vjp_W0(const Matrix& V, const Matrix& dW_dW0) {
    const Vector r = dW_dW0.transpose() * vec(V);
    return unvec(r, V.rows(), V.cols());
}

Vector dense_vjp_phi(const Matrix& V, const Matrix& dW_dphi_m) { return dW_dphi_m.transpose() * vec(V); }

MetaGradients finite_diff_metagrads(const MetaParams& meta, const Episode& episode,
                                    const LossConfig& cfg, const SolverConfig& solver, double eps) {
    if (!(eps > 0))
        throw OracleError("finite differences need eps > 0");
    const double T = meta.T();

    auto outer = [&](const Matrix& W0, const EmbeddedSet& train, const EmbeddedSet& test, double T_) {
        const AdaptResult r = adapt(W0, train, cfg, Horizon::from_T(T_), solver, false);
        return cross_entropy(r.W_T, test);
    };
    const EmbeddedSet train{embed_rows(meta.embedding, episode.train.features), episode.train.labels};
    const EmbeddedSet test{embed_rows(meta.embedding, episode.test.features), episode.test.labels};

    MetaGradients g;
    g.grad_W0 = Matrix::Zero(meta.W0.rows(), meta.W0.cols());
    for (Eigen::Index r = 0; r < meta.W0.rows(); ++r)
        for (Eigen::Index c = 0; c < meta.W0.cols(); ++c) {
            Matrix Wp = meta.W0, Wm = meta.W0;
            Wp(r, c) += eps;
            Wm(r, c) -= eps;
            g.grad_W0(r, c) = (outer(Wp, train, test, T) - outer(Wm, train, test, T)) / (2 * eps);
        }

    g.grad_phi_train = Matrix::Zero(train.features.rows(), train.features.cols());
    for (Eigen::Index r = 0; r < train.features.rows(); ++r)
        for (Eigen::Index c = 0; c < train.features.cols(); ++c) {
            EmbeddedSet tp = train, tm = train;
            tp.features(r, c) += eps;
            tm.features(r, c) -= eps;
            g.grad_phi_train(r, c) = (outer(meta.W0, tp, test, T) - outer(meta.W0, tm, test, T)) / (2 * eps);
        }

    const Matrix W_T = adapt(meta.W0, train, cfg, Horizon::from_T(T), solver, false).W_T;
    g.grad_phi_test = Matrix::Zero(test.features.rows(), test.features.cols());
    for (Eigen::Index r = 0; r < test.features.rows(); ++r)
        for (Eigen::Index c = 0; c < test.features.cols(); ++c) {
            EmbeddedSet tp = test, tm = test;
            tp.features(r, c) += eps;
            tm.features(r, c) -= eps;
            g.grad_phi_test(r, c) = (cross_entropy(W_T, tp) - cross_entropy(W_T, tm)) / (2 * eps);
        }

    g.grad_embedding = zeros_like(meta.embedding);
    std::vector<double> theta = flatten(meta.embedding);
    std::vector<double> grad(theta.size(), 0.0);
    for (std::size_t i = 0; i < theta.size(); ++i) {
        double side[2];
        for (int sgn = 0; sgn < 2; ++sgn) {
            std::vector<double> probe = theta;
            probe[i] += sgn == 0 ? eps : -eps;
            EmbeddingParams e = meta.embedding;
            assign(e, probe);
            const EmbeddedSet tr{embed_rows(e, episode.train.features), episode.train.labels};
            const EmbeddedSet te{embed_rows(e, episode.test.features), episode.test.labels};
            side[sgn] = outer(meta.W0, tr, te, T);
        }
        grad[i] = (side[0] - side[1]) / (2 * eps);
    }
    assign(g.grad_embedding, grad);

    // one-sided when T - eps would leave the domain
    if (T > eps)
        g.grad_T = (outer(meta.W0, train, test, T + eps) - outer(meta.W0, train, test, T - eps)) / (2 * eps);
    else
        g.grad_T = (outer(meta.W0, train, test, T + eps) - outer(meta.W0, train, test, T)) / eps;
    g.grad_logT = T * g.grad_T;
    g.outer_loss = cross_entropy(W_T, test);
    g.accuracy = accuracy(W_T, test);
    return g;
}

void QuadraticSpec::validate() const {
    if (eigenvalues.size() == 0 || eigenvalues.size() != w0.size())
        throw OracleError("quadratic spec: eigenvalues and w0 must be non-empty and the same length");
    if ((eigenvalues.array() <= 0).any())
        throw OracleError("quadratic spec: eigenvalues must be positive");
    if (!(T > 0) || !std::isfinite(T))
        throw OracleError("quadratic spec: T must be positive");
}

namespace {

FlatState vector_state(const Vector& v) {
    FlatState s;
    s.add_segment("w", {static_cast<std::size_t>(v.size())});
    for (Eigen::Index i = 0; i < v.size(); ++i)
        s.values()[static_cast<std::size_t>(i)] = v(i);
    return s;
}

Vector state_vector(const FlatState& s) {
    Vector v(static_cast<Eigen::Index>(s.size()));
    for (std::size_t i = 0; i < s.size(); ++i)
        v(static_cast<Eigen::Index>(i)) = s.values()[i];
    return v;
}

} // namespace

AdjointReport adjoint_instability_demo(const QuadraticSpec& spec, const SolverConfig& solver,
                                       std::size_t samples) {
    spec.validate();
    if (samples < 2)
        throw OracleError("adjoint demo needs at least two samples");
    const Vector lam = spec.eigenvalues;
    const auto n = static_cast<std::size_t>(lam.size());
    auto exact = [&](double t) -> Vector { return (-lam.array() * t).exp() * spec.w0.array(); };

    // forward: dw/dt = -H w; backward in reversed time: dw/dtau = +H w
    RhsFunction fwd = [&](double, std::span<const double> y, std::span<double> dy) {
        for (std::size_t i = 0; i < n; ++i) dy[i] = -lam(static_cast<Eigen::Index>(i)) * y[i];
    };
    RhsFunction bwd = [&](double, std::span<const double> y, std::span<double> dy) {
        for (std::size_t i = 0; i < n; ++i) dy[i] = lam(static_cast<Eigen::Index>(i)) * y[i];
    };

    AdjointReport rep;
    const FlatState wT = integrate(fwd, vector_state(spec.w0), 0.0, spec.T, solver).state;
    const FlatState w0_rec = integrate(bwd, wT, 0.0, spec.T, solver).state;
    rep.forward_err = (state_vector(wT) - exact(spec.T)).norm();
    rep.backward_err = (state_vector(w0_rec) - spec.w0).norm();
    rep.ratio = rep.backward_err / std::max(rep.forward_err, 1e-16);

    const auto S = static_cast<Eigen::Index>(samples);
    rep.times.resize(samples);
    for (std::size_t i = 0; i < samples; ++i)
        rep.times[i] = spec.T * static_cast<double>(i) / static_cast<double>(samples - 1);
    rep.forward.resize(S, static_cast<Eigen::Index>(n));
    rep.backward.resize(S, static_cast<Eigen::Index>(n));
    rep.exact.resize(S, static_cast<Eigen::Index>(n));

    FlatState y = vector_state(spec.w0);
    rep.forward.row(0) = spec.w0.transpose();
    for (std::size_t i = 1; i < samples; ++i) {
        y = integrate(fwd, y, rep.times[i - 1], rep.times[i], solver).state;
        rep.forward.row(static_cast<Eigen::Index>(i)) = state_vector(y).transpose();
    }
    y = vector_state(rep.forward.row(S - 1).transpose());
    rep.backward.row(S - 1) = rep.forward.row(S - 1);
    for (std::size_t i = samples - 1; i-- > 0;) {
        y = integrate(bwd, y, spec.T - rep.times[i + 1], spec.T - rep.times[i], solver).state;
        rep.backward.row(static_cast<Eigen::Index>(i)) = state_vector(y).transpose();
    }
    for (std::size_t i = 0; i < samples; ++i)
        rep.exact.row(static_cast<Eigen::Index>(i)) = exact(rep.times[i]).transpose();
    return rep;
}

Matrix quadratic_sensitivity(const QuadraticSpec& spec, const SolverConfig& solver) {
    spec.validate();
    const auto n = static_cast<std::size_t>(spec.eigenvalues.size());
    DenseField field;
    field.n = n;
    field.p = n;
    field.eval = [&](const Vector& w, Vector& g, Matrix& H, Matrix& Gt) {
        H = Matrix(spec.eigenvalues.asDiagonal());
        g = H * w;
        Gt.setZero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    };
    const auto ni = static_cast<Eigen::Index>(n);
    return integrate_dense_sensitivity(field, spec.w0, Matrix::Identity(ni, ni), spec.T, solver).S_T;
}

double relative_error(const Matrix& a, const Matrix& b, double floor) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionError("relative_error: shapes differ");
    const double scale = std::max({a.norm(), b.norm(), floor});
    return (a - b).norm() / scale;
}

std::vector<ComponentError> compare_metagrads(const MetaGradients& a, const MetaGradients& b) {
    std::vector<ComponentError> out;
    out.push_back({"W0", relative_error(a.grad_W0, b.grad_W0)});
    out.push_back({"phi_train", relative_error(a.grad_phi_train, b.grad_phi_train)});
    out.push_back({"phi_test", relative_error(a.grad_phi_test, b.grad_phi_test)});
    if (!a.grad_embedding.layers.empty() && !b.grad_embedding.layers.empty()) {
        const std::vector<double> fa = flatten(a.grad_embedding), fb = flatten(b.grad_embedding);
        if (fa.size() != fb.size())
            throw DimensionError("compare_metagrads: embedding gradients differ in size");
        const Eigen::Map<const Vector> va(fa.data(), static_cast<Eigen::Index>(fa.size()));
        const Eigen::Map<const Vector> vb(fb.data(), static_cast<Eigen::Index>(fb.size()));
        out.push_back({"embedding", relative_error(Matrix(va), Matrix(vb))});
    }
    Matrix ta(1, 1), tb(1, 1);
    ta(0, 0) = a.grad_T;
    tb(0, 0) = b.grad_T;
    out.push_back({"T", relative_error(ta, tb)});
    return out;
}

} // namespace comln
