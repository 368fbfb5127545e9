#include "comln/metagrad.hpp"

namespace comln {

namespace {

void require(bool ok, const char* what) {
    if (!ok)
        throw DimensionError(what);
}

void check(const Matrix& V, const AugmentedState& state, const Matrix& phi) {
    require(state.tracks_sensitivities(), "projection needs a state with B and z");
    require(static_cast<std::size_t>(phi.rows()) == state.examples(), "phi rows must equal M");
    require(static_cast<std::size_t>(V.rows()) == state.ways(), "V rows must equal N");
    require(V.cols() == phi.cols(), "V and phi disagree on d");
}

} // namespace

Matrix compute_C(const Matrix& V, const AugmentedState& state, const Matrix& phi) {
    check(V, state, phi);
    const std::size_t M = state.examples();
    const Matrix Vphi = V * phi.transpose();  // N x M, column i = V phi_i
    Matrix C = Matrix::Zero(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(state.ways()));
    for (std::size_t j = 0; j < M; ++j)
        for (std::size_t i = 0; i < M; ++i)
            C.row(static_cast<Eigen::Index>(j)) +=
                Vphi.col(static_cast<Eigen::Index>(i)).transpose() * state.B_block(i, j);
    return C;
}

Matrix project_W0(const Matrix& V, const Matrix& C, const Matrix& phi) {
    require(C.rows() == phi.rows() && C.cols() == V.rows() && V.cols() == phi.cols(),
            "project_W0: dimensions disagree");
    return V - C.transpose() * phi;
}

Matrix project_W0(const Matrix& V, const AugmentedState& state, const Matrix& phi) {
    return project_W0(V, compute_C(V, state, phi), phi);
}

Matrix project_phi(const Matrix& V, const Matrix& C, const AugmentedState& state, const Matrix& phi,
                   const Matrix& W0) {
    check(V, state, phi);
    require(W0.rows() == V.rows() && W0.cols() == V.cols(), "W0 and V shapes differ");
    const std::size_t M = state.examples();
    const auto Mi = static_cast<Eigen::Index>(M);
    const Matrix Vphi = V * phi.transpose();
    Matrix D = Matrix::Zero(Mi, Mi);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t j = 0; j < M; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < M; ++i)
                acc += state.z_vector(i, j, m).dot(Vphi.col(static_cast<Eigen::Index>(i)));
            D(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(j)) = acc;
        }
    const Matrix s = state.s_matrix();
    return -(s * V + C * W0 + D * phi);
}

Matrix project_phi(const Matrix& V, const AugmentedState& state, const Matrix& phi, const Matrix& W0) {
    return project_phi(V, compute_C(V, state, phi), state, phi, W0);
}

double grad_T(const Matrix& V, const Matrix& g) {
    require(V.rows() == g.rows() && V.cols() == g.cols(), "grad_T: shapes differ");
    return -(V.array() * g.array()).sum();
}

MetaGradients embedded_metagrads(const Matrix& W0, double log_T, const EmbeddedSet& train,
                                 const EmbeddedSet& test, const LossConfig& cfg,
                                 const SolverConfig& solver, const AdaptLimits& limits) {
    const Horizon horizon{log_T};
    AdaptResult res = adapt(W0, train, cfg, horizon, solver, true, limits);
    const OuterPartials outer = outer_partials(res.W_T, test);
    const Matrix& phi = train.features;
    const Matrix C = compute_C(outer.V, res.state, phi);

    MetaGradients g;
    g.grad_W0 = project_W0(outer.V, C, phi);
    g.grad_phi_train = project_phi(outer.V, C, res.state, phi, W0);
    g.grad_phi_test = outer.grad_phi_test;
    const Matrix inner = inner_grad(res.W_T, W0, train, cfg).grad;
    g.diag_alignment = (outer.V.array() * inner.array()).sum();
    g.grad_T = grad_T(outer.V, inner);
    g.grad_logT = horizon.T() * g.grad_T;
    g.outer_loss = cross_entropy(res.W_T, test);
    g.accuracy = accuracy(res.W_T, test);
    g.stats = res.stats;
    return g;
}

void backprop_embedding(const EmbeddingParams& params, const std::vector<Tape>& train_tapes,
                        const std::vector<Tape>& test_tapes, MetaGradients& grads) {
    grads.grad_embedding = zeros_like(params);
    accumulate_backward(params, train_tapes, grads.grad_phi_train, grads.grad_embedding);
    accumulate_backward(params, test_tapes, grads.grad_phi_test, grads.grad_embedding);
}

MetaGradients task_metagrads(const MetaParams& meta, const Episode& episode, const LossConfig& cfg,
                             const SolverConfig& solver, const AdaptLimits& limits) {
    std::vector<Tape> train_tapes, test_tapes;
    const EmbeddedSet train{embed_rows(meta.embedding, episode.train.features, &train_tapes),
                            episode.train.labels};
    const EmbeddedSet test{embed_rows(meta.embedding, episode.test.features, &test_tapes),
                           episode.test.labels};
    MetaGradients g = embedded_metagrads(meta.W0, meta.log_T, train, test, cfg, solver, limits);
    backprop_embedding(meta.embedding, train_tapes, test_tapes, g);
    return g;
}

} // namespace comln
