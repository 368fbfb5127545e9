#include "comln/dynamics.hpp"

#include <algorithm>
#include <sstream>
#include <vector>

namespace comln {

namespace {

void require(bool ok, const char* what) {
    if (!ok)
        throw DimensionError(what);
}

double segment_norm(const FlatState& flat, const char* name) {
    if (!flat.has_segment(name))
        return 0.0;
    double acc = 0.0;
    for (double v : flat.segment(name))
        acc += v * v;
    return std::sqrt(acc);
}

} // namespace

// ---------------------------------------------------------------------------
// AugmentedState

std::size_t AugmentedState::entry_count(std::size_t M, std::size_t N, bool track) noexcept {
    std::size_t n = M * N;
    if (track)
        n += M * M * N * N + M * M * M * N;
    return n;
}

AugmentedState AugmentedState::zeros(std::size_t M, std::size_t N, bool track) {
    AugmentedState st;
    st.M_ = M;
    st.N_ = N;
    st.track_ = track;
    st.flat_.add_segment("s", {M, N});
    if (track) {
        st.flat_.add_segment("B", {M, M, N, N});
        st.flat_.add_segment("z", {M, M, M, N});
    }
    return st;
}

AugmentedState AugmentedState::from_flat(FlatState flat, std::size_t M, std::size_t N) {
    const bool track = flat.has_segment("B");
    require(flat.size() == entry_count(M, N, track), "flat state does not match (M, N)");
    AugmentedState st;
    st.M_ = M;
    st.N_ = N;
    st.track_ = track;
    st.flat_ = std::move(flat);
    return st;
}

double& AugmentedState::s(std::size_t m, std::size_t n) { return flat_.values()[m * N_ + n]; }
double AugmentedState::s(std::size_t m, std::size_t n) const { return flat_.values()[m * N_ + n]; }

double& AugmentedState::B(std::size_t i, std::size_t j, std::size_t a, std::size_t b) {
    return flat_.values()[M_ * N_ + ((i * M_ + j) * N_ + a) * N_ + b];
}
double AugmentedState::B(std::size_t i, std::size_t j, std::size_t a, std::size_t b) const {
    return flat_.values()[M_ * N_ + ((i * M_ + j) * N_ + a) * N_ + b];
}

double& AugmentedState::z(std::size_t i, std::size_t j, std::size_t m, std::size_t n) {
    return flat_.values()[M_ * N_ + M_ * M_ * N_ * N_ + ((i * M_ + j) * M_ + m) * N_ + n];
}
double AugmentedState::z(std::size_t i, std::size_t j, std::size_t m, std::size_t n) const {
    return flat_.values()[M_ * N_ + M_ * M_ * N_ * N_ + ((i * M_ + j) * M_ + m) * N_ + n];
}

Matrix AugmentedState::s_matrix() const {
    Matrix out(static_cast<Eigen::Index>(M_), static_cast<Eigen::Index>(N_));
    for (std::size_t m = 0; m < M_; ++m)
        for (std::size_t n = 0; n < N_; ++n)
            out(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)) = s(m, n);
    return out;
}

Matrix AugmentedState::B_block(std::size_t i, std::size_t j) const {
    Matrix out = Matrix::Zero(static_cast<Eigen::Index>(N_), static_cast<Eigen::Index>(N_));
    if (!track_)
        return out;
    for (std::size_t a = 0; a < N_; ++a)
        for (std::size_t b = 0; b < N_; ++b)
            out(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = B(i, j, a, b);
    return out;
}

Vector AugmentedState::z_vector(std::size_t i, std::size_t j, std::size_t m) const {
    Vector out = Vector::Zero(static_cast<Eigen::Index>(N_));
    if (!track_)
        return out;
    for (std::size_t n = 0; n < N_; ++n)
        out(static_cast<Eigen::Index>(n)) = z(i, j, m, n);
    return out;
}

double AugmentedState::norm_s() const { return segment_norm(flat_, "s"); }
double AugmentedState::norm_B() const { return segment_norm(flat_, "B"); }
double AugmentedState::norm_z() const { return segment_norm(flat_, "z"); }

// ---------------------------------------------------------------------------

Matrix reconstruct_W(const Matrix& W0, const Matrix& s, const Matrix& phi) {
    require(s.rows() == phi.rows(), "s and phi disagree on M");
    require(s.cols() == W0.rows(), "s and W0 disagree on N");
    require(phi.cols() == W0.cols(), "phi and W0 disagree on d");
    return W0 - s.transpose() * phi;
}

TaskDynamics::TaskDynamics(const Matrix& W0, const EmbeddedSet& data, const LossConfig& cfg)
    : TaskDynamics(W0, data, cfg, GramMatrix::of(data.features)) {}

TaskDynamics::TaskDynamics(const Matrix& W0, const EmbeddedSet& data, const LossConfig& cfg,
                           GramMatrix gram)
    : M_(data.size()), N_(data.ways()), lambda_(cfg.lambda), gram_(std::move(gram)) {
    require(W0.rows() == data.labels.cols(), "W0 rows must equal the number of classes");
    require(W0.cols() == data.features.cols(), "W0 columns must equal the embedding size");
    require(data.features.rows() == data.labels.rows(), "features and labels disagree on M");
    require(gram_.G.rows() == data.features.rows() && gram_.G.cols() == data.features.rows(),
            "Gram matrix must be M x M");
    initial_logits_ = W0 * data.features.transpose();
    labels_ = data.labels;
}

void TaskDynamics::eval(std::span<const double> y, std::span<double> dydt, bool track) const {
    const std::size_t M = M_, N = N_;
    const double inv_m = 1.0 / static_cast<double>(M);
    const Matrix& G = gram_.G;
    const double* s = y.data();
    double* ds = dydt.data();

    // p_m = softmax(W0 phi_m - sum_k G[k,m] s_k)
    std::vector<double> P(M * N);
    for (std::size_t m = 0; m < M; ++m) {
        double* p = &P[m * N];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t n = 0; n < N; ++n) {
            double logit = initial_logits_(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
            for (std::size_t k = 0; k < M; ++k)
                logit -= G(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m)) * s[k * N + n];
            p[n] = logit;
            mx = std::max(mx, logit);
        }
        double total = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            p[n] = std::exp(p[n] - mx);
            total += p[n];
        }
        for (std::size_t n = 0; n < N; ++n)
            p[n] /= total;
        for (std::size_t n = 0; n < N; ++n)
            ds[m * N + n] = (p[n] - labels_(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n))) * inv_m -
                            lambda_ * s[m * N + n];
    }
    if (!track)
        return;

    const double* B = s + M * N;
    const double* z = B + M * M * N * N;
    double* dB = ds + M * N;
    double* dz = dB + M * M * N * N;
    std::vector<double> Q(N * N), colsum(N), v(N);

    for (std::size_t i = 0; i < M; ++i) {
        const double* p = &P[i * N];
        for (std::size_t j = 0; j < M; ++j) {
            // Q = sum_m G[i,m] B[m,j]
            std::fill(Q.begin(), Q.end(), 0.0);
            for (std::size_t m = 0; m < M; ++m) {
                const double g = G(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(m));
                const double* Bmj = B + (m * M + j) * N * N;
                for (std::size_t e = 0; e < N * N; ++e)
                    Q[e] += g * Bmj[e];
            }
            // A_i Q = diag(p) (Q - 1 p^T Q) / M
            for (std::size_t b = 0; b < N; ++b) {
                double acc = 0.0;
                for (std::size_t c = 0; c < N; ++c)
                    acc += p[c] * Q[c * N + b];
                colsum[b] = acc;
            }
            const double* Bij = B + (i * M + j) * N * N;
            double* dBij = dB + (i * M + j) * N * N;
            for (std::size_t a = 0; a < N; ++a) {
                for (std::size_t b = 0; b < N; ++b) {
                    double val = -p[a] * (Q[a * N + b] - colsum[b]) * inv_m - lambda_ * Bij[a * N + b];
                    if (i == j)
                        val += ((a == b ? p[a] : 0.0) - p[a] * p[b]) * inv_m;
                    dBij[a * N + b] = val;
                }
            }

            // dz[i,j,m] = -A_i (1(i=j) s_m + 1(i=m) s_j + sum_k G[i,k] z[k,j,m]) - lambda z[i,j,m]
            // The proximal term acts on z directly, like on B; putting it
            // under A_i disagrees with finite differences once lambda > 0.
            for (std::size_t m = 0; m < M; ++m) {
                const double* zijm = z + ((i * M + j) * M + m) * N;
                for (std::size_t n = 0; n < N; ++n) {
                    double acc = 0.0;
                    if (i == j) acc += s[m * N + n];
                    if (i == m) acc += s[j * N + n];
                    for (std::size_t k = 0; k < M; ++k)
                        acc += G(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) *
                               z[((k * M + j) * M + m) * N + n];
                    v[n] = acc;
                }
                double pv = 0.0;
                for (std::size_t n = 0; n < N; ++n)
                    pv += p[n] * v[n];
                double* out = dz + ((i * M + j) * M + m) * N;
                for (std::size_t n = 0; n < N; ++n)
                    out[n] = -p[n] * (v[n] - pv) * inv_m - lambda_ * zijm[n];
            }
        }
    }
}

Matrix rhs_adapt(const Matrix& W0, const EmbeddedSet& data, const LossConfig& cfg, const Matrix& s) {
    const TaskDynamics dyn(W0, data, cfg);
    require(s.rows() == static_cast<Eigen::Index>(dyn.examples()) &&
                s.cols() == static_cast<Eigen::Index>(dyn.ways()),
            "s must be M x N");
    AugmentedState st = AugmentedState::zeros(dyn.examples(), dyn.ways(), false);
    for (Eigen::Index m = 0; m < s.rows(); ++m)
        for (Eigen::Index n = 0; n < s.cols(); ++n)
            st.s(static_cast<std::size_t>(m), static_cast<std::size_t>(n)) = s(m, n);
    AugmentedState out = AugmentedState::zeros(dyn.examples(), dyn.ways(), false);
    dyn.eval(st.flat().values(), out.flat().values(), false);
    return out.s_matrix();
}

AugmentedState rhs_full(const Matrix& W0, const EmbeddedSet& data, const LossConfig& cfg,
                        const AugmentedState& state, const GramMatrix& gram) {
    const TaskDynamics dyn(W0, data, cfg, gram);
    require(state.examples() == dyn.examples() && state.ways() == dyn.ways(),
            "state does not match the task dimensions");
    AugmentedState out = AugmentedState::zeros(state.examples(), state.ways(), state.tracks_sensitivities());
    dyn.eval(state.flat().values(), out.flat().values(), state.tracks_sensitivities());
    return out;
}

AugmentedState advance(const TaskDynamics& dynamics, const AugmentedState& state, double t0,
                       double t1, const SolverConfig& solver, StepStats* stats) {
    const bool track = state.tracks_sensitivities();
    RhsFunction rhs = [&dynamics, track](double, std::span<const double> y, std::span<double> dy) {
        dynamics.eval(y, dy, track);
    };
    IntegrationResult res = integrate(rhs, state.flat(), t0, t1, solver);
    if (stats) {
        stats->rhs_evals += res.stats.rhs_evals;
        stats->accepted_steps += res.stats.accepted_steps;
        stats->rejected_steps += res.stats.rejected_steps;
    }
    return AugmentedState::from_flat(std::move(res.state), state.examples(), state.ways());
}

AdaptResult adapt(const Matrix& W0, const EmbeddedSet& train, const LossConfig& cfg,
                  const Horizon& horizon, const SolverConfig& solver, bool track,
                  const AdaptLimits& limits) {
    const double T = horizon.T();
    if (!(T > 0) || !std::isfinite(T))
        throw AdaptError(AdaptError::Kind::invalid_horizon, "horizon must be positive and finite");
    // slack for exp(log(cap)) rounding above the cap
    if (T > limits.max_T * (1.0 + 1e-12)) {
        std::ostringstream msg;
        msg << "horizon T = " << T << " exceeds the cap " << limits.max_T;
        throw AdaptError(AdaptError::Kind::horizon_exceeds_cap, msg.str());
    }
    const std::size_t M = train.size(), N = train.ways();
    if (M > limits.max_examples) {
        std::ostringstream msg;
        msg << "M = " << M << " exceeds the cap " << limits.max_examples;
        throw AdaptError(AdaptError::Kind::too_many_examples, msg.str());
    }
    // State plus up to nine same-sized integrator buffers (dopri5).
    const std::size_t bytes = AugmentedState::entry_count(M, N, track) * sizeof(double) * 10;
    if (bytes > limits.max_state_bytes) {
        std::ostringstream msg;
        msg << "augmented state needs ~" << bytes << " bytes, budget is " << limits.max_state_bytes;
        throw AdaptError(AdaptError::Kind::memory_budget_exceeded, msg.str());
    }

    const TaskDynamics dyn(W0, train, cfg);
    AdaptResult out;
    out.state = advance(dyn, AugmentedState::zeros(M, N, track), 0.0, T, solver, &out.stats);
    out.W_T = reconstruct_W(W0, out.state.s_matrix(), train.features);
    return out;
}

} // namespace comln
