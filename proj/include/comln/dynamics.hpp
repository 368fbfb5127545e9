#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>

#include "comln/loss.hpp"
#include "comln/solver.hpp"

namespace comln {

// Time-dependent quantities of the decomposed adaptation flow:
//   W(t)        = W0 - sum_m s_m(t) phi_m^T
//   dW/dW0      = I - sum_{i,j} B[i,j] (x) phi_i phi_j^T
//   dW/dphi_m   = -[s_m (x) I + sum_i B[i,m] W0 (x) phi_i + sum_{i,j} z[i,j,m] phi_j^T (x) phi_i]
//
// Flattened as segments "s" [M,N], "B" [M,M,N,N] and "z" [M,M,M,N], each
// row-major. B and z are absent when sensitivities are not tracked.
class AugmentedState {
public:
    AugmentedState() = default;
    static AugmentedState zeros(std::size_t M, std::size_t N, bool track_sensitivities);
    static AugmentedState from_flat(FlatState flat, std::size_t M, std::size_t N);

    static std::size_t entry_count(std::size_t M, std::size_t N, bool track_sensitivities) noexcept;

    std::size_t examples() const noexcept { return M_; }
    std::size_t ways() const noexcept { return N_; }
    bool tracks_sensitivities() const noexcept { return track_; }

    const FlatState& flat() const noexcept { return flat_; }
    FlatState& flat() noexcept { return flat_; }

    double& s(std::size_t m, std::size_t n);
    double s(std::size_t m, std::size_t n) const;
    double& B(std::size_t i, std::size_t j, std::size_t a, std::size_t b);
    double B(std::size_t i, std::size_t j, std::size_t a, std::size_t b) const;
    double& z(std::size_t i, std::size_t j, std::size_t m, std::size_t n);
    double z(std::size_t i, std::size_t j, std::size_t m, std::size_t n) const;

    Matrix s_matrix() const;                                // M x N
    Matrix B_block(std::size_t i, std::size_t j) const;     // N x N
    Vector z_vector(std::size_t i, std::size_t j, std::size_t m) const;

    double norm_s() const;
    double norm_B() const;
    double norm_z() const;

private:
    std::size_t M_ = 0;
    std::size_t N_ = 0;
    bool track_ = false;
    FlatState flat_;
};

// G[i,j] = phi_i^T phi_j over the training embeddings.
struct GramMatrix {
    Matrix G;
    static GramMatrix of(const Matrix& phi) { return {phi * phi.transpose()}; }
};

struct Horizon {
    double log_T = 0.0;
    double T() const { return std::exp(log_T); }
    static Horizon from_T(double T) { return {std::log(T)}; }
};

struct AdaptLimits {
    double max_T = 100.0;
    std::size_t max_examples = 64;
    std::size_t max_state_bytes = std::size_t{1} << 30;
};

class AdaptError : public std::runtime_error {
public:
    enum class Kind { horizon_exceeds_cap, too_many_examples, memory_budget_exceeded, invalid_horizon };
    AdaptError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

Matrix reconstruct_W(const Matrix& W0, const Matrix& s, const Matrix& phi);

// Right-hand side of the augmented flow for a single task. The Gram matrix and
// the initial logits W0 phi_m are computed once, so evaluation cost does not
// depend on the embedding size.
class TaskDynamics {
public:
    TaskDynamics(const Matrix& W0, const EmbeddedSet& data, const LossConfig& cfg);
    TaskDynamics(const Matrix& W0, const EmbeddedSet& data, const LossConfig& cfg, GramMatrix gram);

    std::size_t examples() const noexcept { return M_; }
    std::size_t ways() const noexcept { return N_; }
    const GramMatrix& gram() const noexcept { return gram_; }

    // y holds (s) or (s, B, z) in AugmentedState layout.
    void eval(std::span<const double> y, std::span<double> dydt, bool track) const;

private:
    std::size_t M_;
    std::size_t N_;
    double lambda_;
    GramMatrix gram_;
    Matrix initial_logits_;  // N x M, column m = W0 phi_m
    Matrix labels_;          // M x N
};

// ds_m/dt = (p_m - y_m)/M - lambda s_m
Matrix rhs_adapt(const Matrix& W0, const EmbeddedSet& data, const LossConfig& cfg, const Matrix& s);

AugmentedState rhs_full(const Matrix& W0, const EmbeddedSet& data, const LossConfig& cfg,
                        const AugmentedState& state, const GramMatrix& gram);

struct AdaptResult {
    Matrix W_T;
    AugmentedState state;
    StepStats stats;
};

AdaptResult adapt(const Matrix& W0, const EmbeddedSet& train, const LossConfig& cfg,
                  const Horizon& horizon, const SolverConfig& solver, bool track,
                  const AdaptLimits& limits = {});

// Continues an adaptation from `state` at time t0 to t1. Used to sample a
// trajectory at checkpoints without dense output.
AugmentedState advance(const TaskDynamics& dynamics, const AugmentedState& state, double t0,
                       double t1, const SolverConfig& solver, StepStats* stats = nullptr);

} // namespace comln
