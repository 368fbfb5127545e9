#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "comln/metagrad.hpp"

namespace comln {

class OracleError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Iterates of K explicit gradient steps, kept in tracked buffers so their
// footprint shows up in allocation measurements.
struct UnrollTape {
    std::size_t N = 0, d = 0, M = 0;
    double alpha = 0.0;
    std::vector<Buffer> iterates;   // K + 1 entries, row-major N x d
    std::vector<Buffer> residuals;  // K entries, row-major M x N (p_m - y_m at W_k)

    std::size_t steps() const noexcept { return residuals.size(); }
    Matrix W(std::size_t k) const;
    Matrix R(std::size_t k) const;
};

UnrollTape unroll(const Matrix& W0, const EmbeddedSet& train, const LossConfig& cfg, double alpha,
                  std::size_t K);

// Reverse-mode gradients of the test loss through K gradient-descent steps
// of size alpha. grad_T is -<V, grad L_train(W_K)> with T = K alpha.
MetaGradients bptt_embedded(const Matrix& W0, const EmbeddedSet& train, const EmbeddedSet& test,
                            const LossConfig& cfg, double alpha, std::size_t K,
                            Matrix* W_K = nullptr);
MetaGradients bptt_metagrads(const MetaParams& meta, const Episode& episode, const LossConfig& cfg,
                             double alpha, std::size_t K, Matrix* W_K = nullptr);

// Dense forward sensitivity for a generic gradient field g(w; theta):
//   dw/dt = -g,   dS/dt = -H(w) S - dg/dtheta,   S = dw/dtheta.
struct DenseField {
    std::size_t n = 0;  // state size
    std::size_t p = 0;  // parameter count
    // Writes g (n), H = dg/dw (n x n) and dg/dtheta (n x p) at w.
    std::function<void(const Vector& w, Vector& g, Matrix& H, Matrix& G_theta)> eval;
};

struct DenseSensitivity {
    Vector w_T;
    Matrix S_T;  // n x p
    StepStats stats;
};

DenseSensitivity integrate_dense_sensitivity(const DenseField& field, const Vector& w0, const Matrix& S0,
                                             double T, const SolverConfig& solver);

struct DenseJacobians {
    Matrix W_T;                // N x d
    Matrix dW_dW0;             // Nd x Nd, row-major vec
    std::vector<Matrix> dW_dphi;  // M entries, Nd x d
};

constexpr std::size_t kDenseOracleLimit = 64;

// Throws OracleError when N * d exceeds kDenseOracleLimit.
DenseJacobians naive_forward_sensitivity(const Matrix& W0, const EmbeddedSet& train,
                                         const LossConfig& cfg, double T, const SolverConfig& solver);

// The same Jacobians assembled from the decomposed state (s, B, z).
DenseJacobians assemble_jacobians(const Matrix& W0, const Matrix& phi, const AugmentedState& state);

// vec(V)^T J with row-major vec, reshaped back.
Matrix dense_vjp_W0(const Matrix& V, const Matrix& dW_dW0);
Vector dense_vjp_phi(const Matrix& V, const Matrix& dW_dphi_m);

// Central differences of the test loss after re-adapting at every probe.
// Includes the embedding parameters when the backbone has layers.
MetaGradients finite_diff_metagrads(const MetaParams& meta, const Episode& episode,
                                    const LossConfig& cfg, const SolverConfig& solver, double eps);

struct QuadraticSpec {
    Vector eigenvalues;  // diagonal curvature, all > 0
    Vector w0;
    double T = 1.0;

    void validate() const;
};

struct AdjointReport {
    double forward_err = 0.0;   // |w(T) - exp(-HT) w0|
    double backward_err = 0.0;  // |w_rec(0) - w0|, recomputed backward from w(T)
    double ratio = 0.0;         // backward_err / max(forward_err, 1e-16)
    std::vector<double> times;
    Matrix forward;   // rows: state at times[i] integrating 0 -> T
    Matrix backward;  // rows: state at times[i] integrating T -> 0
    Matrix exact;     // rows: closed form at times[i]
};

AdjointReport adjoint_instability_demo(const QuadraticSpec& spec, const SolverConfig& solver,
                                       std::size_t samples = 51);

// ||a - b|| / max(||a||, ||b||, floor), over a whole component.
double relative_error(const Matrix& a, const Matrix& b, double floor = 1e-12);

struct ComponentError {
    std::string component;  // W0, phi_train, phi_test, embedding, T
    double rel_err = 0.0;
};

// The embedding row is present only when both bundles carry layer gradients.
std::vector<ComponentError> compare_metagrads(const MetaGradients& a, const MetaGradients& b);

// dw(T)/dw0 for the quadratic flow via the dense forward-sensitivity system.
Matrix quadratic_sensitivity(const QuadraticSpec& spec, const SolverConfig& solver);

} // namespace comln
