#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace comln {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Embedded examples: rows of `features` are the embeddings phi_m, rows of
// `labels` are one-hot class indicators.
struct EmbeddedSet {
    Matrix features;  // M x d
    Matrix labels;    // M x N

    std::size_t size() const noexcept { return static_cast<std::size_t>(features.rows()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(features.cols()); }
    std::size_t ways() const noexcept { return static_cast<std::size_t>(labels.cols()); }

    // Throws DimensionError unless the one-hot / finiteness invariants hold.
    void validate() const;

    static EmbeddedSet from_indices(Matrix features, const std::vector<int>& classes, std::size_t ways);
    int class_of(std::size_t m) const;
};

struct LossConfig {
    double lambda = 0.0;  // proximal weight around W0
};

Vector softmax(const Vector& logits);
Vector softmax_probs(const Matrix& W, const Vector& phi);

// -(1/M) sum_m y_m^T log p_m + (lambda/2) ||W - W0||_F^2
double inner_loss(const Matrix& W, const Matrix& W0, const EmbeddedSet& data, const LossConfig& cfg);

// Unregularized cross-entropy, used as the outer (test) loss.
double cross_entropy(const Matrix& W, const EmbeddedSet& data);

struct InnerGradient {
    Matrix grad;       // N x d
    Matrix residuals;  // M x N, row m = p_m - y_m
};

InnerGradient inner_grad(const Matrix& W, const Matrix& W0, const EmbeddedSet& data,
                         const LossConfig& cfg);

// (1/M) sum_m r_m phi_m^T + lambda (W - W0)
Matrix gradient_from_residuals(const Matrix& residuals, const Matrix& phi, const Matrix& W,
                               const Matrix& W0, double lambda);

// A_m = (diag(p_m) - p_m p_m^T) / M
struct CurvatureBlocks {
    std::vector<Matrix> A;
};

CurvatureBlocks curvature(const Matrix& W, const EmbeddedSet& data);

// sum_m A_m (x) phi_m phi_m^T + lambda I, over the row-major vectorization of
// an N x d matrix (index a * d + k). Dense Nd x Nd; meant for small checks.
Matrix dense_hessian(const CurvatureBlocks& blocks, const Matrix& phi, double lambda);

struct OuterPartials {
    Matrix V;              // dL_test / dW(T), N x d
    Matrix grad_phi_test;  // M_test x d, row m = W_T^T (p_m - y_m) / M_test
};

OuterPartials outer_partials(const Matrix& W_T, const EmbeddedSet& test);

// Argmax of W phi per row, ties broken by the lowest class index. Logits
// within kTieTolerance (relative to the row's largest magnitude, at least 1)
// of the maximum are tied.
constexpr double kTieTolerance = 1e-9;
std::vector<int> predict(const Matrix& W, const Matrix& features);
double accuracy(const Matrix& W, const EmbeddedSet& data);

} // namespace comln
