#include "comln/loss.hpp"

#include <cmath>

namespace comln {

namespace {

void require(bool ok, const char* what) {
    if (!ok)
        throw DimensionError(what);
}

void check_weights(const Matrix& W, const EmbeddedSet& data) {
    require(W.rows() == data.labels.cols(), "classifier rows must equal the number of classes");
    require(W.cols() == data.features.cols(), "classifier columns must equal the embedding size");
    require(data.features.rows() == data.labels.rows(), "features and labels disagree on M");
    require(data.features.rows() >= 1, "empty example set");
}

double log_sum_exp(const Vector& x) {
    const double mx = x.maxCoeff();
    return mx + std::log((x.array() - mx).exp().sum());
}

} // namespace

void EmbeddedSet::validate() const {
    require(features.rows() >= 1, "empty example set");
    require(features.rows() == labels.rows(), "features and labels disagree on M");
    require(features.allFinite(), "non-finite features");
    for (Eigen::Index m = 0; m < labels.rows(); ++m) {
        int ones = 0;
        for (Eigen::Index n = 0; n < labels.cols(); ++n) {
            const double v = labels(m, n);
            require(v == 0.0 || v == 1.0, "labels must be one-hot");
            ones += v == 1.0;
        }
        require(ones == 1, "labels must be one-hot");
    }
}

EmbeddedSet EmbeddedSet::from_indices(Matrix features, const std::vector<int>& classes,
                                      std::size_t ways) {
    require(static_cast<Eigen::Index>(classes.size()) == features.rows(),
            "one label per example required");
    EmbeddedSet set{std::move(features), Matrix::Zero(static_cast<Eigen::Index>(classes.size()),
                                                      static_cast<Eigen::Index>(ways))};
    for (std::size_t m = 0; m < classes.size(); ++m) {
        require(classes[m] >= 0 && static_cast<std::size_t>(classes[m]) < ways, "label out of range");
        set.labels(static_cast<Eigen::Index>(m), classes[m]) = 1.0;
    }
    return set;
}

int EmbeddedSet::class_of(std::size_t m) const {
    Eigen::Index idx = 0;
    labels.row(static_cast<Eigen::Index>(m)).maxCoeff(&idx);
    return static_cast<int>(idx);
}

Vector softmax(const Vector& logits) {
    Vector e = (logits.array() - logits.maxCoeff()).exp();
    return e / e.sum();
}

Vector softmax_probs(const Matrix& W, const Vector& phi) {
    require(W.cols() == phi.size(), "classifier columns must equal the embedding size");
    return softmax(W * phi);
}

double cross_entropy(const Matrix& W, const EmbeddedSet& data) {
    check_weights(W, data);
    const Matrix logits = data.features * W.transpose();  // M x N
    double total = 0.0;
    for (Eigen::Index m = 0; m < logits.rows(); ++m) {
        const Vector row = logits.row(m).transpose();
        total += log_sum_exp(row) - data.labels.row(m).dot(logits.row(m));
    }
    return total / static_cast<double>(logits.rows());
}

double inner_loss(const Matrix& W, const Matrix& W0, const EmbeddedSet& data, const LossConfig& cfg) {
    require(W.rows() == W0.rows() && W.cols() == W0.cols(), "W and W0 shapes differ");
    double value = cross_entropy(W, data);
    if (cfg.lambda != 0.0)
        value += 0.5 * cfg.lambda * (W - W0).squaredNorm();
    return value;
}

Matrix gradient_from_residuals(const Matrix& residuals, const Matrix& phi, const Matrix& W,
                               const Matrix& W0, double lambda) {
    Matrix grad = residuals.transpose() * phi / static_cast<double>(phi.rows());
    if (lambda != 0.0)
        grad += lambda * (W - W0);
    return grad;
}

InnerGradient inner_grad(const Matrix& W, const Matrix& W0, const EmbeddedSet& data,
                         const LossConfig& cfg) {
    check_weights(W, data);
    require(W.rows() == W0.rows() && W.cols() == W0.cols(), "W and W0 shapes differ");
    const Eigen::Index M = data.features.rows();
    Matrix residuals(M, W.rows());
    for (Eigen::Index m = 0; m < M; ++m) {
        const Vector p = softmax(W * data.features.row(m).transpose());
        residuals.row(m) = p.transpose() - data.labels.row(m);
    }
    Matrix grad = gradient_from_residuals(residuals, data.features, W, W0, cfg.lambda);
    return {std::move(grad), std::move(residuals)};
}

CurvatureBlocks curvature(const Matrix& W, const EmbeddedSet& data) {
    check_weights(W, data);
    const Eigen::Index M = data.features.rows();
    CurvatureBlocks blocks;
    blocks.A.reserve(static_cast<std::size_t>(M));
    for (Eigen::Index m = 0; m < M; ++m) {
        const Vector p = softmax(W * data.features.row(m).transpose());
        Matrix A = Matrix(p.asDiagonal()) - p * p.transpose();
        blocks.A.push_back(A / static_cast<double>(M));
    }
    return blocks;
}

Matrix dense_hessian(const CurvatureBlocks& blocks, const Matrix& phi, double lambda) {
    require(static_cast<Eigen::Index>(blocks.A.size()) == phi.rows(), "one block per example");
    const Eigen::Index d = phi.cols();
    const Eigen::Index N = blocks.A.empty() ? 0 : blocks.A.front().rows();
    Matrix H = Matrix::Zero(N * d, N * d);
    for (Eigen::Index m = 0; m < phi.rows(); ++m) {
        const Matrix outer = phi.row(m).transpose() * phi.row(m);
        const Matrix& A = blocks.A[static_cast<std::size_t>(m)];
        for (Eigen::Index a = 0; a < N; ++a)
            for (Eigen::Index b = 0; b < N; ++b)
                H.block(a * d, b * d, d, d) += A(a, b) * outer;
    }
    H.diagonal().array() += lambda;
    return H;
}

OuterPartials outer_partials(const Matrix& W_T, const EmbeddedSet& test) {
    check_weights(W_T, test);
    const Eigen::Index M = test.features.rows();
    const double inv_m = 1.0 / static_cast<double>(M);
    Matrix residuals(M, W_T.rows());
    for (Eigen::Index m = 0; m < M; ++m) {
        const Vector p = softmax(W_T * test.features.row(m).transpose());
        residuals.row(m) = p.transpose() - test.labels.row(m);
    }
    OuterPartials out;
    out.V = residuals.transpose() * test.features * inv_m;
    out.grad_phi_test = residuals * W_T * inv_m;
    return out;
}

std::vector<int> predict(const Matrix& W, const Matrix& features) {
    require(W.cols() == features.cols(), "classifier columns must equal the embedding size");
    const Matrix logits = features * W.transpose();
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index m = 0; m < logits.rows(); ++m) {
        // logits within rounding noise of the maximum count as tied; the
        // lowest such class wins
        const double top = logits.row(m).maxCoeff();
        const double tol = kTieTolerance * std::max(1.0, logits.row(m).cwiseAbs().maxCoeff());
        Eigen::Index best = 0;
        while (logits(m, best) < top - tol)
            ++best;
        out[static_cast<std::size_t>(m)] = static_cast<int>(best);
    }
    return out;
}

double accuracy(const Matrix& W, const EmbeddedSet& data) {
    const auto pred = predict(W, data.features);
    std::size_t correct = 0;
    for (std::size_t m = 0; m < pred.size(); ++m)
        correct += pred[m] == data.class_of(m);
    return static_cast<double>(correct) / static_cast<double>(pred.size());
}

} // namespace comln
