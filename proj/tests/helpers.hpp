#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "comln/loss.hpp"
#include "comln/dynamics.hpp"

namespace testutil {

using comln::EmbeddedSet;
using comln::Matrix;
using comln::Vector;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = g(rng);
    return m;
}

// example m has class m % N
inline EmbeddedSet random_set(std::size_t M, std::size_t N, std::size_t d, std::mt19937_64& rng,
                              double scale = 1.0) {
    std::vector<int> cls(M);
    for (std::size_t m = 0; m < M; ++m)
        cls[m] = static_cast<int>(m % N);
    return EmbeddedSet::from_indices(
        random_matrix(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(d), rng, scale), cls, N);
}

inline double rel_err(const Matrix& a, const Matrix& b) {
    const double s = std::max({a.norm(), b.norm(), 1e-300});
    return (a - b).norm() / s;
}

inline double max_abs(const Matrix& a) { return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff(); }

// exp(A) by scaling and squaring with a truncated Taylor series
inline Matrix expm_series(const Matrix& A) {
    const double norm = A.cwiseAbs().rowwise().sum().maxCoeff();
    int squarings = 0;
    if (norm > 0.5)
        squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
    const Matrix S = A / std::pow(2.0, squarings);
    Matrix term = Matrix::Identity(A.rows(), A.cols());
    Matrix sum = term;
    for (int k = 1; k <= 30; ++k) {
        term = term * S / static_cast<double>(k);
        sum += term;
    }
    for (int i = 0; i < squarings; ++i)
        sum = sum * sum;
    return sum;
}

// straightforward cross-entropy: -(1/M) sum log p[y] + lambda/2 |W - W0|^2
inline double plain_loss(const Matrix& W, const Matrix& W0, const EmbeddedSet& data, double lambda) {
    double total = 0.0;
    for (Eigen::Index m = 0; m < data.features.rows(); ++m) {
        std::vector<double> z(static_cast<std::size_t>(W.rows()));
        double mx = -1e300;
        for (Eigen::Index n = 0; n < W.rows(); ++n) {
            double acc = 0.0;
            for (Eigen::Index k = 0; k < W.cols(); ++k)
                acc += W(n, k) * data.features(m, k);
            z[static_cast<std::size_t>(n)] = acc;
            mx = std::max(mx, acc);
        }
        double se = 0.0;
        for (double v : z)
            se += std::exp(v - mx);
        const int y = data.class_of(static_cast<std::size_t>(m));
        total += mx + std::log(se) - z[static_cast<std::size_t>(y)];
    }
    double reg = 0.0;
    for (Eigen::Index n = 0; n < W.rows(); ++n)
        for (Eigen::Index k = 0; k < W.cols(); ++k)
            reg += (W(n, k) - W0(n, k)) * (W(n, k) - W0(n, k));
    return total / static_cast<double>(data.features.rows()) + 0.5 * lambda * reg;
}

// plain gradient descent on the inner loss, coded without the library
inline Matrix plain_descent(Matrix W, const Matrix& W0, const EmbeddedSet& data, double lambda, double alpha,
                            int K) {
    const auto M = data.features.rows();
    for (int k = 0; k < K; ++k) {
        Matrix g = lambda * (W - W0);
        for (Eigen::Index m = 0; m < M; ++m) {
            Vector z = W * data.features.row(m).transpose();
            z.array() -= z.maxCoeff();
            Vector p = z.array().exp();
            p /= p.sum();
            p -= data.labels.row(m).transpose();
            g += p * data.features.row(m) / static_cast<double>(M);
        }
        W -= alpha * g;
    }
    return W;
}

// Inner minimizer for lambda = 0: long gradient flow, then Newton steps with a
// pseudo-inverse (the Hessian is singular along the softmax shift direction).
inline Matrix locate_minimizer(const EmbeddedSet& data, Eigen::Index N) {
    const Eigen::Index d = data.features.cols();
    comln::SolverConfig s;
    s.rtol = 1e-10;
    s.atol = 1e-12;
    const Matrix W0 = Matrix::Zero(N, d);
    Matrix W = comln::adapt(W0, data, {}, comln::Horizon::from_T(100.0), s, false).W_T;
    for (int it = 0; it < 30; ++it) {
        const Matrix g = comln::inner_grad(W, W0, data, {}).grad;
        const Matrix H = comln::dense_hessian(comln::curvature(W, data), data.features, 0.0);
        Vector gv(N * d);
        for (Eigen::Index a = 0; a < N; ++a)
            for (Eigen::Index k = 0; k < d; ++k)
                gv(a * d + k) = g(a, k);
        const Vector step = H.completeOrthogonalDecomposition().solve(gv);
        for (Eigen::Index a = 0; a < N; ++a)
            for (Eigen::Index k = 0; k < d; ++k)
                W(a, k) -= step(a * d + k);
    }
    return W;
}

} // namespace testutil
