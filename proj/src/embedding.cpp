#include "comln/embedding.hpp"

#include <cmath>
#include <random>

namespace comln {

namespace {

void require(bool ok, const char* what) {
    if (!ok)
        throw DimensionError(what);
}

double activate(Activation act, double v) {
    switch (act) {
    case Activation::relu: return v > 0.0 ? v : 0.0;
    case Activation::tanh: return std::tanh(v);
    case Activation::identity: break;
    }
    return v;
}

// derivative expressed through the pre-activation
double activate_grad(Activation act, double v) {
    switch (act) {
    case Activation::relu: return v > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
        const double t = std::tanh(v);
        return 1.0 - t * t;
    }
    case Activation::identity: break;
    }
    return 1.0;
}

} // namespace

Activation parse_activation(const std::string& name) {
    if (name == "identity") return Activation::identity;
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(Activation act) {
    switch (act) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    }
    return "unknown";
}

std::size_t EmbeddingParams::output_dim() const noexcept {
    return layers.empty() ? input_dim : static_cast<std::size_t>(layers.back().weight.rows());
}

std::size_t EmbeddingParams::parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers)
        n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
}

void EmbeddingParams::validate() const {
    require(input_dim >= 1, "embedding input_dim must be positive");
    Eigen::Index prev = static_cast<Eigen::Index>(input_dim);
    for (const auto& l : layers) {
        require(l.weight.cols() == prev, "layer dimensions do not chain");
        require(l.bias.size() == l.weight.rows(), "bias size must equal layer output size");
        require(l.weight.rows() >= 1, "empty layer");
        prev = l.weight.rows();
    }
    require(layers.empty() || layers.back().activation == Activation::identity,
            "final activation must be identity");
}

EmbeddingParams init_embedding(std::size_t input_dim, const std::vector<LayerSpec>& specs,
                               std::uint64_t seed) {
    EmbeddingParams p;
    p.input_dim = input_dim;
    std::mt19937_64 rng(seed);
    std::size_t in = input_dim;
    for (const auto& s : specs) {
        const double a = std::sqrt(6.0 / static_cast<double>(in + s.out));
        std::uniform_real_distribution<double> U(-a, a);
        Layer l;
        l.weight.resize(static_cast<Eigen::Index>(s.out), static_cast<Eigen::Index>(in));
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
                l.weight(r, c) = U(rng);
        l.bias = Vector::Zero(static_cast<Eigen::Index>(s.out));
        l.activation = s.activation;
        p.layers.push_back(std::move(l));
        in = s.out;
    }
    p.validate();
    return p;
}

EmbeddingParams zeros_like(const EmbeddingParams& params) {
    EmbeddingParams z = params;
    for (auto& l : z.layers) {
        l.weight.setZero();
        l.bias.setZero();
    }
    return z;
}

std::vector<double> flatten(const EmbeddingParams& params) {
    std::vector<double> out;
    out.reserve(params.parameter_count());
    for (const auto& l : params.layers) {
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
                out.push_back(l.weight(r, c));
        for (Eigen::Index r = 0; r < l.bias.size(); ++r)
            out.push_back(l.bias(r));
    }
    return out;
}

void assign(EmbeddingParams& params, std::span<const double> values) {
    require(values.size() == params.parameter_count(), "parameter vector has the wrong length");
    std::size_t k = 0;
    for (auto& l : params.layers) {
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
                l.weight(r, c) = values[k++];
        for (Eigen::Index r = 0; r < l.bias.size(); ++r)
            l.bias(r) = values[k++];
    }
}

void axpy(EmbeddingParams& into, double alpha, const EmbeddingParams& other) {
    require(into.layers.size() == other.layers.size(), "architectures differ");
    for (std::size_t i = 0; i < into.layers.size(); ++i) {
        auto& a = into.layers[i];
        const auto& b = other.layers[i];
        require(a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols(),
                "architectures differ");
        a.weight += alpha * b.weight;
        a.bias += alpha * b.bias;
    }
}

double squared_norm(const EmbeddingParams& params) {
    double acc = 0.0;
    for (const auto& l : params.layers)
        acc += l.weight.squaredNorm() + l.bias.squaredNorm();
    return acc;
}

Vector forward(const EmbeddingParams& params, const Vector& x, Tape* tape) {
    require(static_cast<std::size_t>(x.size()) == params.input_dim, "input size does not match input_dim");
    if (tape) {
        tape->inputs.clear();
        tape->pre.clear();
    }
    Vector h = x;
    for (const auto& l : params.layers) {
        Vector pre = l.weight * h + l.bias;
        if (tape) {
            tape->inputs.push_back(h);
            tape->pre.push_back(pre);
        }
        h = pre.unaryExpr([&](double v) { return activate(l.activation, v); });
    }
    return h;
}

EmbeddingParams backward(const EmbeddingParams& params, const Tape& tape, const Vector& grad_phi) {
    EmbeddingParams grad = zeros_like(params);
    const std::size_t L = params.layers.size();
    require(tape.inputs.size() == L && tape.pre.size() == L, "stale tape: layer count differs");
    require(static_cast<std::size_t>(grad_phi.size()) == params.output_dim(),
            "grad_phi size does not match output_dim");
    Vector g = grad_phi;
    for (std::size_t i = L; i-- > 0;) {
        const Layer& l = params.layers[i];
        const Vector& in = tape.inputs[i];
        const Vector& pre = tape.pre[i];
        require(in.size() == l.weight.cols() && pre.size() == l.weight.rows(),
                "stale tape: layer dimensions differ");
        Vector delta(pre.size());
        for (Eigen::Index r = 0; r < pre.size(); ++r)
            delta(r) = g(r) * activate_grad(l.activation, pre(r));
        grad.layers[i].weight = delta * in.transpose();
        grad.layers[i].bias = delta;
        g = l.weight.transpose() * delta;
    }
    return grad;
}

Matrix embed_rows(const EmbeddingParams& params, const Matrix& X, std::vector<Tape>* tapes) {
    Matrix out(X.rows(), static_cast<Eigen::Index>(params.output_dim()));
    if (tapes)
        tapes->assign(static_cast<std::size_t>(X.rows()), Tape{});
    for (Eigen::Index m = 0; m < X.rows(); ++m) {
        Tape* t = tapes ? &(*tapes)[static_cast<std::size_t>(m)] : nullptr;
        out.row(m) = forward(params, X.row(m).transpose(), t).transpose();
    }
    return out;
}

void accumulate_backward(const EmbeddingParams& params, const std::vector<Tape>& tapes,
                         const Matrix& grad_rows, EmbeddingParams& into) {
    require(static_cast<Eigen::Index>(tapes.size()) == grad_rows.rows(), "one tape per gradient row");
    for (std::size_t m = 0; m < tapes.size(); ++m)
        axpy(into, 1.0, backward(params, tapes[m], grad_rows.row(static_cast<Eigen::Index>(m)).transpose()));
}

} // namespace comln
