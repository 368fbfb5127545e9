#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "comln/loss.hpp"

namespace comln {

enum class Activation { identity, relu, tanh };

Activation parse_activation(const std::string& name);
std::string to_string(Activation act);

struct Layer {
    Matrix weight;  // d_out x d_in
    Vector bias;    // d_out
    Activation activation = Activation::identity;

    bool operator==(const Layer&) const = default;
};

// Fully connected feature extractor. No layers means the identity map.
struct EmbeddingParams {
    std::size_t input_dim = 0;
    std::vector<Layer> layers;

    std::size_t output_dim() const noexcept;
    std::size_t parameter_count() const noexcept;

    // Throws DimensionError if layer shapes do not chain or the last
    // activation is not identity.
    void validate() const;

    bool operator==(const EmbeddingParams&) const = default;
};

struct LayerSpec {
    std::size_t out = 0;
    Activation activation = Activation::identity;
};

// Weights uniform in [-a, a], a = sqrt(6 / (d_in + d_out)); zero biases.
EmbeddingParams init_embedding(std::size_t input_dim, const std::vector<LayerSpec>& layers,
                               std::uint64_t seed);

EmbeddingParams zeros_like(const EmbeddingParams& params);

// Flattened in declaration order: per layer, weight row-major then bias.
std::vector<double> flatten(const EmbeddingParams& params);
void assign(EmbeddingParams& params, std::span<const double> values);

// this += alpha * other (same architecture)
void axpy(EmbeddingParams& into, double alpha, const EmbeddingParams& other);
double squared_norm(const EmbeddingParams& params);

struct Tape {
    std::vector<Vector> inputs;  // input to each layer
    std::vector<Vector> pre;     // pre-activation of each layer
};

Vector forward(const EmbeddingParams& params, const Vector& x, Tape* tape = nullptr);

// Gradient of <grad_phi, f(x)> with respect to the parameters.
EmbeddingParams backward(const EmbeddingParams& params, const Tape& tape, const Vector& grad_phi);

// Row-wise helpers: rows of X are inputs, rows of the result are embeddings.
Matrix embed_rows(const EmbeddingParams& params, const Matrix& X, std::vector<Tape>* tapes = nullptr);
void accumulate_backward(const EmbeddingParams& params, const std::vector<Tape>& tapes,
                         const Matrix& grad_rows, EmbeddingParams& into);

} // namespace comln
