#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "comln/metagrad.hpp"

namespace comln {

struct TrainConfig {
    std::size_t meta_batch_size = 4;
    std::size_t iterations = 2000;
    double lr = 0.1;
    double momentum = 0.9;
    bool nesterov = true;
    // (iteration, multiplier) pairs, multipliers compound once reached.
    // Unset means x0.1 at 60% and 85% of the iterations.
    std::optional<std::vector<std::pair<std::size_t, double>>> lr_schedule;
    double lambda = 0.0;
    SolverConfig solver;
    std::uint64_t seed = 0;
    std::size_t eval_every = 100;
    std::string checkpoint_path;  // empty: no checkpoints

    double initial_T = 0.05;
    double max_T = 100.0;
    double init_scale = 0.01;  // W0 ~ U[-init_scale, init_scale]
    std::vector<LayerSpec> layers;  // empty: identity backbone
    std::size_t threads = 1;

    void validate() const;
    double lr_at(std::size_t iteration) const;
};

MetaParams init_meta(const TrainConfig& cfg, std::size_t input_dim, std::size_t ways);

// Optimizer buffers, shaped like MetaParams.
struct Velocity {
    Matrix W0;
    EmbeddingParams embedding;
    double log_T = 0.0;
};

Velocity zero_velocity(const MetaParams& meta);

struct TrainState {
    MetaParams meta;
    Velocity velocity;
    std::size_t iteration = 0;  // next iteration to run
};

TrainState initial_state(const TrainConfig& cfg, std::size_t input_dim, std::size_t ways);

struct MetricsRow {
    std::size_t iteration = 0;
    double outer_loss = 0.0;
    double accuracy = 0.0;
    double T = 0.0;
    double grad_norm_W0 = 0.0;
    double grad_norm_embedding = 0.0;
    double grad_T = 0.0;
    double alignment = 0.0;
    double wall_ms = 0.0;
};

std::string metrics_header();
std::string to_csv(const MetricsRow& row);

class TrainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Batch average of per-task bundles (grad_embedding included when present).
MetaGradients average(const std::vector<MetaGradients>& bundles);

// One momentum step on (W0, embedding, log_T); log_T is clamped to log(max_T).
void apply_update(TrainState& state, const MetaGradients& g, const TrainConfig& cfg, double lr);

using EpisodeSource = std::function<Episode(std::uint64_t index)>;

struct TrainResult {
    MetaParams meta;
    std::vector<MetricsRow> metrics;
};

// Runs iterations state.iteration .. cfg.iterations - 1. Iteration i uses
// episodes i * B .. i * B + B - 1 from the source.
TrainResult meta_train(const TrainConfig& cfg, const EpisodeSource& source, TrainState state,
                       const std::function<void(const MetricsRow&)>& on_row = {});

struct TestResult {
    double accuracy = 0.0;
    double loss = 0.0;
};

TestResult meta_test(const MetaParams& meta, const Episode& episode, const LossConfig& cfg,
                     const SolverConfig& solver, bool track = false);

TestResult evaluate(const MetaParams& meta, const EpisodeSource& source, std::size_t count,
                    const LossConfig& cfg, const SolverConfig& solver);

class CheckpointError : public std::runtime_error {
public:
    enum class Kind { version_mismatch, corrupt_payload, io };
    CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

// "COMLN-CKPT 1" text header, then little-endian f64 blocks: W0, each layer's
// weight (row-major) and bias, and optionally the optimizer velocity.
void save_checkpoint(const MetaParams& meta, const std::string& path);
void save_checkpoint(const TrainState& state, const std::string& path);

MetaParams load_checkpoint(const std::string& path);
// Rejects a checkpoint declaring other (N, d) with version_mismatch.
MetaParams load_checkpoint(const std::string& path, std::size_t ways, std::size_t dim);
// Restores velocity and iteration too (zero velocity if none was stored).
TrainState load_train_state(const std::string& path);

} // namespace comln
