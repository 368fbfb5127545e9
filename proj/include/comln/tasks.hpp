#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "comln/loss.hpp"

namespace comln {

// One k-shot N-way problem. Features are raw inputs when an embedding
// network is used and embeddings directly in pre-embedded mode.
struct Episode {
    EmbeddedSet train;  // M = shots * ways rows
    EmbeddedSet test;   // test_shots * ways rows
    std::size_t ways = 0;
    std::size_t shots = 0;
    std::size_t test_shots = 0;

    void validate() const;
    bool operator==(const Episode& other) const;
};

struct TaskGenConfig {
    std::size_t ways = 5;
    std::size_t shots = 1;
    std::size_t test_shots = 15;
    std::size_t input_dim = 16;
    double class_spread = 1.0;
    double noise_std = 0.7;
    std::uint64_t seed = 0;

    void validate() const;
};

// Deterministic in (seed, index). Example m of either split has class m % N.
Episode sample_episode(const TaskGenConfig& cfg, std::uint64_t episode_index);

class EpisodeFileError : public std::runtime_error {
public:
    enum class Kind { malformed_header, dimension_inconsistency, truncated_file, io };
    EpisodeFileError(Kind kind, std::size_t offset, const std::string& what);
    Kind kind() const noexcept { return kind_; }
    std::size_t offset() const noexcept { return offset_; }

private:
    Kind kind_;
    std::size_t offset_;
};

// "COMLN-EP 1 <count> <N> <k> <k_test> <d>\n", then per episode: train
// features (f64 LE, row-major), train labels (u16 LE), test features, test
// labels. All episodes in a file share dimensions.
void write_episodes(const std::string& path, const std::vector<Episode>& episodes);
std::vector<Episode> load_episodes(const std::string& path);

} // namespace comln
