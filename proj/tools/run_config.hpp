#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "comln/tasks.hpp"
#include "comln/trainer.hpp"

namespace comln::cli {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Sections train / tasks / loss / solver / model / check. Leaf names are
// unique across sections so each one doubles as a --flag.
nlohmann::json default_config();

// Leaf name -> section name.
std::map<std::string, std::string> leaf_sections();

// Defaults merged with the file (unknown sections or keys, or type
// mismatches, throw UsageError). An empty path yields the defaults.
nlohmann::json load_config(const std::string& path);

// Applies textual overrides keyed by leaf name, converting to the type of
// the default value.
void apply_overrides(nlohmann::json& cfg, const std::map<std::string, std::string>& overrides);

struct CheckConfig {
    double T = 1.0;
    double eps = 1e-5;
    double rtol = 1e-10;
    double atol = 1e-12;
    double alpha = 0.01;
    std::size_t steps = 10;
    double init_scale = 0.5;
    std::size_t seeds = 3;
};

struct RunConfig {
    TrainConfig train;
    TaskGenConfig tasks;
    LossConfig loss;
    std::string mode;           // "raw" or "embedded"
    std::string episodes_file;  // optional training source
    std::size_t count = 0;      // gen-tasks
    std::size_t eval_episodes = 0;
    std::uint64_t eval_seed = 0;
    CheckConfig check;
};

RunConfig resolve(const nlohmann::json& cfg);

std::vector<LayerSpec> parse_layers(const std::string& text);
std::optional<std::vector<std::pair<std::size_t, double>>> parse_schedule(const std::string& text);

} // namespace comln::cli
