#include "run_config.hpp"

#include <fstream>
#include <sstream>

namespace comln::cli {

using nlohmann::json;

json default_config() {
    return json{
        {"train",
         {{"meta_batch_size", 4},
          {"iterations", 2000},
          {"lr", 0.1},
          {"momentum", 0.9},
          {"nesterov", true},
          {"lr_schedule", "default"},
          {"seed", 0},
          {"eval_every", 100},
          {"initial_T", 0.05},
          {"max_T", 100.0},
          {"init_scale", 0.01},
          {"threads", 1},
          {"eval_episodes", 200},
          {"eval_seed", 1}}},
        {"tasks",
         {{"ways", 5},
          {"shots", 1},
          {"test_shots", 15},
          {"input_dim", 16},
          {"class_spread", 1.0},
          {"noise_std", 0.7},
          {"task_seed", 0},
          {"count", 100},
          {"mode", "raw"},
          {"episodes_file", ""}}},
        {"loss", {{"lambda", 0.0}}},
        {"solver",
         {{"method", "dopri5"}, {"fixed_step", 0.01}, {"rtol", 1e-6}, {"atol", 1e-8}, {"max_evals", 1000000}}},
        {"model", {{"layers", ""}}},
        {"check",
         {{"check_T", 1.0},
          {"check_eps", 1e-5},
          {"check_rtol", 1e-10},
          {"check_atol", 1e-12},
          {"check_alpha", 0.01},
          {"check_steps", 10},
          {"check_init_scale", 0.5},
          {"seeds", 3}}},
    };
}

std::map<std::string, std::string> leaf_sections() {
    std::map<std::string, std::string> out;
    const json defaults = default_config();
    for (const auto& [section, body] : defaults.items())
        for (const auto& [key, _] : body.items())
            out[key] = section;
    return out;
}

namespace {

bool same_kind(const json& def, const json& v) {
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_number_float()) return v.is_number();
    if (def.is_number_integer()) return v.is_number_integer() && v.get<long long>() >= 0;
    if (def.is_string()) return v.is_string();
    return false;
}

} // namespace

json load_config(const std::string& path) {
    json cfg = default_config();
    if (path.empty())
        return cfg;
    std::ifstream in(path);
    if (!in)
        throw UsageError("cannot open config file '" + path + "'");
    json file;
    try {
        file = json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!file.is_object())
        throw UsageError("config file '" + path + "' must hold a JSON object");
    for (const auto& [section, body] : file.items()) {
        if (!cfg.contains(section))
            throw UsageError("unknown config section '" + section + "'");
        if (!body.is_object())
            throw UsageError("config section '" + section + "' must be an object");
        for (const auto& [key, value] : body.items()) {
            if (!cfg[section].contains(key))
                throw UsageError("unknown config key '" + section + "." + key + "'");
            if (!same_kind(cfg[section][key], value))
                throw UsageError("config key '" + section + "." + key + "' has the wrong type");
            cfg[section][key] = value;
        }
    }
    return cfg;
}

void apply_overrides(json& cfg, const std::map<std::string, std::string>& overrides) {
    const auto sections = leaf_sections();
    for (const auto& [key, text] : overrides) {
        const auto it = sections.find(key);
        if (it == sections.end())
            throw UsageError("unknown option --" + key);
        json& slot = cfg[it->second][key];
        try {
            std::size_t used = 0;
            if (slot.is_boolean()) {
                if (text == "true" || text == "1") slot = true;
                else if (text == "false" || text == "0") slot = false;
                else throw std::invalid_argument("not a boolean");
                used = text.size();
            } else if (slot.is_number_float()) {
                slot = std::stod(text, &used);
            } else if (slot.is_number_integer()) {
                if (!text.empty() && text[0] == '-')
                    throw std::invalid_argument("negative");
                slot = std::stoull(text, &used);
            } else {
                slot = text;
                used = text.size();
            }
            if (used != text.size())
                throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw UsageError("invalid value '" + text + "' for --" + key);
        }
    }
}

std::vector<LayerSpec> parse_layers(const std::string& text) {
    std::vector<LayerSpec> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item.empty())
            continue;
        LayerSpec spec;
        const auto colon = item.find(':');
        try {
            std::size_t used = 0;
            const std::string width = item.substr(0, colon);
            spec.out = std::stoull(width, &used);
            if (used != width.size() || spec.out == 0)
                throw std::invalid_argument("width");
            if (colon != std::string::npos)
                spec.activation = parse_activation(item.substr(colon + 1));
        } catch (const std::exception&) {
            throw UsageError("invalid layer '" + item + "' (expected <width>[:relu|tanh|identity])");
        }
        out.push_back(spec);
    }
    return out;
}

std::optional<std::vector<std::pair<std::size_t, double>>> parse_schedule(const std::string& text) {
    if (text == "default")
        return std::nullopt;
    std::vector<std::pair<std::size_t, double>> out;
    if (text == "none" || text.empty())
        return out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto colon = item.find(':');
        try {
            if (colon == std::string::npos)
                throw std::invalid_argument("colon");
            out.emplace_back(std::stoull(item.substr(0, colon)), std::stod(item.substr(colon + 1)));
        } catch (const std::exception&) {
            throw UsageError("invalid lr_schedule entry '" + item + "' (expected <iteration>:<multiplier>)");
        }
    }
    return out;
}

RunConfig resolve(const json& cfg) {
    RunConfig rc;
    const json& t = cfg["train"];
    rc.train.meta_batch_size = t["meta_batch_size"].get<std::size_t>();
    rc.train.iterations = t["iterations"].get<std::size_t>();
    rc.train.lr = t["lr"].get<double>();
    rc.train.momentum = t["momentum"].get<double>();
    rc.train.nesterov = t["nesterov"].get<bool>();
    rc.train.lr_schedule = parse_schedule(t["lr_schedule"].get<std::string>());
    rc.train.seed = t["seed"].get<std::uint64_t>();
    rc.train.eval_every = t["eval_every"].get<std::size_t>();
    rc.train.initial_T = t["initial_T"].get<double>();
    rc.train.max_T = t["max_T"].get<double>();
    rc.train.init_scale = t["init_scale"].get<double>();
    rc.train.threads = t["threads"].get<std::size_t>();
    rc.eval_episodes = t["eval_episodes"].get<std::size_t>();
    rc.eval_seed = t["eval_seed"].get<std::uint64_t>();

    const json& k = cfg["tasks"];
    rc.tasks.ways = k["ways"].get<std::size_t>();
    rc.tasks.shots = k["shots"].get<std::size_t>();
    rc.tasks.test_shots = k["test_shots"].get<std::size_t>();
    rc.tasks.input_dim = k["input_dim"].get<std::size_t>();
    rc.tasks.class_spread = k["class_spread"].get<double>();
    rc.tasks.noise_std = k["noise_std"].get<double>();
    rc.tasks.seed = k["task_seed"].get<std::uint64_t>();
    rc.count = k["count"].get<std::size_t>();
    rc.mode = k["mode"].get<std::string>();
    rc.episodes_file = k["episodes_file"].get<std::string>();

    rc.loss.lambda = cfg["loss"]["lambda"].get<double>();
    rc.train.lambda = rc.loss.lambda;

    const json& s = cfg["solver"];
    try {
        rc.train.solver.method = parse_method(s["method"].get<std::string>());
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    rc.train.solver.fixed_step = s["fixed_step"].get<double>();
    rc.train.solver.rtol = s["rtol"].get<double>();
    rc.train.solver.atol = s["atol"].get<double>();
    rc.train.solver.max_evals = s["max_evals"].get<std::size_t>();

    rc.train.layers = parse_layers(cfg["model"]["layers"].get<std::string>());

    const json& c = cfg["check"];
    rc.check.T = c["check_T"].get<double>();
    rc.check.eps = c["check_eps"].get<double>();
    rc.check.rtol = c["check_rtol"].get<double>();
    rc.check.atol = c["check_atol"].get<double>();
    rc.check.alpha = c["check_alpha"].get<double>();
    rc.check.steps = c["check_steps"].get<std::size_t>();
    rc.check.init_scale = c["check_init_scale"].get<double>();
    rc.check.seeds = c["seeds"].get<std::size_t>();

    if (rc.mode != "raw" && rc.mode != "embedded")
        throw UsageError("tasks.mode must be 'raw' or 'embedded'");
    if (rc.mode == "embedded" && !rc.train.layers.empty())
        throw UsageError("tasks.mode 'embedded' uses the features directly; model.layers must be empty");
    try {
        rc.train.validate();
        rc.tasks.validate();
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    return rc;
}

} // namespace comln::cli
