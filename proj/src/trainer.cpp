#include "comln/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <random>
#include <sstream>
#include <thread>

namespace comln {

void TrainConfig::validate() const {
    if (!(lr >= 0) || !std::isfinite(lr))
        throw std::invalid_argument("train config: lr must be finite and >= 0");
    if (!(momentum >= 0 && momentum < 1))
        throw std::invalid_argument("train config: momentum must lie in [0, 1)");
    if (meta_batch_size < 1)
        throw std::invalid_argument("train config: meta_batch_size must be >= 1");
    if (eval_every < 1)
        throw std::invalid_argument("train config: eval_every must be >= 1");
    if (!(initial_T > 0) || !(max_T > 0) || initial_T > max_T)
        throw std::invalid_argument("train config: need 0 < initial_T <= max_T");
    if (!(lambda >= 0))
        throw std::invalid_argument("train config: lambda must be >= 0");
    if (!(init_scale >= 0))
        throw std::invalid_argument("train config: init_scale must be >= 0");
    if (threads < 1)
        throw std::invalid_argument("train config: threads must be >= 1");
    if (!layers.empty() && layers.back().activation != Activation::identity)
        throw std::invalid_argument("train config: last embedding layer must be identity");
    solver.validate();
}

double TrainConfig::lr_at(std::size_t iteration) const {
    double rate = lr;
    if (lr_schedule) {
        for (const auto& [at, mult] : *lr_schedule)
            if (iteration >= at)
                rate *= mult;
        return rate;
    }
    const auto first = static_cast<std::size_t>(0.6 * static_cast<double>(iterations));
    const auto second = static_cast<std::size_t>(0.85 * static_cast<double>(iterations));
    if (iteration >= first) rate *= 0.1;
    if (iteration >= second) rate *= 0.1;
    return rate;
}

MetaParams init_meta(const TrainConfig& cfg, std::size_t input_dim, std::size_t ways) {
    MetaParams meta;
    meta.embedding = init_embedding(input_dim, cfg.layers, cfg.seed);
    const auto d = static_cast<Eigen::Index>(meta.embedding.output_dim());
    meta.W0.resize(static_cast<Eigen::Index>(ways), d);
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> U(-cfg.init_scale, cfg.init_scale);
    for (Eigen::Index r = 0; r < meta.W0.rows(); ++r)
        for (Eigen::Index c = 0; c < meta.W0.cols(); ++c)
            meta.W0(r, c) = cfg.init_scale > 0 ? U(rng) : 0.0;
    meta.log_T = std::log(cfg.initial_T);
    return meta;
}

Velocity zero_velocity(const MetaParams& meta) {
    return {Matrix::Zero(meta.W0.rows(), meta.W0.cols()), zeros_like(meta.embedding), 0.0};
}

TrainState initial_state(const TrainConfig& cfg, std::size_t input_dim, std::size_t ways) {
    TrainState st;
    st.meta = init_meta(cfg, input_dim, ways);
    st.velocity = zero_velocity(st.meta);
    return st;
}

std::string metrics_header() {
    return "iteration,outer_loss,accuracy,T,grad_norm_W0,grad_norm_embedding,grad_T,alignment,wall_ms";
}

std::string to_csv(const MetricsRow& r) {
    std::ostringstream os;
    os << std::setprecision(10) << r.iteration << ',' << r.outer_loss << ',' << r.accuracy << ',' << r.T
       << ',' << r.grad_norm_W0 << ',' << r.grad_norm_embedding << ',' << r.grad_T << ',' << r.alignment
       << ',' << std::setprecision(6) << r.wall_ms;
    return os.str();
}

MetaGradients average(const std::vector<MetaGradients>& bundles) {
    if (bundles.empty())
        throw std::invalid_argument("average: empty batch");
    MetaGradients out = bundles.front();
    for (std::size_t b = 1; b < bundles.size(); ++b) {
        const MetaGradients& g = bundles[b];
        out.grad_W0 += g.grad_W0;
        if (!out.grad_embedding.layers.empty())
            axpy(out.grad_embedding, 1.0, g.grad_embedding);
        out.grad_T += g.grad_T;
        out.grad_logT += g.grad_logT;
        out.diag_alignment += g.diag_alignment;
        out.outer_loss += g.outer_loss;
        out.accuracy += g.accuracy;
        out.stats.rhs_evals += g.stats.rhs_evals;
        out.stats.accepted_steps += g.stats.accepted_steps;
        out.stats.rejected_steps += g.stats.rejected_steps;
    }
    const double inv = 1.0 / static_cast<double>(bundles.size());
    out.grad_W0 *= inv;
    if (!out.grad_embedding.layers.empty()) {
        EmbeddingParams scaled = zeros_like(out.grad_embedding);
        axpy(scaled, inv, out.grad_embedding);
        out.grad_embedding = std::move(scaled);
    }
    out.grad_T *= inv;
    out.grad_logT *= inv;
    out.diag_alignment *= inv;
    out.outer_loss *= inv;
    out.accuracy *= inv;
    // per-example embedding gradients do not average across tasks
    out.grad_phi_train.resize(0, 0);
    out.grad_phi_test.resize(0, 0);
    return out;
}

void apply_update(TrainState& st, const MetaGradients& g, const TrainConfig& cfg, double lr) {
    const double mu = cfg.momentum;
    auto step_matrix = [&](Matrix& p, Matrix& v, const Matrix& grad) {
        v = mu * v + grad;
        if (cfg.nesterov)
            p -= lr * (grad + mu * v);
        else
            p -= lr * v;
    };
    step_matrix(st.meta.W0, st.velocity.W0, g.grad_W0);
    for (std::size_t i = 0; i < st.meta.embedding.layers.size(); ++i) {
        Layer& p = st.meta.embedding.layers[i];
        Layer& v = st.velocity.embedding.layers[i];
        const Layer& gr = g.grad_embedding.layers.at(i);
        step_matrix(p.weight, v.weight, gr.weight);
        Matrix pb = p.bias, vb = v.bias;
        step_matrix(pb, vb, gr.bias);
        p.bias = pb;
        v.bias = vb;
    }
    st.velocity.log_T = mu * st.velocity.log_T + g.grad_logT;
    st.meta.log_T -= lr * (cfg.nesterov ? g.grad_logT + mu * st.velocity.log_T : st.velocity.log_T);
    st.meta.log_T = std::min(st.meta.log_T, std::log(cfg.max_T));
}

namespace {

std::vector<MetaGradients> batch_gradients(const TrainConfig& cfg, const EpisodeSource& source,
                                           const MetaParams& meta, std::size_t iteration) {
    const std::size_t B = cfg.meta_batch_size;
    const LossConfig loss{cfg.lambda};
    AdaptLimits limits;
    limits.max_T = cfg.max_T;
    std::vector<MetaGradients> out(B);
    std::vector<std::exception_ptr> errors(B);

    auto work = [&](std::size_t b) {
        try {
            const Episode ep = source(static_cast<std::uint64_t>(iteration * B + b));
            out[b] = task_metagrads(meta, ep, loss, cfg.solver, limits);
        } catch (...) {
            errors[b] = std::current_exception();
        }
    };
    const std::size_t workers = std::min(cfg.threads, B);
    if (workers <= 1) {
        for (std::size_t b = 0; b < B; ++b)
            work(b);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t b = next++; b < B; b = next++)
                    work(b);
            });
        for (auto& t : pool)
            t.join();
    }
    for (std::size_t b = 0; b < B; ++b) {
        if (!errors[b])
            continue;
        try {
            std::rethrow_exception(errors[b]);
        } catch (const std::exception& e) {
            throw TrainError("iteration " + std::to_string(iteration) + ", task " + std::to_string(b) +
                             ": " + e.what());
        }
    }
    return out;
}

} // namespace

TrainResult meta_train(const TrainConfig& cfg, const EpisodeSource& source, TrainState state,
                       const std::function<void(const MetricsRow&)>& on_row) {
    cfg.validate();
    TrainResult result;
    for (std::size_t it = state.iteration; it < cfg.iterations; ++it) {
        const auto start = std::chrono::steady_clock::now();
        const MetaGradients g = average(batch_gradients(cfg, source, state.meta, it));
        apply_update(state, g, cfg, cfg.lr_at(it));
        state.iteration = it + 1;

        MetricsRow row;
        row.iteration = it;
        row.outer_loss = g.outer_loss;
        row.accuracy = g.accuracy;
        row.T = state.meta.T();
        row.grad_norm_W0 = g.grad_W0.norm();
        row.grad_norm_embedding =
            g.grad_embedding.layers.empty() ? 0.0 : std::sqrt(squared_norm(g.grad_embedding));
        row.grad_T = g.grad_T;
        row.alignment = g.diag_alignment;
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        result.metrics.push_back(row);
        if (on_row)
            on_row(row);
        if (!cfg.checkpoint_path.empty() && state.iteration % cfg.eval_every == 0)
            save_checkpoint(state, cfg.checkpoint_path);
    }
    if (!cfg.checkpoint_path.empty())
        save_checkpoint(state, cfg.checkpoint_path);
    result.meta = std::move(state.meta);
    return result;
}

TestResult meta_test(const MetaParams& meta, const Episode& episode, const LossConfig& cfg,
                     const SolverConfig& solver, bool track) {
    const EmbeddedSet train{embed_rows(meta.embedding, episode.train.features), episode.train.labels};
    const EmbeddedSet test{embed_rows(meta.embedding, episode.test.features), episode.test.labels};
    const AdaptResult r = adapt(meta.W0, train, cfg, Horizon{meta.log_T}, solver, track);
    return {accuracy(r.W_T, test), cross_entropy(r.W_T, test)};
}

TestResult evaluate(const MetaParams& meta, const EpisodeSource& source, std::size_t count,
                    const LossConfig& cfg, const SolverConfig& solver) {
    TestResult total;
    for (std::size_t i = 0; i < count; ++i) {
        const TestResult r = meta_test(meta, source(i), cfg, solver);
        total.accuracy += r.accuracy;
        total.loss += r.loss;
    }
    if (count > 0) {
        total.accuracy /= static_cast<double>(count);
        total.loss /= static_cast<double>(count);
    }
    return total;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

constexpr const char* kMagic = "COMLN-CKPT";

void put(std::string& out, double v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.append(buf, 8);
}

void put(std::string& out, const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            put(out, m(r, c));
}

void put(std::string& out, const Vector& v) {
    for (Eigen::Index r = 0; r < v.size(); ++r)
        put(out, v(r));
}

void put_params(std::string& out, const Matrix& W0, const EmbeddingParams& e) {
    put(out, W0);
    for (const auto& l : e.layers) {
        put(out, l.weight);
        put(out, l.bias);
    }
}

std::string hexfloat(double v) {
    std::ostringstream os;
    os << std::hexfloat << v;
    return os.str();
}

void write(const TrainState* state, const MetaParams& meta, const std::string& path) {
    std::ostringstream h;
    h << kMagic << " 1\n"
      << "N " << meta.W0.rows() << '\n'
      << "d " << meta.W0.cols() << '\n'
      << "input_dim " << meta.embedding.input_dim << '\n'
      << "layers " << meta.embedding.layers.size() << '\n';
    for (const auto& l : meta.embedding.layers)
        h << "layer " << l.weight.rows() << ' ' << l.weight.cols() << ' ' << to_string(l.activation) << '\n';
    h << "log_T " << hexfloat(meta.log_T) << '\n';
    if (state)
        h << "iteration " << state->iteration << "\nvelocity 1\n";
    else
        h << "iteration 0\nvelocity 0\n";
    h << "end\n";

    std::string payload;
    put_params(payload, meta.W0, meta.embedding);
    if (state) {
        put_params(payload, state->velocity.W0, state->velocity.embedding);
        put(payload, state->velocity.log_T);
    }

    // write-then-rename so an interrupted save never leaves a torn file
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + tmp + "' for writing");
        out << h.str();
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        if (!out)
            throw CheckpointError(CheckpointError::Kind::io, "write to '" + tmp + "' failed");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw CheckpointError(CheckpointError::Kind::io, "cannot move checkpoint into '" + path + "'");
}

struct Parsed {
    TrainState state;
    bool has_velocity = false;
};

[[noreturn]] void corrupt(const std::string& what) {
    throw CheckpointError(CheckpointError::Kind::corrupt_payload, what);
}

Parsed read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + path + "'");
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::size_t pos = 0;
    auto line = [&]() -> std::string {
        const auto nl = bytes.find('\n', pos);
        if (nl == std::string::npos)
            corrupt("checkpoint header is truncated");
        std::string s = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return s;
    };
    auto field = [&](const char* key) -> std::istringstream {
        std::istringstream ls(line());
        std::string k;
        ls >> k;
        if (k != key)
            corrupt(std::string("expected '") + key + "' in checkpoint header, got '" + k + "'");
        return ls;
    };

    {
        std::istringstream ls(line());
        std::string magic;
        int version = -1;
        ls >> magic >> version;
        if (magic != kMagic)
            throw CheckpointError(CheckpointError::Kind::version_mismatch, "not a COMLN-CKPT file");
        if (version != 1)
            throw CheckpointError(CheckpointError::Kind::version_mismatch,
                                  "unsupported checkpoint version " + std::to_string(version));
    }
    long long N = -1, d = -1, input_dim = -1, L = -1;
    field("N") >> N;
    field("d") >> d;
    field("input_dim") >> input_dim;
    field("layers") >> L;
    if (N < 1 || d < 1 || input_dim < 1 || L < 0 || L > 64)
        corrupt("invalid dimensions in checkpoint header");

    Parsed p;
    MetaParams& meta = p.state.meta;
    meta.embedding.input_dim = static_cast<std::size_t>(input_dim);
    for (long long i = 0; i < L; ++i) {
        long long rows = -1, cols = -1;
        std::string act;
        field("layer") >> rows >> cols >> act;
        if (rows < 1 || cols < 1)
            corrupt("invalid layer dimensions in checkpoint header");
        Layer l;
        try {
            l.activation = parse_activation(act);
        } catch (const std::invalid_argument&) {
            corrupt("unknown activation '" + act + "' in checkpoint header");
        }
        l.weight.resize(rows, cols);
        l.bias.resize(rows);
        meta.embedding.layers.push_back(std::move(l));
    }
    try {
        meta.embedding.validate();
    } catch (const DimensionError& e) {
        corrupt(std::string("inconsistent layers: ") + e.what());
    }
    if (static_cast<long long>(meta.embedding.output_dim()) != d)
        corrupt("embedding output size does not match d");

    std::string hex;
    field("log_T") >> hex;
    char* end = nullptr;
    meta.log_T = std::strtod(hex.c_str(), &end);
    if (hex.empty() || *end != '\0' || !std::isfinite(meta.log_T))
        corrupt("invalid log_T in checkpoint header");
    long long iteration = -1, has_velocity = -1;
    field("iteration") >> iteration;
    field("velocity") >> has_velocity;
    if (iteration < 0 || (has_velocity != 0 && has_velocity != 1))
        corrupt("invalid training progress in checkpoint header");
    if (line() != "end")
        corrupt("checkpoint header is not terminated by 'end'");
    p.state.iteration = static_cast<std::size_t>(iteration);
    p.has_velocity = has_velocity == 1;

    meta.W0.resize(N, d);
    p.state.velocity = zero_velocity(meta);

    std::size_t count = 0;
    auto next = [&]() {
        if (bytes.size() - pos < 8)
            corrupt("checkpoint payload is truncated after " + std::to_string(count) + " values");
        double v;
        std::memcpy(&v, bytes.data() + pos, 8);
        pos += 8;
        ++count;
        if (!std::isfinite(v))
            corrupt("non-finite value in checkpoint payload");
        return v;
    };
    auto get_matrix = [&](Matrix& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                m(r, c) = next();
    };
    auto get_params = [&](Matrix& W0, EmbeddingParams& e) {
        get_matrix(W0);
        for (auto& l : e.layers) {
            get_matrix(l.weight);
            for (Eigen::Index r = 0; r < l.bias.size(); ++r)
                l.bias(r) = next();
        }
    };
    get_params(meta.W0, meta.embedding);
    if (p.has_velocity) {
        get_params(p.state.velocity.W0, p.state.velocity.embedding);
        p.state.velocity.log_T = next();
    }
    if (pos != bytes.size())
        corrupt("checkpoint payload has " + std::to_string(bytes.size() - pos) + " trailing bytes");
    return p;
}

} // namespace

void save_checkpoint(const MetaParams& meta, const std::string& path) { write(nullptr, meta, path); }

void save_checkpoint(const TrainState& state, const std::string& path) { write(&state, state.meta, path); }

MetaParams load_checkpoint(const std::string& path) { return read(path).state.meta; }

MetaParams load_checkpoint(const std::string& path, std::size_t ways, std::size_t dim) {
    MetaParams meta = load_checkpoint(path);
    if (static_cast<std::size_t>(meta.W0.rows()) != ways || static_cast<std::size_t>(meta.W0.cols()) != dim)
        throw CheckpointError(CheckpointError::Kind::version_mismatch,
                              "checkpoint declares N = " + std::to_string(meta.W0.rows()) +
                                  ", d = " + std::to_string(meta.W0.cols()) + " but N = " +
                                  std::to_string(ways) + ", d = " + std::to_string(dim) + " was expected");
    return meta;
}

TrainState load_train_state(const std::string& path) { return read(path).state; }

} // namespace comln
