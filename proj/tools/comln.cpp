#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "comln/memory.hpp"
#include "comln/oracles.hpp"
#include "comln/trainer.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace comln;
using comln::cli::UsageError;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

// --<leaf> overrides shared by the config-driven commands
struct Overrides {
    std::map<std::string, std::string> values;

    void attach(CLI::App* cmd) {
        for (const auto& [leaf, section] : cli::leaf_sections())
            cmd->add_option("--" + leaf, values[leaf], "override " + section + "." + leaf);
    }

    std::map<std::string, std::string> given(const CLI::App* cmd) const {
        std::map<std::string, std::string> out;
        for (const auto& [leaf, text] : values)
            if (cmd->count("--" + leaf) > 0)
                out[leaf] = text;
        return out;
    }
};

nlohmann::json config_for(const std::string& path, const Overrides& ov, const CLI::App* cmd) {
    nlohmann::json cfg = cli::load_config(path);
    cli::apply_overrides(cfg, ov.given(cmd));
    return cfg;
}

EpisodeSource generator(TaskGenConfig tasks) {
    return [tasks](std::uint64_t i) { return sample_episode(tasks, i); };
}

std::vector<double> parse_doubles(const std::string& text, const char* what) {
    std::vector<double> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size())
                throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw UsageError(std::string("invalid number '") + item + "' in " + what);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

int run_train(const cli::RunConfig& rc, const nlohmann::json& resolved, const std::string& out_dir) {
    fs::create_directories(out_dir);
    {
        std::ofstream cfg_out(fs::path(out_dir) / "config.json");
        cfg_out << resolved.dump(2) << '\n';
    }

    EpisodeSource source = generator(rc.tasks);
    std::size_t input_dim = rc.tasks.input_dim;
    std::size_t ways = rc.tasks.ways;
    if (!rc.episodes_file.empty()) {
        auto episodes = std::make_shared<std::vector<Episode>>(load_episodes(rc.episodes_file));
        if (episodes->empty())
            throw UsageError("episode file '" + rc.episodes_file + "' holds no episodes");
        input_dim = episodes->front().train.dim();
        ways = episodes->front().ways;
        source = [episodes](std::uint64_t i) { return (*episodes)[i % episodes->size()]; };
    }

    TrainConfig tc = rc.train;
    tc.checkpoint_path = (fs::path(out_dir) / "checkpoint.ckpt").string();
    TrainState state = initial_state(tc, input_dim, ways);

    std::ofstream metrics(fs::path(out_dir) / "metrics.csv");
    metrics << metrics_header() << '\n';
    const std::size_t report = std::max<std::size_t>(1, tc.iterations / 20);
    TrainResult res = meta_train(tc, source, std::move(state), [&](const MetricsRow& row) {
        metrics << to_csv(row) << '\n';
        if ((row.iteration + 1) % report == 0)
            std::cout << "iter " << row.iteration + 1 << "  loss " << row.outer_loss << "  acc "
                      << row.accuracy << "  T " << row.T << std::endl;
    });
    metrics.flush();

    TaskGenConfig held_out = rc.tasks;
    held_out.seed = rc.eval_seed;
    const TestResult eval = evaluate(res.meta, generator(held_out), rc.eval_episodes, rc.loss, tc.solver);
    nlohmann::json summary{{"iterations", tc.iterations},
                           {"final_T", res.meta.T()},
                           {"eval_episodes", rc.eval_episodes},
                           {"eval_accuracy", eval.accuracy},
                           {"eval_loss", eval.loss}};
    std::ofstream(fs::path(out_dir) / "summary.json") << summary.dump(2) << '\n';
    std::cout << "final T " << res.meta.T() << "  eval accuracy " << eval.accuracy << " over "
              << rc.eval_episodes << " episodes" << std::endl;
    return kOk;
}

// ---------------------------------------------------------------------------

int run_grad_check(const cli::RunConfig& rc, const std::string& fault) {
    const cli::CheckConfig& ck = rc.check;
    const char* components[] = {"W0", "phi_train", "phi_test", "embedding", "T"};
    if (!fault.empty() && std::find(std::begin(components), std::end(components), fault) == std::end(components))
        throw UsageError("unknown component '" + fault + "' for --inject-fault");

    SolverConfig fine;
    fine.method = Method::dopri5;
    fine.rtol = ck.rtol;
    fine.atol = ck.atol;
    fine.max_evals = rc.train.solver.max_evals;
    SolverConfig euler;
    euler.method = Method::euler;
    euler.fixed_step = ck.alpha;
    euler.max_evals = rc.train.solver.max_evals;

    auto flip = [&](MetaGradients& g) {
        if (fault == "W0") g.grad_W0 = -g.grad_W0;
        else if (fault == "phi_train") g.grad_phi_train = -g.grad_phi_train;
        else if (fault == "phi_test") g.grad_phi_test = -g.grad_phi_test;
        else if (fault == "embedding") {
            EmbeddingParams neg = zeros_like(g.grad_embedding);
            axpy(neg, -1.0, g.grad_embedding);
            g.grad_embedding = neg;
        } else if (fault == "T") {
            g.grad_T = -g.grad_T;
            g.grad_logT = -g.grad_logT;
        }
    };

    constexpr double fd_tol = 1e-4, bptt_tol = 1e-8;
    std::cout << std::left << std::setw(6) << "seed" << std::setw(12) << "component" << std::setw(16)
              << "rel_err_fd" << std::setw(16) << "rel_err_bptt" << "status\n";
    std::vector<std::string> failures;
    for (std::size_t s = 0; s < ck.seeds; ++s) {
        TaskGenConfig tasks = rc.tasks;
        tasks.seed = rc.tasks.seed + s;
        const Episode ep = sample_episode(tasks, 0);
        TrainConfig tc = rc.train;
        tc.seed = rc.train.seed + s;
        tc.init_scale = ck.init_scale;
        tc.initial_T = ck.T;
        tc.max_T = std::max(tc.max_T, ck.T);
        MetaParams meta = init_meta(tc, ep.train.dim(), ep.ways);

        MetaGradients comln = task_metagrads(meta, ep, rc.loss, fine);
        const MetaGradients fd = finite_diff_metagrads(meta, ep, rc.loss, fine, ck.eps);

        MetaParams unrolled = meta;
        unrolled.log_T = std::log(ck.alpha * static_cast<double>(ck.steps));
        MetaGradients comln_euler = task_metagrads(unrolled, ep, rc.loss, euler);
        const MetaGradients bptt = bptt_metagrads(unrolled, ep, rc.loss, ck.alpha, ck.steps);

        if (!fault.empty()) {
            flip(comln);
            flip(comln_euler);
        }
        const auto vs_fd = compare_metagrads(comln, fd);
        const auto vs_bptt = compare_metagrads(comln_euler, bptt);
        for (std::size_t c = 0; c < vs_fd.size(); ++c) {
            const bool ok = vs_fd[c].rel_err <= fd_tol && vs_bptt[c].rel_err <= bptt_tol;
            std::ostringstream e1, e2;
            e1 << std::scientific << std::setprecision(3) << vs_fd[c].rel_err;
            e2 << std::scientific << std::setprecision(3) << vs_bptt[c].rel_err;
            std::cout << std::left << std::setw(6) << s << std::setw(12) << vs_fd[c].component << std::setw(16)
                      << e1.str() << std::setw(16) << e2.str() << (ok ? "PASS" : "FAIL") << '\n';
            if (!ok)
                failures.push_back("component " + vs_fd[c].component + ", seed " + std::to_string(s) +
                                   " (fd " + e1.str() + ", bptt " + e2.str() + ")");
        }
    }
    std::cout.flush();
    if (!failures.empty()) {
        for (const auto& f : failures)
            std::cerr << "FAIL: " << f << '\n';
        return kCheckFailed;
    }
    std::cout << "PASS: all components within " << fd_tol << " of finite differences and " << bptt_tol
              << " of unrolled backpropagation\n";
    return kOk;
}

// ---------------------------------------------------------------------------

struct HorizonToken {
    double T;
    std::size_t steps;
};

std::vector<HorizonToken> parse_horizons(const std::string& text) {
    std::vector<HorizonToken> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        try {
            std::size_t used = 0;
            if (item.rfind("T=", 0) == 0) {
                const std::string v = item.substr(2);
                const double T = std::stod(v, &used);
                if (used != v.size() || !(T > 0))
                    throw std::invalid_argument("T");
                out.push_back({T, static_cast<std::size_t>(std::llround(T * 100.0))});
            } else if (item.rfind("steps=", 0) == 0) {
                const std::string v = item.substr(6);
                const auto K = std::stoull(v, &used);
                if (used != v.size() || K == 0)
                    throw std::invalid_argument("steps");
                out.push_back({static_cast<double>(K) / 100.0, K});
            } else {
                throw std::invalid_argument("prefix");
            }
        } catch (const std::exception&) {
            throw UsageError("invalid horizon '" + item + "' (expected T=<t> or steps=<k>)");
        }
    }
    if (out.empty())
        throw UsageError("--horizons needs at least one entry");
    return out;
}

struct BenchOptions {
    std::string mode = "memory";
    std::string horizons = "steps=10,steps=100,steps=1000";
    std::size_t ways = 5, shots = 1, dim = 64, repeats = 3;
    std::size_t max_evals = 1'000'000;
    double rtol = 1e-6, atol = 1e-8;
    std::string out;
};

int run_bench(const BenchOptions& o) {
    if (o.mode != "memory" && o.mode != "runtime")
        throw UsageError("--mode must be 'memory' or 'runtime'");
    const auto horizons = parse_horizons(o.horizons);
    TaskGenConfig tasks;
    tasks.ways = o.ways;
    tasks.shots = o.shots;
    tasks.input_dim = o.dim;
    const Episode ep = sample_episode(tasks, 0);
    TrainConfig tc;
    tc.init_scale = 0.1;
    MetaParams meta = init_meta(tc, o.dim, o.ways);
    const LossConfig loss;
    const std::size_t reps = o.mode == "runtime" ? std::max<std::size_t>(1, o.repeats) : 1;

    std::ostringstream csv;
    csv << "method,T,steps,bytes,wall_ms,rhs_evals,status\n";
    auto row = [&](const std::string& method, const HorizonToken& h, const auto& body) {
        std::size_t bytes = 0, evals = 0;
        double best_ms = 0.0;
        std::string status = "ok";
        for (std::size_t r = 0; r < reps; ++r) {
            try {
                PeakScope scope;
                const auto t0 = std::chrono::steady_clock::now();
                evals = body();
                const double ms =
                    std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                bytes = scope.peak_bytes();
                best_ms = r == 0 ? ms : std::min(best_ms, ms);
            } catch (const SolverError& e) {
                status = e.kind() == SolverError::Kind::budget_exceeded ? "budget_exceeded" : "solver_error";
                break;
            } catch (const AdaptError& e) {
                status = e.kind() == AdaptError::Kind::horizon_exceeds_cap ? "horizon_exceeds_cap"
                                                                           : "memory_budget_exceeded";
                break;
            }
        }
        csv << method << ',' << h.T << ',' << h.steps << ',' << bytes << ',' << std::fixed
            << std::setprecision(3) << best_ms << std::defaultfloat << ',' << evals << ',' << status << '\n';
    };

    for (const auto& h : horizons) {
        MetaParams m = meta;
        m.log_T = std::log(h.T);
        SolverConfig euler;
        euler.method = Method::euler;
        euler.fixed_step = 0.01;
        euler.max_evals = o.max_evals;
        SolverConfig dopri;
        dopri.rtol = o.rtol;
        dopri.atol = o.atol;
        dopri.max_evals = o.max_evals;
        row("comln_euler", h, [&] { return task_metagrads(m, ep, loss, euler).stats.rhs_evals; });
        row("comln_dopri5", h, [&] { return task_metagrads(m, ep, loss, dopri).stats.rhs_evals; });
        row("bptt", h, [&] {
            bptt_metagrads(m, ep, loss, 0.01, h.steps);
            return h.steps;
        });
    }
    if (o.out.empty()) {
        std::cout << csv.str();
    } else {
        std::ofstream f(o.out);
        if (!f)
            throw std::runtime_error("cannot write '" + o.out + "'");
        f << csv.str();
        std::cout << "wrote " << o.out << '\n';
    }
    return kOk;
}

// ---------------------------------------------------------------------------

struct DemoOptions {
    std::string eigs = "1,10";
    std::string w0 = "";
    double T = 5.0;
    double rtol = 1e-6, atol = 1e-8;
    std::size_t samples = 51;
    std::string out = "adjoint_demo.csv";
};

int run_adjoint_demo(const DemoOptions& o) {
    const auto eigs = parse_doubles(o.eigs, "--eigs");
    auto w0 = o.w0.empty() ? std::vector<double>(eigs.size(), 1.0) : parse_doubles(o.w0, "--w0");
    if (eigs.empty() || w0.size() != eigs.size())
        throw UsageError("--eigs and --w0 must have the same, non-zero length");
    QuadraticSpec spec;
    spec.eigenvalues = Eigen::Map<const Vector>(eigs.data(), static_cast<Eigen::Index>(eigs.size()));
    spec.w0 = Eigen::Map<const Vector>(w0.data(), static_cast<Eigen::Index>(w0.size()));
    spec.T = o.T;
    try {
        spec.validate();
    } catch (const OracleError& e) {
        throw UsageError(e.what());
    }
    SolverConfig solver;
    solver.rtol = o.rtol;
    solver.atol = o.atol;
    const AdjointReport rep = adjoint_instability_demo(spec, solver, o.samples);

    std::ofstream csv(o.out);
    if (!csv)
        throw std::runtime_error("cannot write '" + o.out + "'");
    csv << std::setprecision(17) << "block,t";
    for (Eigen::Index i = 0; i < spec.w0.size(); ++i) csv << ",w" << i;
    for (Eigen::Index i = 0; i < spec.w0.size(); ++i) csv << ",exact" << i;
    csv << '\n';
    auto block = [&](const char* name, const Matrix& traj) {
        for (std::size_t r = 0; r < rep.times.size(); ++r) {
            const auto ri = static_cast<Eigen::Index>(r);
            csv << name << ',' << rep.times[r];
            for (Eigen::Index i = 0; i < traj.cols(); ++i) csv << ',' << traj(ri, i);
            for (Eigen::Index i = 0; i < traj.cols(); ++i) csv << ',' << rep.exact(ri, i);
            csv << '\n';
        }
    };
    block("forward", rep.forward);
    block("backward", rep.backward);

    std::cout << std::scientific << std::setprecision(6) << "forward_err " << rep.forward_err << "\nbackward_err "
              << rep.backward_err << "\nratio " << rep.ratio << "\ntrajectories written to " << o.out << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

int run_gen_tasks(const cli::RunConfig& rc, const std::string& out) {
    std::vector<Episode> episodes;
    episodes.reserve(rc.count);
    for (std::size_t i = 0; i < rc.count; ++i)
        episodes.push_back(sample_episode(rc.tasks, i));
    write_episodes(out, episodes);
    std::cout << "wrote " << rc.count << " episodes (N=" << rc.tasks.ways << ", k=" << rc.tasks.shots
              << ", k_test=" << rc.tasks.test_shots << ", d=" << rc.tasks.input_dim << ") to " << out << '\n';
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continuous-time meta-learning: training, gradient checks and benchmarks"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "run", gen_out, fault;

    auto* train = app.add_subcommand("train", "meta-train on synthetic or file-backed episodes");
    train->add_option("--config", config_path, "JSON run configuration")->required();
    train->add_option("--out", out_dir, "output directory");
    Overrides train_ov;
    train_ov.attach(train);

    auto* check = app.add_subcommand("grad-check", "compare meta-gradients with finite differences and BPTT");
    check->add_option("--config", config_path, "JSON run configuration");
    check->add_option("--inject-fault", fault)->group("");
    Overrides check_ov;
    check_ov.attach(check);

    BenchOptions bench_opts;
    auto* bench = app.add_subcommand("bench", "memory / runtime against the horizon");
    bench->add_option("--mode", bench_opts.mode, "memory or runtime");
    bench->add_option("--horizons", bench_opts.horizons, "comma-separated T=<t> or steps=<k> tokens");
    bench->add_option("--ways", bench_opts.ways);
    bench->add_option("--shots", bench_opts.shots);
    bench->add_option("--dim", bench_opts.dim);
    bench->add_option("--repeats", bench_opts.repeats, "timing repeats in runtime mode");
    bench->add_option("--max-evals", bench_opts.max_evals);
    bench->add_option("--rtol", bench_opts.rtol);
    bench->add_option("--atol", bench_opts.atol);
    bench->add_option("--out", bench_opts.out, "CSV path (stdout if omitted)");

    DemoOptions demo;
    auto* adj = app.add_subcommand("adjoint-demo", "backward recomputation of a quadratic gradient flow");
    adj->add_option("--eigs", demo.eigs, "comma-separated curvature eigenvalues");
    adj->add_option("--w0", demo.w0, "initial point (default all ones)");
    adj->add_option("--T", demo.T);
    adj->add_option("--rtol", demo.rtol);
    adj->add_option("--atol", demo.atol);
    adj->add_option("--samples", demo.samples);
    adj->add_option("--out", demo.out, "trajectory CSV path");

    auto* gen = app.add_subcommand("gen-tasks", "write synthetic episodes in COMLN-EP v1 format");
    gen->add_option("--config", config_path, "JSON run configuration")->required();
    gen->add_option("--out", gen_out, "episode file")->required();
    Overrides gen_ov;
    gen_ov.attach(gen);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*train) {
            const auto cfg = config_for(config_path, train_ov, train);
            return run_train(cli::resolve(cfg), cfg, out_dir);
        }
        if (*check)
            return run_grad_check(cli::resolve(config_for(config_path, check_ov, check)), fault);
        if (*bench)
            return run_bench(bench_opts);
        if (*adj)
            return run_adjoint_demo(demo);
        if (*gen)
            return run_gen_tasks(cli::resolve(config_for(config_path, gen_ov, gen)), gen_out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kCheckFailed;
    }
    return kUsage;
}
