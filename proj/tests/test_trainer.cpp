#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "comln/trainer.hpp"
#include "helpers.hpp"

using namespace comln;
namespace fs = std::filesystem;

namespace {

TaskGenConfig small_tasks(double noise = 0.7) {
    TaskGenConfig t;
    t.ways = 3;
    t.shots = 1;
    t.test_shots = 4;
    t.input_dim = 5;
    t.noise_std = noise;
    t.seed = 4;
    return t;
}

EpisodeSource source_for(const TaskGenConfig& t) {
    return [t](std::uint64_t i) { return sample_episode(t, i); };
}

TrainConfig quick_config() {
    TrainConfig c;
    c.iterations = 6;
    c.meta_batch_size = 2;
    c.eval_every = 2;
    c.init_scale = 0.1;
    c.initial_T = 0.5;
    c.max_T = 10.0;
    return c;
}

std::string temp_path(const std::string& name) {
    return (fs::temp_directory_path() / ("comln_trainer_" + name)).string();
}

std::string read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_all(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
}

CheckpointError::Kind load_kind(const std::string& path) {
    try {
        load_checkpoint(path);
    } catch (const CheckpointError& e) {
        return e.kind();
    }
    FAIL("checkpoint loaded");
    return CheckpointError::Kind::io;
}

MetaGradients synthetic(const MetaParams& m, std::mt19937_64& rng) {
    MetaGradients g;
    g.grad_W0 = testutil::random_matrix(m.W0.rows(), m.W0.cols(), rng);
    g.grad_embedding = zeros_like(m.embedding);
    std::vector<double> v = flatten(g.grad_embedding);
    std::normal_distribution<double> n;
    for (double& x : v) x = n(rng);
    assign(g.grad_embedding, v);
    g.grad_logT = n(rng);
    return g;
}

} // namespace

TEST_CASE("null learning rate leaves parameters alone") {
    TrainConfig c = quick_config();
    c.lr = 0.0;
    const TrainState st = initial_state(c, 5, 3);
    const TrainResult r = meta_train(c, source_for(small_tasks()), st);
    CHECK(r.meta == st.meta);
    CHECK(r.metrics.size() == 6);
}

TEST_CASE("single plain SGD step") {
    TrainConfig c = quick_config();
    c.iterations = 1;
    c.meta_batch_size = 1;
    c.momentum = 0.0;
    c.lr_schedule.emplace();
    const TrainState st = initial_state(c, 5, 3);
    const auto src = source_for(small_tasks());
    AdaptLimits lim;
    lim.max_T = c.max_T;
    const MetaGradients g = task_metagrads(st.meta, src(0), {}, c.solver, lim);
    const TrainResult r = meta_train(c, src, st);
    const Matrix expect = st.meta.W0 - c.lr * g.grad_W0;
    CHECK(r.meta.W0 == expect);
    CHECK(r.meta.log_T == st.meta.log_T - c.lr * g.grad_logT);
}

TEST_CASE("momentum recurrences") {
    std::mt19937_64 rng(51);
    for (bool nesterov : {true, false}) {
        TrainConfig c;
        c.nesterov = nesterov;
        c.momentum = 0.9;
        c.layers = {{3, Activation::tanh}, {2, Activation::identity}};
        TrainState st = initial_state(c, 4, 2);
        const std::vector<double> p0 = [&] {
            std::vector<double> v;
            for (Eigen::Index i = 0; i < st.meta.W0.size(); ++i) v.push_back(st.meta.W0.data()[i]);
            for (double x : flatten(st.meta.embedding)) v.push_back(x);
            v.push_back(st.meta.log_T);
            return v;
        }();
        std::vector<double> p = p0, vel(p0.size(), 0.0);
        for (int step = 0; step < 8; ++step) {
            const double lr = 0.05 * (step + 1);
            const MetaGradients g = synthetic(st.meta, rng);
            std::vector<double> gv;
            for (Eigen::Index i = 0; i < g.grad_W0.size(); ++i) gv.push_back(g.grad_W0.data()[i]);
            for (double x : flatten(g.grad_embedding)) gv.push_back(x);
            gv.push_back(g.grad_logT);
            for (std::size_t k = 0; k < p.size(); ++k) {
                vel[k] = 0.9 * vel[k] + gv[k];
                p[k] -= nesterov ? lr * (gv[k] + 0.9 * vel[k]) : lr * vel[k];
            }
            apply_update(st, g, c, lr);
        }
        std::vector<double> got;
        for (Eigen::Index i = 0; i < st.meta.W0.size(); ++i) got.push_back(st.meta.W0.data()[i]);
        for (double x : flatten(st.meta.embedding)) got.push_back(x);
        got.push_back(st.meta.log_T);
        double worst = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) worst = std::max(worst, std::abs(p[k] - got[k]));
        CHECK(worst <= 1e-14);
    }
}

TEST_CASE("horizon stays positive and capped") {
    TrainConfig c;
    c.max_T = 7.0;
    TrainState st = initial_state(c, 3, 2);
    MetaGradients g;
    g.grad_W0 = Matrix::Zero(2, 3);
    g.grad_logT = -1e6;
    apply_update(st, g, c, 0.1);
    CHECK(st.meta.log_T == std::log(7.0));
    st = initial_state(c, 3, 2);
    g.grad_logT = 1e3;
    apply_update(st, g, c, 0.1);
    CHECK(st.meta.T() > 0.0);
    CHECK(st.meta.log_T < std::log(c.initial_T));
}

TEST_CASE("batch averaging") {
    std::mt19937_64 rng(52);
    TrainConfig c;
    c.layers = {{2, Activation::identity}};
    const MetaParams m = init_meta(c, 3, 2);
    std::vector<MetaGradients> b;
    for (int i = 0; i < 4; ++i) {
        b.push_back(synthetic(m, rng));
        b.back().grad_T = 0.25 * i;
    }
    const MetaGradients avg = average(b);
    CHECK(avg.grad_W0 == (b[0].grad_W0 + b[1].grad_W0 + b[2].grad_W0 + b[3].grad_W0) / 4.0);
    CHECK(avg.grad_logT == (b[0].grad_logT + b[1].grad_logT + b[2].grad_logT + b[3].grad_logT) / 4.0);
    CHECK(avg.grad_T == 0.375);
    const auto e = flatten(avg.grad_embedding);
    const auto e0 = flatten(b[0].grad_embedding), e1 = flatten(b[1].grad_embedding),
               e2 = flatten(b[2].grad_embedding), e3 = flatten(b[3].grad_embedding);
    for (std::size_t k = 0; k < e.size(); ++k)
        CHECK(e[k] == (e0[k] + e1[k] + e2[k] + e3[k]) / 4.0);
    CHECK_THROWS(average({}));
}

TEST_CASE("learning rate schedule") {
    TrainConfig c;
    c.iterations = 100;
    CHECK(c.lr_at(0) == 0.1);
    CHECK(c.lr_at(59) == 0.1);
    CHECK(c.lr_at(60) == doctest::Approx(0.01));
    CHECK(c.lr_at(85) == doctest::Approx(0.001));
    c.lr_schedule = std::vector<std::pair<std::size_t, double>>{{10, 0.5}};
    CHECK(c.lr_at(9) == 0.1);
    CHECK(c.lr_at(99) == doctest::Approx(0.05));
    c.lr_schedule.emplace();
    CHECK(c.lr_at(99) == 0.1);
}

TEST_CASE("config validation") {
    TrainConfig c;
    c.momentum = 1.0;
    CHECK_THROWS(c.validate());
    c = {};
    c.lr = -1;
    CHECK_THROWS(c.validate());
    c = {};
    c.initial_T = 200;
    CHECK_THROWS(c.validate());
    c = {};
    c.layers = {{4, Activation::relu}};
    CHECK_THROWS(c.validate());
}

TEST_CASE("meta-test") {
    const TaskGenConfig t = small_tasks();
    const Episode ep = sample_episode(t, 0);
    SUBCASE("tie policy at zero logits") {
        MetaParams m{Matrix::Zero(3, 5), EmbeddingParams{5, {}}, std::log(1e-12)};
        const TestResult r = meta_test(m, ep, {}, {});
        CHECK(r.accuracy == doctest::Approx(1.0 / 3.0));
        CHECK(r.loss == doctest::Approx(std::log(3.0)).epsilon(1e-9));
    }
    SUBCASE("tracking does not matter") {
        TrainConfig c = quick_config();
        const MetaParams m = init_meta(c, 5, 3);
        for (std::uint64_t i = 0; i < 5; ++i) {
            const Episode e = sample_episode(t, i);
            CHECK(meta_test(m, e, {}, {}, false).accuracy == meta_test(m, e, {}, {}, true).accuracy);
        }
    }
    SUBCASE("noiseless episodes after training") {
        const TaskGenConfig clean = small_tasks(0.0);
        TrainConfig c = quick_config();
        c.iterations = 20;
        const TrainResult r = meta_train(c, source_for(clean), initial_state(c, 5, 3));
        for (std::uint64_t i = 1000; i < 1010; ++i)
            CHECK(meta_test(r.meta, sample_episode(clean, i), {}, {}).accuracy == 1.0);
    }
    SUBCASE("mismatched episode") {
        MetaParams m{Matrix::Zero(3, 4), EmbeddingParams{4, {}}, 0.0};
        CHECK_THROWS_AS(meta_test(m, ep, {}, {}), DimensionError);
    }
}

TEST_CASE("training loop") {
    const auto src = source_for(small_tasks());
    SUBCASE("metrics and horizon movement") {
        TrainConfig c = quick_config();
        std::vector<std::size_t> seen;
        const TrainResult r = meta_train(c, src, initial_state(c, 5, 3), [&](const MetricsRow& row) {
            seen.push_back(row.iteration);
        });
        REQUIRE(r.metrics.size() == 6);
        for (std::size_t i = 0; i < 6; ++i) {
            CHECK(r.metrics[i].iteration == i);
            CHECK(seen[i] == i);
            CHECK(r.metrics[i].T > 0.0);
            CHECK(r.metrics[i].accuracy >= 0.0);
            CHECK(r.metrics[i].accuracy <= 1.0);
        }
        CHECK(r.meta.log_T != std::log(c.initial_T));
        const std::string line = to_csv(r.metrics[0]);
        const std::string header = metrics_header();
        CHECK(std::count(line.begin(), line.end(), ',') == std::count(header.begin(), header.end(), ','));
    }
    SUBCASE("thread count does not change results") {
        TrainConfig c = quick_config();
        c.meta_batch_size = 4;
        const MetaParams a = meta_train(c, src, initial_state(c, 5, 3)).meta;
        c.threads = 3;
        const MetaParams b = meta_train(c, src, initial_state(c, 5, 3)).meta;
        CHECK(a == b);
    }
    SUBCASE("a failing task aborts with a diagnostic") {
        TrainConfig c = quick_config();
        c.meta_batch_size = 4;
        EpisodeSource bad = [&](std::uint64_t i) {
            Episode e = src(i);
            if (i == 5) e.train.features(0, 0) = std::nan("");
            return e;
        };
        bool thrown = false;
        try {
            meta_train(c, bad, initial_state(c, 5, 3));
        } catch (const TrainError& e) {
            thrown = true;
            const std::string msg = e.what();
            CHECK(msg.find("iteration 1") != std::string::npos);
            CHECK(msg.find("task 1") != std::string::npos);
        }
        CHECK(thrown);
    }
}

TEST_CASE("checkpoints") {
    TrainConfig c = quick_config();
    c.layers = {{4, Activation::tanh}, {3, Activation::identity}};
    const MetaParams m = init_meta(c, 5, 3);
    const std::string path = temp_path("rt.ckpt");

    SUBCASE("round trip") {
        MetaParams mm = m;
        mm.log_T = 0.1234567890123;
        save_checkpoint(mm, path);
        CHECK(load_checkpoint(path) == mm);
        CHECK(load_checkpoint(path, 3, 3) == mm);
        const TrainState st = load_train_state(path);
        CHECK(st.iteration == 0);
        CHECK(st.velocity.W0.norm() == 0.0);
    }
    SUBCASE("wrong declared dimensions") {
        save_checkpoint(m, path);
        try {
            load_checkpoint(path, 4, 3);
            FAIL("loaded");
        } catch (const CheckpointError& e) {
            CHECK(e.kind() == CheckpointError::Kind::version_mismatch);
        }
    }
    SUBCASE("damaged files") {
        save_checkpoint(m, path);
        const std::string bytes = read_all(path);
        const std::string p = temp_path("bad.ckpt");
        write_all(p, bytes.substr(0, bytes.size() - 5));
        CHECK(load_kind(p) == CheckpointError::Kind::corrupt_payload);
        write_all(p, bytes + "junk");
        CHECK(load_kind(p) == CheckpointError::Kind::corrupt_payload);
        std::string v2 = bytes;
        v2.replace(0, 12, "COMLN-CKPT 2");
        write_all(p, v2);
        CHECK(load_kind(p) == CheckpointError::Kind::version_mismatch);
        write_all(p, "hello world\n");
        CHECK(load_kind(p) == CheckpointError::Kind::version_mismatch);
        try {
            load_checkpoint(temp_path("missing.ckpt"));
            FAIL("loaded");
        } catch (const CheckpointError& e) {
            CHECK(e.kind() == CheckpointError::Kind::io);
        }
    }
    SUBCASE("resume is bit-identical") {
        const auto src = source_for(small_tasks());
        TrainConfig straight = quick_config();
        straight.lr_schedule = std::vector<std::pair<std::size_t, double>>{{4, 0.5}};
        const MetaParams full = meta_train(straight, src, initial_state(straight, 5, 3)).meta;

        TrainConfig first = straight;
        first.iterations = 3;
        first.eval_every = 3;
        first.checkpoint_path = temp_path("resume.ckpt");
        meta_train(first, src, initial_state(first, 5, 3));
        TrainState st = load_train_state(first.checkpoint_path);
        CHECK(st.iteration == 3);
        const MetaParams resumed = meta_train(straight, src, st).meta;
        CHECK(resumed == full);
    }
}
