#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "comln/tasks.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
    static const fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / "comln_cli_tests";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

struct Run {
    int code;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Run run(const std::string& args) {
    const fs::path out = workdir() / "stdout.txt", err = workdir() / "stderr.txt";
    const std::string cmd = "cd '" + workdir().string() + "' && '" COMLN_BIN "' " + args + " > '" + out.string() +
                            "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

fs::path write_config(const std::string& name, const nlohmann::json& j) {
    const fs::path p = workdir() / name;
    std::ofstream(p) << j.dump(2);
    return p;
}

nlohmann::json small_config() {
    return {{"train", {{"iterations", 4}, {"meta_batch_size", 2}, {"eval_episodes", 5}, {"eval_every", 2},
                       {"max_T", 10.0}}},
            {"tasks", {{"ways", 3}, {"input_dim", 5}, {"test_shots", 4}, {"count", 3}}}};
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string l;
    while (std::getline(in, l))
        if (!l.empty()) out.push_back(l);
    return out;
}

// drop the last CSV column (wall time)
std::string without_wall(const std::string& csv) {
    std::string out;
    for (const auto& l : lines(csv))
        out += l.substr(0, l.rfind(',')) + "\n";
    return out;
}

} // namespace

TEST_CASE("usage errors") {
    Run r = run("train --config nowhere.json");
    CHECK(r.code == 2);
    CHECK(r.err.find("nowhere.json") != std::string::npos);

    nlohmann::json bad = small_config();
    bad["train"]["learning_rate"] = 0.1;
    r = run("train --config " + write_config("bad.json", bad).string());
    CHECK(r.code == 2);
    CHECK(r.err.find("learning_rate") != std::string::npos);

    nlohmann::json wrong = small_config();
    wrong["train"]["iterations"] = "many";
    CHECK(run("train --config " + write_config("wrong.json", wrong).string()).code == 2);

    CHECK(run("frobnicate").code == 2);
    CHECK(run("train").code == 2);
    CHECK(run("train --config " + write_config("ok.json", small_config()).string() + " --iterations abc").code == 2);
}

TEST_CASE("train") {
    const fs::path cfg = write_config("train.json", small_config());
    SUBCASE("zero iterations") {
        const Run r = run("train --config " + cfg.string() + " --iterations 0 --out zero");
        CHECK(r.code == 0);
        CHECK(fs::exists(workdir() / "zero" / "checkpoint.ckpt"));
        CHECK(fs::exists(workdir() / "zero" / "config.json"));
        CHECK(lines(slurp(workdir() / "zero" / "metrics.csv")).size() == 1);
        const auto resolved = nlohmann::json::parse(slurp(workdir() / "zero" / "config.json"));
        CHECK(resolved["train"]["iterations"] == 0);
        CHECK(resolved["tasks"]["ways"] == 3);
    }
    SUBCASE("reruns are identical apart from wall time") {
        REQUIRE(run("train --config " + cfg.string() + " --out a").code == 0);
        REQUIRE(run("train --config " + cfg.string() + " --out b").code == 0);
        const std::string ma = slurp(workdir() / "a" / "metrics.csv");
        CHECK(lines(ma).size() == 5);
        CHECK(lines(ma)[0].substr(lines(ma)[0].rfind(',') + 1) == "wall_ms");
        CHECK(without_wall(ma) == without_wall(slurp(workdir() / "b" / "metrics.csv")));
        CHECK(slurp(workdir() / "a" / "checkpoint.ckpt") == slurp(workdir() / "b" / "checkpoint.ckpt"));
        CHECK(slurp(workdir() / "a" / "summary.json") == slurp(workdir() / "b" / "summary.json"));
    }
    SUBCASE("solver failure is reported") {
        const Run r = run("train --config " + cfg.string() + " --out fail --max_evals 2");
        CHECK(r.code == 1);
        CHECK_FALSE(r.err.empty());
    }
}

TEST_CASE("grad-check") {
    SUBCASE("default instance passes") {
        const Run r = run("grad-check --seeds 2");
        CHECK(r.code == 0);
        CHECK(r.out.find("PASS: all components") != std::string::npos);
    }
    SUBCASE("one seed gives one row per component") {
        const Run r = run("grad-check --seeds 1");
        CHECK(r.code == 0);
        int rows = 0;
        for (const auto& l : lines(r.out))
            rows += l.rfind("0 ", 0) == 0;
        CHECK(rows == 4);
        nlohmann::json mlp = {{"model", {{"layers", "6:tanh,4"}}}};
        const Run r2 = run("grad-check --seeds 1 --config " + write_config("mlp.json", mlp).string());
        CHECK(r2.code == 0);
        rows = 0;
        for (const auto& l : lines(r2.out))
            rows += l.rfind("0 ", 0) == 0;
        CHECK(rows == 5);
    }
    SUBCASE("a corrupted sign is caught") {
        for (const char* c : {"W0", "phi_train", "phi_test", "T"}) {
            const Run r = run(std::string("grad-check --seeds 1 --inject-fault ") + c);
            CHECK(r.code == 1);
            CHECK(r.err.find(std::string("component ") + c + ", seed 0") != std::string::npos);
        }
    }
}

TEST_CASE("bench") {
    const Run r = run("bench --mode memory --horizons steps=10,steps=100,T=10 --dim 16 --out bench.csv");
    REQUIRE(r.code == 0);
    const auto rows = lines(slurp(workdir() / "bench.csv"));
    REQUIRE(rows.size() == 1 + 3 * 3);
    CHECK(rows[0] == "method,T,steps,bytes,wall_ms,rhs_evals,status");
    std::map<std::string, std::vector<long long>> bytes;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        std::vector<std::string> f;
        std::istringstream in(rows[i]);
        std::string x;
        while (std::getline(in, x, ',')) f.push_back(x);
        REQUIRE(f.size() == 7);
        CHECK(f[6] == "ok");
        bytes[f[0]].push_back(std::stoll(f[3]));
    }
    for (const char* m : {"comln_euler", "comln_dopri5"}) {
        REQUIRE(bytes[m].size() == 3);
        CHECK(bytes[m][0] == bytes[m][1]);
        CHECK(bytes[m][1] == bytes[m][2]);
    }
    REQUIRE(bytes["bptt"].size() == 3);
    CHECK(bytes["bptt"][2] > bytes["bptt"][1]);
    CHECK(bytes["bptt"][1] > bytes["bptt"][0]);

    const Run budget = run("bench --horizons steps=1000 --dim 16 --max-evals 50 --out budget.csv");
    CHECK(budget.code == 0);
    CHECK(slurp(workdir() / "budget.csv").find("budget_exceeded") != std::string::npos);
    CHECK(run("bench --horizons nonsense").code == 2);
    CHECK(run("bench --mode speed").code == 2);
}

TEST_CASE("adjoint-demo") {
    SUBCASE("defaults") {
        const Run r = run("adjoint-demo --out demo.csv");
        REQUIRE(r.code == 0);
        CHECK(r.out.find("ratio") != std::string::npos);
        const auto rows = lines(slurp(workdir() / "demo.csv"));
        REQUIRE(rows.size() == 1 + 2 * 51);
        std::vector<std::string> fwd_t, bwd_t;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const std::string block = rows[i].substr(0, rows[i].find(','));
            const std::string rest = rows[i].substr(rows[i].find(',') + 1);
            const std::string t = rest.substr(0, rest.find(','));
            (block == "forward" ? fwd_t : bwd_t).push_back(t);
        }
        CHECK(fwd_t.size() == 51);
        CHECK(fwd_t == bwd_t);
    }
    SUBCASE("tiny horizon") {
        const Run r = run("adjoint-demo --T 1e-6 --out tiny.csv");
        CHECK(r.code == 0);
    }
    SUBCASE("invalid eigenvalues") {
        CHECK(run("adjoint-demo --eigs 1,-2").code == 2);
    }
}

TEST_CASE("gen-tasks") {
    const fs::path cfg = write_config("gen.json", small_config());
    REQUIRE(run("gen-tasks --config " + cfg.string() + " --out one.ep").code == 0);
    REQUIRE(run("gen-tasks --config " + cfg.string() + " --out two.ep").code == 0);
    CHECK(slurp(workdir() / "one.ep") == slurp(workdir() / "two.ep"));
    const auto eps = comln::load_episodes((workdir() / "one.ep").string());
    REQUIRE(eps.size() == 3);
    comln::TaskGenConfig t;
    t.ways = 3;
    t.input_dim = 5;
    t.test_shots = 4;
    for (std::uint64_t i = 0; i < 3; ++i)
        CHECK(eps[i] == comln::sample_episode(t, i));

    REQUIRE(run("gen-tasks --config " + cfg.string() + " --count 0 --out none.ep").code == 0);
    CHECK(comln::load_episodes((workdir() / "none.ep").string()).empty());

    // training from the materialized file
    const Run r = run("train --config " + cfg.string() + " --episodes_file one.ep --out from_file");
    CHECK(r.code == 0);
    CHECK(run("gen-tasks --config " + cfg.string()).code == 2);
}
