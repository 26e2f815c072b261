#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "deepm/cli.hpp"

using namespace deepm;
using namespace deepm::cli;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / "deepm_cli_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
    fs::path p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

nlohmann::json tiny_config() {
    return {
        {"data", {{"source", "synth"}, {"synth", {{"n_assets", 4}, {"n_days", 1100}, {"seed", 7}}}}},
        {"model", {{"d_model", 8}, {"heads", 2}, {"dropout", 0.2}}},
        {"train",
         {{"iterations", 3},
          {"batch_size", 6},
          {"microbatch", 3},
          {"seq_len", 63},
          {"burn_in_train", 21},
          {"burn_in_test", 21},
          {"learning_rate", 0.001},
          {"eval_every", 2}}},
        {"ensemble", {{"n_seeds", 2}, {"top_k", 1}}},
        {"split", {{"block_years", 2}, {"min_test_days", 60}}},
        {"backtest", {{"baselines", {"passive_equal_risk", "tsmom"}}}},
        {"seed", 3}};
}

int run_cmd(const std::string& cmd, const fs::path& cfg, const fs::path& out) {
    RunSpec rs;
    rs.command = cmd;
    rs.config_path = cfg.string();
    rs.out_dir = out.string();
    rs.jobs = 2;
    return cli::run(rs);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("strict config: unknown keys are hard errors listing valid keys") {
    CHECK_THROWS_AS(RunConfig::from_json({{"daat", {}}}), Error);
    try {
        RunConfig::from_json({{"model", {{"d_modle", 32}}}});
        CHECK(false);
    } catch (const Error& e) {
        std::string msg = e.what();
        CHECK(msg.find("d_modle") != std::string::npos);
        CHECK(msg.find("d_model") != std::string::npos);  // lists the valid keys
    }
    CHECK_THROWS_AS(RunConfig::from_json({{"loss", {{"tau", 0.2}, {"tua", 1}}}}), Error);
}

TEST_CASE("config round trip preserves the hash") {
    auto cfg = RunConfig::from_json(tiny_config());
    auto again = RunConfig::from_json(cfg.to_json());
    CHECK(cfg.config_hash() == again.config_hash());
    auto third = cfg;
    third.loss.tau = 0.5;
    CHECK(third.config_hash() != cfg.config_hash());
}

TEST_CASE("paper-scale flag restores the full protocol values") {
    auto cfg = RunConfig::from_json(tiny_config());
    cfg.apply_paper_scale();
    CHECK(cfg.ensemble.n_seeds == 50);
    CHECK(cfg.ensemble.top_k == 25);
    CHECK(cfg.train.iterations == 1000);
    CHECK(cfg.train.batch_size == 64);
    CHECK(cfg.train.learning_rate == 1e-4);
}

TEST_CASE("synth and features commands emit artifacts with hashes") {
    auto dir = fresh_dir("synth");
    auto cfg = write_config(dir, tiny_config());
    CHECK(run_cmd("synth", cfg, dir / "out") == 0);
    CHECK(fs::exists(dir / "out" / "prices.csv"));
    CHECK(fs::exists(dir / "out" / "universe.csv"));
    CHECK(fs::exists(dir / "out" / "graph_edges.csv"));
    CHECK(fs::exists(dir / "out" / "manifest.json"));
    auto manifest = nlohmann::json::parse(slurp(dir / "out" / "manifest.json"));
    CHECK(manifest.contains("config_hash"));
    CHECK(manifest.contains("data_hash"));

    CHECK(run_cmd("features", cfg, dir / "out") == 0);
    CHECK(fs::exists(dir / "out" / "features.bin"));
    CHECK(fs::exists(dir / "out" / "features_manifest.json"));
}

TEST_CASE("train then backtest then report produce a coherent artifact chain") {
    auto dir = fresh_dir("chain");
    auto cfg = write_config(dir, tiny_config());
    CHECK(run_cmd("train", cfg, dir / "out") == 0);
    CHECK(fs::exists(dir / "out" / "checkpoints"));
    auto manifest = nlohmann::json::parse(slurp(dir / "out" / "manifest.json"));
    REQUIRE(manifest.contains("train"));
    CHECK(manifest["train"].size() >= 1);

    CHECK(run_cmd("backtest", cfg, dir / "out") == 0);
    CHECK(fs::exists(dir / "out" / "metrics.csv"));
    CHECK(fs::exists(dir / "out" / "series" / "deepm.csv"));
    CHECK(fs::exists(dir / "out" / "series" / "tsmom.csv"));

    CHECK(run_cmd("report", cfg, dir / "out") == 0);
    CHECK(fs::exists(dir / "out" / "reports" / "table.txt"));

    // config hash is stamped into the metric table artifact
    auto metrics = slurp(dir / "out" / "metrics.csv");
    auto m2 = nlohmann::json::parse(slurp(dir / "out" / "manifest.json"));
    CHECK(metrics.find(m2["config_hash"].get<std::string>()) != std::string::npos);
    CHECK(metrics.find(m2["data_hash"].get<std::string>()) != std::string::npos);
}

TEST_CASE("train resumes from checkpoints instead of retraining") {
    auto dir = fresh_dir("resume");
    auto cfg = write_config(dir, tiny_config());
    CHECK(run_cmd("train", cfg, dir / "out") == 0);
    CHECK(run_cmd("train", cfg, dir / "out") == 0);
    auto manifest = nlohmann::json::parse(slurp(dir / "out" / "manifest.json"));
    bool resumed = false;
    for (const auto& b : manifest["train"])
        if (b.contains("resumed") && b["resumed"].get<bool>()) resumed = true;
    CHECK(resumed);
}

TEST_CASE("ablate runs the configured row matrix deterministically") {
    auto dir = fresh_dir("ablate");
    auto j = tiny_config();
    j["ablate"] = {{{"name", "full"}, {"overrides", nlohmann::json::object()}},
                   {{"name", "no_softmin"}, {"overrides", {{"loss", {{"lambda", 0.0}}}}}}};
    auto cfg = write_config(dir, j);
    CHECK(run_cmd("ablate", cfg, dir / "a1") == 0);
    CHECK(run_cmd("ablate", cfg, dir / "a2") == 0);
    auto t1 = slurp(dir / "a1" / "ablate_metrics.csv");
    auto t2 = slurp(dir / "a2" / "ablate_metrics.csv");
    CHECK(t1 == t2);  // deterministic across reruns
    // two rows, one metric line each, plus stamp and header
    CHECK(std::count(t1.begin(), t1.end(), '\n') == 4);
    CHECK(t1.find("full,") != std::string::npos);
    CHECK(t1.find("no_softmin,") != std::string::npos);
}

TEST_CASE("gamma sweep harness: K x gamma grid runs and orders deterministically") {
    auto dir = fresh_dir("gamma_sweep");
    auto j = tiny_config();
    nlohmann::json rows = nlohmann::json::array();
    for (double gamma : {0.0, 0.5, 1.0})
        for (int K : {1, 4}) {
            std::string name = "g" + std::to_string(static_cast<int>(gamma * 10)) + "_k" + std::to_string(K);
            rows.push_back({{"name", name},
                            {"overrides",
                             {{"loss", {{"gamma", gamma}}},
                              {"ensemble", {{"n_seeds", K}, {"top_k", K}}}}}});
        }
    j["ablate"] = rows;
    auto cfg = write_config(dir, j);
    REQUIRE(run_cmd("ablate", cfg, dir / "s1") == 0);
    REQUIRE(run_cmd("ablate", cfg, dir / "s2") == 0);
    auto t1 = slurp(dir / "s1" / "ablate_metrics.csv");
    CHECK(t1 == slurp(dir / "s2" / "ablate_metrics.csv"));
    CHECK(std::count(t1.begin(), t1.end(), '\n') == 8);  // stamp + header + 6 rows
    for (const auto& row : rows)
        CHECK(t1.find(row["name"].get<std::string>() + ",") != std::string::npos);
}

TEST_CASE("unknown command exits nonzero") {
    RunSpec rs;
    rs.command = "bogus";
    CHECK(cli::run(rs) == 2);
}
