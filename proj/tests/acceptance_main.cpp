// Acceptance gate: one pass/fail line per criterion, nonzero exit on failure.
// Criteria 1-8 and 10 run the shared verify suites; 9 trains the causal-sieve
// ordering experiment on synthetic data; 11 exercises end-to-end determinism
// through the CLI surfaces.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include "deepm/baselines.hpp"
#include "deepm/cli.hpp"
#include "deepm/verify.hpp"

using namespace deepm;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& name, bool pass, const std::string& detail) {
    std::cout << (pass ? "[PASS]" : "[FAIL]") << " criterion " << criterion << " (" << name
              << "): " << detail << std::endl;
    if (!pass) ++g_failures;
}

void run_check(int criterion, const verify::CheckResult& r) {
    report(criterion, r.name, r.pass, r.detail);
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// criterion 9: causal-sieve ordering on a planted lead-lag panel
// ---------------------------------------------------------------------------

struct Criterion9Result {
    int wins = 0, seeds = 0;
    double ensemble_sr = 0.0, tsmom_sr = 0.0;
    double ens_turnover = 0.0, mean_member_turnover = 0.0;
    std::vector<double> full_sr, ablated_sr;
    double runtime_s = 0.0;
};

double annualized_sharpe(const std::vector<double>& r) {
    double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    double var = 0.0;
    for (double x : r) var += (x - mean) * (x - mean);
    var /= static_cast<double>(r.size() - 1);
    return var > 0.0 ? std::sqrt(252.0) * mean / std::sqrt(var) : 0.0;
}

Criterion9Result run_causal_sieve() {
    auto t0 = std::chrono::steady_clock::now();
    data::SynthSpec spec;
    spec.n_assets = 6;
    spec.n_days = 4000;
    spec.seed = 2026;
    spec.trend_vol = 0.003;
    spec.pairs = {{0, 1, 0.8}, {2, 3, 0.8}, {4, 5, 0.8}};
    auto panel = data::synth_generate(spec);
    auto ds = train::Dataset::build(std::move(panel),
                                    graph::synth_universe(6, spec.effective_groups()),
                                    data::FeatureSubset::RawMomentum);

    train::DateRange train_range{252, 2268}, val_range{2268, 2520}, test_range{2520, 4000};

    policy::PolicyConfig full;
    full.d_model = 16;
    full.heads = 2;
    full.dropout = 0.3;
    full.protocol = policy::Protocol::DirectedDelay;
    full.n_assets = ds.N;
    full.n_features = ds.features.n_features;
    policy::PolicyConfig ablated = full;
    ablated.cross_attn = false;
    ablated.graph_mode = policy::GraphMode::None;

    objective::LossConfig lcfg;  // tau 0.2, lambda 0.1, gamma 0.5
    lcfg.burn_in = 21;
    train::TrainConfig tcfg;
    tcfg.iterations = 150;
    tcfg.learning_rate = 1e-3;  // desk-scale iteration budget needs larger steps
    tcfg.weight_decay = 1e-3;
    tcfg.batch_size = 16;
    tcfg.microbatch = 8;
    tcfg.seq_len = 84;
    tcfg.burn_in_train = 21;
    tcfg.burn_in_test = 63;
    tcfg.eval_every = 5;
    tcfg.patience = 12;
    tcfg.stop_burn_in = 30;

    const int n_seeds = 5;
    struct Job {
        int seed;
        bool is_full;
    };
    std::vector<Job> jobs;
    for (int s = 1; s <= n_seeds; ++s) {
        jobs.push_back({s, true});
        jobs.push_back({s, false});
    }
    std::vector<train::TrainedSeed> trained(jobs.size());
    std::atomic<size_t> next{0};
    int workers = std::max(1u, std::thread::hardware_concurrency());
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
            while (true) {
                size_t k = next.fetch_add(1);
                if (k >= jobs.size()) break;
                const auto& cfg = jobs[k].is_full ? full : ablated;
                trained[k] = train::train_seed(static_cast<uint64_t>(jobs[k].seed), ds, train_range,
                                               val_range, cfg, lcfg, tcfg);
            }
        });
    for (auto& th : pool) th.join();

    Criterion9Result res;
    res.seeds = n_seeds;
    auto eval_sr = [&](policy::PolicyModel& model, std::vector<double>* turnover_out,
                       std::vector<double>* positions_out) {
        auto pos = train::forward_positions(model, ds, test_range, tcfg.seq_len, tcfg.burn_in_test);
        backtest::SimInputs si;
        si.panel = &ds.panel;
        si.vol = &ds.vol;
        si.exist = &ds.features.exist;
        si.cost = ds.cost;
        si.day0 = test_range.begin;
        si.days = test_range.len();
        auto rep = backtest::simulate(pos, si);
        if (turnover_out) *turnover_out = rep.turnover;
        if (positions_out) *positions_out = pos;
        return annualized_sharpe(rep.net);
    };

    std::vector<std::vector<double>> member_positions;
    double member_turnover_sum = 0.0;
    for (int s = 0; s < n_seeds; ++s) {
        auto& full_seed = trained[static_cast<size_t>(2 * s)];
        auto& abl_seed = trained[static_cast<size_t>(2 * s + 1)];
        if (!full_seed.ok || !abl_seed.ok) {
            res.full_sr.push_back(-99);
            res.ablated_sr.push_back(99);
            continue;
        }
        std::vector<double> turn, pos;
        double fs = eval_sr(full_seed.model, &turn, &pos);
        double as = eval_sr(abl_seed.model, nullptr, nullptr);
        res.full_sr.push_back(fs);
        res.ablated_sr.push_back(as);
        if (fs > as) ++res.wins;
        member_positions.push_back(pos);
        member_turnover_sum += std::accumulate(turn.begin(), turn.end(), 0.0);
    }
    double mean_member_turnover =
        member_turnover_sum / std::max<size_t>(1, member_positions.size());

    auto ens_pos = train::average_positions(member_positions);
    backtest::SimInputs si;
    si.panel = &ds.panel;
    si.vol = &ds.vol;
    si.exist = &ds.features.exist;
    si.cost = ds.cost;
    si.day0 = test_range.begin;
    si.days = test_range.len();
    auto ens_rep = backtest::simulate(ens_pos, si);
    res.ensemble_sr = annualized_sharpe(ens_rep.net);
    res.ens_turnover = std::accumulate(ens_rep.turnover.begin(), ens_rep.turnover.end(), 0.0);
    res.mean_member_turnover = mean_member_turnover;

    baselines::BaselineConfig bc;
    bc.kind = baselines::BaselineKind::Tsmom;
    auto tsmom_pos = baselines::run_baseline(bc, ds.panel, ds.vol, ds.features.exist,
                                             test_range.begin, test_range.len());
    auto tsmom_rep = backtest::simulate(tsmom_pos, si);
    res.tsmom_sr = annualized_sharpe(tsmom_rep.net);
    res.runtime_s = elapsed_s(t0);
    return res;
}

// ---------------------------------------------------------------------------
// criterion 11: byte-identical CLI reruns
// ---------------------------------------------------------------------------

bool run_determinism_chain(std::string& detail) {
    fs::path base = fs::temp_directory_path() / "deepm_acceptance";
    fs::remove_all(base);
    fs::create_directories(base);

    // verify twice: byte-identical reports
    cli::RunSpec vs;
    vs.command = "verify";
    vs.out_dir = (base / "verify1").string();
    if (cli::run(vs) != 0) {
        detail = "cli verify reported failures";
        return false;
    }
    cli::RunSpec vs2 = vs;
    vs2.out_dir = (base / "verify2").string();
    if (cli::run(vs2) != 0) {
        detail = "second cli verify reported failures";
        return false;
    }
    if (read_file(base / "verify1" / "verify_report.txt") !=
        read_file(base / "verify2" / "verify_report.txt")) {
        detail = "verify reports differ between consecutive runs";
        return false;
    }

    // fixed-seed train -> backtest -> report chain, twice, fresh dirs
    nlohmann::json cfg = {
        {"data", {{"source", "synth"},
                  {"synth", {{"n_assets", 4}, {"n_days", 1100}, {"seed", 77}}}}},
        {"model", {{"d_model", 8}, {"heads", 2}, {"dropout", 0.2}}},
        {"train", {{"iterations", 4}, {"batch_size", 6}, {"microbatch", 3},
                   {"seq_len", 63}, {"burn_in_train", 21}, {"burn_in_test", 21},
                   {"learning_rate", 0.001}, {"eval_every", 2}}},
        {"ensemble", {{"n_seeds", 2}, {"top_k", 1}}},
        {"split", {{"block_years", 2}, {"min_test_days", 60}}},
        {"backtest", {{"baselines", {"passive_equal_risk", "tsmom"}}}},
        {"seed", 5}};
    fs::path cfg_path = base / "chain.json";
    std::ofstream(cfg_path) << cfg.dump(2);

    auto chain = [&](const std::string& dir) -> bool {
        for (const char* cmd : {"train", "backtest", "report"}) {
            cli::RunSpec rs;
            rs.command = cmd;
            rs.config_path = cfg_path.string();
            rs.out_dir = dir;
            rs.jobs = 2;
            if (cli::run(rs) != 0) return false;
        }
        return true;
    };
    if (!chain((base / "chain1").string()) || !chain((base / "chain2").string())) {
        detail = "train/backtest/report chain failed";
        return false;
    }
    if (read_file(base / "chain1" / "metrics.csv") != read_file(base / "chain2" / "metrics.csv")) {
        detail = "metrics.csv differs between consecutive chains";
        return false;
    }
    if (read_file(base / "chain1" / "reports" / "table.txt") !=
        read_file(base / "chain2" / "reports" / "table.txt")) {
        detail = "report tables differ between consecutive chains";
        return false;
    }
    detail = "verify + train/backtest/report chains byte-identical across reruns";
    return true;
}

}  // namespace

int main() {
    std::cout << "deepm acceptance suite\n" << std::string(72, '-') << "\n";

    {
        auto t0 = std::chrono::steady_clock::now();
        auto r = verify::check_gradient_exactness(50);
        bool in_budget = elapsed_s(t0) < 30.0;
        report(1, r.name, r.pass && in_budget,
               r.detail + " | runtime " + format_double(elapsed_s(t0), 3) + "s (budget 30s)");
    }
    {
        auto t0 = std::chrono::steady_clock::now();
        auto r = verify::check_two_pass_exactness();
        bool in_budget = elapsed_s(t0) < 60.0;
        report(2, r.name, r.pass && in_budget,
               r.detail + " | runtime " + format_double(elapsed_s(t0), 3) + "s (budget 60s)");
    }
    run_check(3, verify::check_softmin_limits(1000));
    run_check(4, verify::check_duality(1000));
    run_check(5, verify::check_turnover_jensen(1000));
    run_check(6, verify::check_architecture_invariants());
    run_check(7, verify::check_cost_table());
    run_check(8, verify::check_metric_correctness());

    {
        auto r9 = run_causal_sieve();
        std::ostringstream os;
        os << "full vs ablated wins " << r9.wins << "/" << r9.seeds << " [full:";
        for (double s : r9.full_sr) os << " " << format_double(s, 4);
        os << " | ablated:";
        for (double s : r9.ablated_sr) os << " " << format_double(s, 4);
        os << "], ensemble SR " << format_double(r9.ensemble_sr, 4) << " vs TSMOM "
           << format_double(r9.tsmom_sr, 4) << ", runtime " << format_double(r9.runtime_s / 60.0, 3)
           << " min (budget 30)";
        bool pass = r9.wins >= 4 && r9.ensemble_sr > r9.tsmom_sr && r9.runtime_s < 1800.0;
        report(9, "causal_sieve_ordering", pass, os.str());

        bool turn_ok = r9.ens_turnover <= r9.mean_member_turnover;
        report(10, "ensemble_turnover",
               turn_ok,
               "realized ensemble turnover " + format_double(r9.ens_turnover, 8) +
                   " <= mean member " + format_double(r9.mean_member_turnover, 8) +
                   " (exact inequality on the trained ensemble)");
    }
    {
        std::string detail;
        bool ok = run_determinism_chain(detail);
        report(11, "end_to_end_determinism", ok, detail);
    }

    std::cout << std::string(72, '-') << "\n"
              << (g_failures == 0 ? "ALL ACCEPTANCE CRITERIA PASSED"
                                  : std::to_string(g_failures) + " CRITERIA FAILED")
              << std::endl;
    return g_failures == 0 ? 0 : 1;
}
