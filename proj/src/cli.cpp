#include "deepm/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <thread>

#include "deepm/baselines.hpp"
#include "deepm/verify.hpp"

namespace deepm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string resolve_out_dir(const RunSpec& spec) {
    if (!spec.out_dir.empty()) return spec.out_dir;
    const char* env = std::getenv("DEEPM_OUT");
    return env ? std::string(env) : std::string("./deepm_out");
}

RunConfig load_config(const RunSpec& spec) {
    RunConfig cfg = spec.config_path.empty() ? RunConfig::defaults()
                                             : RunConfig::from_file(spec.config_path);
    if (spec.has_seed_override) cfg.seed = spec.seed_override;
    if (spec.paper_scale) cfg.apply_paper_scale();
    return cfg;
}

struct LoadedData {
    train::Dataset ds;
    uint64_t data_hash = 0;
};

LoadedData load_dataset(const RunConfig& cfg) {
    data::PricePanel panel;
    std::vector<graph::AssetMeta> universe;
    if (cfg.data_source == "synth") {
        panel = data::synth_generate(cfg.synth);
        universe = graph::synth_universe(panel.n_assets(), cfg.synth.effective_groups());
    } else {
        DEEPM_REQUIRE(!cfg.prices_csv.empty(), "data.prices_csv required for csv source");
        DEEPM_REQUIRE(!cfg.universe_csv.empty(), "data.universe_csv required for csv source");
        data::LoadReport lr;
        panel = data::load_prices(cfg.prices_csv, &lr);
        for (const auto& w : lr.warnings) std::cerr << "warning: " << w << "\n";
        universe = graph::load_universe(cfg.universe_csv);
        // align universe rows to panel ticker order
        std::vector<graph::AssetMeta> ordered;
        for (const auto& tk : panel.tickers) {
            bool found = false;
            for (const auto& u : universe)
                if (u.ticker == tk) {
                    ordered.push_back(u);
                    found = true;
                    break;
                }
            DEEPM_REQUIRE(found, "universe file missing ticker ", tk);
        }
        universe = std::move(ordered);
    }
    LoadedData out{train::Dataset::build(std::move(panel), std::move(universe), cfg.subset(),
                                         cfg.vol_span, cfg.vol_eps),
                   0};
    out.data_hash = out.ds.content_hash();
    return out;
}

json load_manifest(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in.good()) return json::object();
    try {
        return json::parse(in);
    } catch (...) {
        return json::object();
    }
}

void save_manifest(const fs::path& dir, const json& m) {
    std::ofstream out(dir / "manifest.json");
    out << m.dump(2) << '\n';
}

std::string stamp(uint64_t config_hash, uint64_t data_hash) {
    return "# config_hash=" + hex64(config_hash) + " data_hash=" + hex64(data_hash) + "\n";
}

void write_series(const fs::path& path, const std::string& header,
                  const std::vector<std::string>& dates, int offset,
                  const std::vector<std::vector<double>>& cols, const std::string& stamp_line) {
    std::ofstream out(path);
    DEEPM_REQUIRE(out.good(), "cannot write ", path.string());
    out << stamp_line << header << '\n';
    size_t n = cols.empty() ? 0 : cols[0].size();
    for (size_t k = 0; k < n; ++k) {
        out << dates[static_cast<size_t>(offset) + k];
        for (const auto& c : cols) out << ',' << format_double(c[k], 12);
        out << '\n';
    }
}

// strategy evaluation over the union of walk-forward test blocks
struct EvalSeries {
    std::vector<double> net, gross;
    std::vector<double> turnover;
    std::vector<double> notionals;  // [N x D_total]
    int day0 = 0, days = 0;
};

EvalSeries eval_positions(const train::Dataset& ds, const std::vector<double>& positions, int day0,
                          int days, double gamma_eval) {
    backtest::SimInputs si;
    si.panel = &ds.panel;
    si.vol = &ds.vol;
    si.exist = &ds.features.exist;
    si.cost = ds.cost;
    si.day0 = day0;
    si.days = days;
    si.gamma_eval = gamma_eval;
    auto rep = backtest::simulate(positions, si);
    EvalSeries es;
    es.net = rep.net;
    es.gross = rep.gross;
    es.turnover = rep.turnover;
    es.notionals = rep.notionals;
    es.day0 = day0;
    es.days = days;
    return es;
}

struct BlockModels {
    std::vector<policy::PolicyModel> members;  // selected seeds for one block
};

// Train (or resume from checkpoints) the ensembles for the requested blocks.
std::vector<BlockModels> train_blocks(const RunConfig& cfg, const train::Dataset& ds,
                                      const train::SplitPlan& plan, const fs::path& dir,
                                      uint64_t config_hash, uint64_t data_hash, int jobs,
                                      json& manifest) {
    fs::create_directories(dir / "checkpoints");
    fs::create_directories(dir / "diagnostics");
    std::vector<BlockModels> out(plan.blocks.size());

    bool reusable = manifest.contains("config_hash") &&
                    manifest["config_hash"] == hex64(config_hash) &&
                    manifest.contains("data_hash") && manifest["data_hash"] == hex64(data_hash) &&
                    manifest.contains("train");

    policy::PolicyConfig pcfg = cfg.model;
    pcfg.n_assets = ds.N;
    pcfg.n_features = ds.features.n_features;
    objective::LossConfig lcfg = cfg.loss;
    lcfg.burn_in = cfg.train.burn_in_train;

    json train_info = json::array();
    for (size_t bl = 0; bl < plan.blocks.size(); ++bl) {
        const auto& block = plan.blocks[bl];
        json binfo;
        binfo["block"] = bl;
        binfo["train"] = {block.train.begin, block.train.end};
        binfo["val"] = {block.val.begin, block.val.end};
        binfo["test"] = {block.test.begin, block.test.end};

        bool all_loaded = false;
        if (reusable && manifest["train"].is_array() && manifest["train"].size() > bl) {
            const json& prev = manifest["train"][bl];
            if (prev.contains("selected")) {
                all_loaded = true;
                for (const auto& ck : prev["selected"]) {
                    fs::path p = dir / "checkpoints" / ck.get<std::string>();
                    if (!fs::exists(p)) {
                        all_loaded = false;
                        break;
                    }
                }
                if (all_loaded) {
                    for (const auto& ck : prev["selected"])
                        out[bl].members.push_back(
                            policy::load_checkpoint((dir / "checkpoints" / ck.get<std::string>()).string()));
                    binfo = prev;
                    binfo["resumed"] = true;
                }
            }
        }
        if (!all_loaded) {
            auto run = train::train_ensemble(ds, block.train, block.val, pcfg, lcfg, cfg.train,
                                             cfg.ensemble, cfg.seed, jobs);
            if (!run.warning.empty()) std::cerr << "warning: " << run.warning << "\n";
            json seeds = json::array();
            json selected = json::array();
            for (size_t k = 0; k < run.seeds.size(); ++k) {
                const auto& ts = run.seeds[k];
                seeds.push_back({{"seed", ts.seed},
                                 {"ok", ts.ok},
                                 {"score", ts.best_smoothed_val},
                                 {"best_iteration", ts.best_iteration},
                                 {"iterations_run", ts.iterations_run},
                                 {"fail_reason", ts.fail_reason}});
                std::ofstream diag(dir / "diagnostics" /
                                   ("block" + std::to_string(bl) + "_seed" + std::to_string(ts.seed) + ".csv"));
                diag << stamp(config_hash, data_hash)
                     << "window,sr,q_star,kl,clamped,pooled_clamped\n"
                     << ts.diagnostics;
            }
            for (size_t sel : run.selected) {
                const auto& ts = run.seeds[sel];
                std::string name = "block" + std::to_string(bl) + "_seed" + std::to_string(ts.seed) + ".ckpt";
                policy::save_checkpoint(ts.model, (dir / "checkpoints" / name).string());
                selected.push_back(name);
                out[bl].members.push_back(ts.model);
            }
            binfo["seeds"] = seeds;
            binfo["selected"] = selected;
        }
        train_info.push_back(binfo);
    }
    manifest["config_hash"] = hex64(config_hash);
    manifest["data_hash"] = hex64(data_hash);
    manifest["train"] = train_info;
    return out;
}

struct StrategyResult {
    std::string name;
    std::vector<double> net, gross;
    backtest::MetricSet metrics;
};

// union of test blocks; model positions come from the per-block ensembles
std::vector<StrategyResult> run_backtests(const RunConfig& cfg, const train::Dataset& ds,
                                          const train::SplitPlan& plan,
                                          std::vector<BlockModels>& blocks, const fs::path& dir,
                                          uint64_t config_hash, uint64_t data_hash,
                                          bool write_files, std::string* turnover_note) {
    int test_begin = plan.blocks.front().test.begin;
    int test_end = plan.blocks.back().test.end;
    int D = test_end - test_begin;
    std::string stamp_line = stamp(config_hash, data_hash);
    if (write_files) fs::create_directories(dir / "series");

    // ensemble + per-member positions over the union of test ranges
    std::vector<double> ens_pos(static_cast<size_t>(ds.N) * static_cast<size_t>(D), 0.0);
    size_t max_members = 0;
    for (auto& b : blocks) max_members = std::max(max_members, b.members.size());
    std::vector<std::vector<double>> member_pos(
        max_members, std::vector<double>(static_cast<size_t>(ds.N) * static_cast<size_t>(D), 0.0));

    for (size_t bl = 0; bl < plan.blocks.size(); ++bl) {
        const auto& block = plan.blocks[bl];
        std::vector<std::vector<double>> members;
        for (auto& m : blocks[bl].members)
            members.push_back(train::forward_positions(m, ds, block.test, cfg.train.seq_len,
                                                       cfg.train.burn_in_test));
        auto avg = train::average_positions(members);
        int off = block.test.begin - test_begin;
        for (int i = 0; i < ds.N; ++i)
            for (int k = 0; k < block.test.len(); ++k) {
                ens_pos[static_cast<size_t>(i) * static_cast<size_t>(D) + static_cast<size_t>(off + k)] =
                    avg[static_cast<size_t>(i) * static_cast<size_t>(block.test.len()) + static_cast<size_t>(k)];
                for (size_t mm = 0; mm < members.size(); ++mm)
                    member_pos[mm][static_cast<size_t>(i) * static_cast<size_t>(D) + static_cast<size_t>(off + k)] =
                        members[mm][static_cast<size_t>(i) * static_cast<size_t>(block.test.len()) + static_cast<size_t>(k)];
            }
    }

    // realized ensemble turnover must not exceed the mean member turnover
    auto ens_eval = eval_positions(ds, ens_pos, test_begin, D, 1.0);
    double ens_turn = std::accumulate(ens_eval.turnover.begin(), ens_eval.turnover.end(), 0.0);
    double mean_turn = 0.0;
    for (auto& mp : member_pos) {
        auto ev = eval_positions(ds, mp, test_begin, D, 1.0);
        mean_turn += std::accumulate(ev.turnover.begin(), ev.turnover.end(), 0.0) /
                     static_cast<double>(member_pos.size());
    }
    DEEPM_REQUIRE(ens_turn <= mean_turn,
                  "ensemble turnover bound violated: ", ens_turn, " > ", mean_turn);
    if (turnover_note)
        *turnover_note = "ensemble_turnover " + format_double(ens_turn, 10) +
                         " <= mean_member " + format_double(mean_turn, 10);

    // baselines under the identical execution contract
    std::vector<StrategyResult> results;
    StrategyResult deepm;
    deepm.name = "deepm";
    deepm.net = ens_eval.net;
    deepm.gross = ens_eval.gross;
    results.push_back(deepm);

    std::vector<double> bench_net;
    for (const auto& bname : cfg.baseline_names) {
        baselines::BaselineConfig bc;
        bc.kind = baselines::baseline_from_string(bname);
        auto pos = baselines::run_baseline(bc, ds.panel, ds.vol, ds.features.exist, test_begin, D);
        auto ev = eval_positions(ds, pos, test_begin, D, 1.0);
        StrategyResult sr;
        sr.name = bname;
        sr.net = ev.net;
        sr.gross = ev.gross;
        results.push_back(sr);
        if (bname == "passive_equal_risk") bench_net = ev.net;
        if (write_files)
            baselines::save_signals(pos, ds.panel, test_begin, D,
                                    (dir / "series" / (bname + "_signals.csv")).string());
    }
    if (bench_net.empty() && !results.empty()) bench_net = results.front().net;

    // ex-post rescale to the uniform annualized vol target, then metrics
    std::vector<double> bench_rescaled = backtest::rescale_to_vol(bench_net, cfg.sigma_tgt_annual);
    for (auto& sr : results) {
        std::vector<double> net = backtest::rescale_to_vol(sr.net, cfg.sigma_tgt_annual);
        double mean = std::accumulate(sr.net.begin(), sr.net.end(), 0.0) / static_cast<double>(sr.net.size());
        double var = 0.0;
        for (double r : sr.net) var += (r - mean) * (r - mean);
        var /= static_cast<double>(sr.net.size() - 1);
        double scale = cfg.sigma_tgt_annual / std::sqrt(var * 252.0);  // same scalar as the net series
        std::vector<double> gross(sr.gross.size());
        for (size_t k = 0; k < gross.size(); ++k) gross[k] = sr.gross[k] * scale;
        sr.metrics = backtest::compute_metrics(
            net, gross, bench_rescaled,
            sr.name == "deepm" ? ens_eval.notionals : std::vector<double>{},
            sr.name == "deepm" ? ds.N : 0, sr.name == "deepm" ? D : 0);
        sr.net = net;
        sr.gross = gross;
    }
    // Hold metric for baselines needs their notionals; recompute quickly
    for (auto& sr : results) {
        if (sr.name == "deepm") continue;
        baselines::BaselineConfig bc;
        bc.kind = baselines::baseline_from_string(sr.name);
        auto pos = baselines::run_baseline(bc, ds.panel, ds.vol, ds.features.exist, test_begin, D);
        auto ev = eval_positions(ds, pos, test_begin, D, 1.0);
        auto m2 = backtest::compute_metrics(sr.net, sr.gross, bench_rescaled, ev.notionals, ds.N, D);
        sr.metrics = m2;
    }

    if (write_files) {
        fs::create_directories(dir / "series");
        for (const auto& sr : results)
            write_series(dir / "series" / (sr.name + ".csv"), "date,net,gross", ds.panel.dates,
                         test_begin + 1, {sr.net, sr.gross}, stamp_line);
        std::ofstream mf(dir / "metrics.csv");
        mf << stamp_line << backtest::metric_table_header() << '\n';
        for (const auto& sr : results) mf << backtest::metric_table_row(sr.name, sr.metrics) << '\n';
    }
    return results;
}

json merge_patch(json base, const json& patch) {
    base.merge_patch(patch);
    return base;
}

int cmd_synth(const RunConfig& cfg, const fs::path& dir) {
    auto panel = data::synth_generate(cfg.synth);
    auto universe = graph::synth_universe(panel.n_assets(), cfg.synth.effective_groups());
    fs::create_directories(dir);
    data::save_prices(panel, (dir / "prices.csv").string());
    graph::save_universe(universe, (dir / "universe.csv").string());
    auto g = graph::build_macro_graph(universe);
    graph::save_edge_list(g, panel.tickers, (dir / "graph_edges.csv").string());
    json m = load_manifest(dir);
    m["config_hash"] = hex64(cfg.config_hash());
    m["data_hash"] = hex64(panel.content_hash());
    m["synth"] = {{"n_assets", panel.n_assets()}, {"n_days", panel.n_days()}};
    save_manifest(dir, m);
    std::cout << "synth: wrote " << panel.n_assets() << " assets x " << panel.n_days()
              << " days to " << dir.string() << "\n";
    return 0;
}

int cmd_features(const RunConfig& cfg, const fs::path& dir) {
    auto ld = load_dataset(cfg);
    fs::create_directories(dir);
    data::save_features(ld.ds.features, (dir / "features.bin").string(),
                        (dir / "features_manifest.json").string());
    json m = load_manifest(dir);
    m["config_hash"] = hex64(cfg.config_hash());
    m["data_hash"] = hex64(ld.data_hash);
    save_manifest(dir, m);
    std::cout << "features: " << ld.ds.features.n_assets << " x " << ld.ds.features.n_days << " x "
              << ld.ds.features.n_features << " -> " << (dir / "features.bin").string() << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, const fs::path& dir, int jobs) {
    auto ld = load_dataset(cfg);
    auto plan = train::walk_forward_plan(ld.ds.T, cfg.block_years, cfg.val_frac, cfg.days_per_year,
                                         cfg.min_test_days);
    fs::create_directories(dir);
    json manifest = load_manifest(dir);
    train_blocks(cfg, ld.ds, plan, dir, cfg.config_hash(), ld.data_hash, jobs, manifest);
    save_manifest(dir, manifest);
    std::cout << "train: " << plan.blocks.size() << " walk-forward block(s) done\n";
    return 0;
}

int cmd_backtest(const RunConfig& cfg, const fs::path& dir, int jobs) {
    auto ld = load_dataset(cfg);
    auto plan = train::walk_forward_plan(ld.ds.T, cfg.block_years, cfg.val_frac, cfg.days_per_year,
                                         cfg.min_test_days);
    fs::create_directories(dir);
    json manifest = load_manifest(dir);
    auto blocks = train_blocks(cfg, ld.ds, plan, dir, cfg.config_hash(), ld.data_hash, jobs, manifest);
    std::string note;
    auto results = run_backtests(cfg, ld.ds, plan, blocks, dir, cfg.config_hash(), ld.data_hash,
                                 true, &note);
    manifest["backtest"] = {{"strategies", results.size()}, {"turnover_check", note}};
    save_manifest(dir, manifest);
    std::cout << backtest::metric_table_header() << "\n";
    for (const auto& sr : results) std::cout << backtest::metric_table_row(sr.name, sr.metrics) << "\n";
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const fs::path& dir, int jobs) {
    DEEPM_REQUIRE(!cfg.ablate_rows.empty(), "ablate requires config rows under 'ablate'");
    auto ld = load_dataset(cfg);
    auto full_plan = train::walk_forward_plan(ld.ds.T, cfg.block_years, cfg.val_frac,
                                              cfg.days_per_year, cfg.min_test_days);
    train::SplitPlan plan = full_plan;
    if (cfg.ablate_blocks == "last") plan.blocks = {full_plan.blocks.back()};

    fs::create_directories(dir);
    std::ofstream mf(dir / "ablate_metrics.csv");
    mf << stamp(cfg.config_hash(), ld.data_hash) << "row," << backtest::metric_table_header()
       << '\n';
    json base = cfg.to_json();
    for (const auto& row : cfg.ablate_rows) {
        RunConfig rcfg = RunConfig::from_json(merge_patch(base, row.overrides));
        fs::path rdir = dir / ("ablate_" + row.name);
        fs::create_directories(rdir);
        json manifest = load_manifest(rdir);
        auto blocks = train_blocks(rcfg, ld.ds, plan, rdir, rcfg.config_hash(), ld.data_hash, jobs,
                                   manifest);
        save_manifest(rdir, manifest);
        auto results = run_backtests(rcfg, ld.ds, plan, blocks, rdir, rcfg.config_hash(),
                                     ld.data_hash, true, nullptr);
        for (const auto& sr : results)
            if (sr.name == "deepm")
                mf << row.name << ',' << backtest::metric_table_row(sr.name, sr.metrics) << '\n';
        std::cout << "ablate row '" << row.name << "' done\n";
    }
    return 0;
}

int cmd_verify(const fs::path& dir) {
    auto checks = verify::run_fast_checks();
    fs::create_directories(dir);
    std::ofstream rep(dir / "verify_report.txt");
    bool all = true;
    for (const auto& c : checks) {
        std::string line = std::string(c.pass ? "[PASS] " : "[FAIL] ") + c.name + ": " + c.detail;
        std::cout << line << "\n";
        rep << line << "\n";
        all = all && c.pass;
    }
    std::cout << (all ? "verify: all checks passed\n" : "verify: FAILURES present\n");
    return all ? 0 : 1;
}

int cmd_report(const fs::path& dir) {
    std::ifstream in(dir / "metrics.csv");
    DEEPM_REQUIRE(in.good(), "no metrics.csv under ", dir.string(), "; run backtest first");
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        rows.push_back(split(line, ','));
    }
    DEEPM_REQUIRE(!rows.empty(), "metrics.csv is empty");
    std::vector<size_t> width(rows[0].size(), 0);
    for (const auto& r : rows)
        for (size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
    std::ostringstream table;
    for (const auto& r : rows) {
        for (size_t c = 0; c < r.size(); ++c) {
            table << r[c];
            for (size_t pad = r[c].size(); pad < width[c] + 2; ++pad) table << ' ';
        }
        table << '\n';
    }
    fs::create_directories(dir / "reports");
    std::ofstream out(dir / "reports" / "table.txt");
    out << table.str();
    std::cout << table.str();
    return 0;
}

}  // namespace

int run(const RunSpec& spec) {
    try {
        fs::path dir = resolve_out_dir(spec);
        if (spec.command == "verify") return cmd_verify(dir);
        RunConfig cfg = load_config(spec);
        int jobs = spec.jobs > 0 ? spec.jobs
                                 : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
        if (spec.command == "synth") return cmd_synth(cfg, dir);
        if (spec.command == "features") return cmd_features(cfg, dir);
        if (spec.command == "train") return cmd_train(cfg, dir, jobs);
        if (spec.command == "backtest") return cmd_backtest(cfg, dir, jobs);
        if (spec.command == "ablate") return cmd_ablate(cfg, dir, jobs);
        if (spec.command == "report") return cmd_report(dir);
        std::cerr << "unknown command '" << spec.command
                  << "' (synth|features|train|backtest|ablate|verify|report)\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace deepm::cli
