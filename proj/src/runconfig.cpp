#include "deepm/runconfig.hpp"

#include <fstream>
#include <set>

namespace deepm::cli {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& scope, const std::set<std::string>& valid) {
    DEEPM_REQUIRE(j.is_object(), "config section '", scope, "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (valid.count(it.key())) continue;
        std::string keys;
        for (const auto& k : valid) keys += k + " ";
        fail("unknown config key '", scope, ".", it.key(), "'; valid keys: ", keys);
    }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::defaults() { return RunConfig{}; }

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    check_keys(j, "", {"data", "features", "model", "loss", "train", "ensemble", "split",
                       "backtest", "ablate", "seed"});
    if (j.contains("data")) {
        const json& d = j.at("data");
        check_keys(d, "data", {"source", "prices_csv", "universe_csv", "synth"});
        get_if(d, "source", c.data_source);
        DEEPM_REQUIRE(c.data_source == "synth" || c.data_source == "csv",
                      "data.source must be synth or csv");
        get_if(d, "prices_csv", c.prices_csv);
        get_if(d, "universe_csv", c.universe_csv);
        if (d.contains("synth")) {
            const json& s = d.at("synth");
            check_keys(s, "data.synth",
                       {"n_assets", "n_days", "seed", "trend_persistence", "trend_vol", "base_vol",
                        "crisis_enter_prob", "crisis_exit_prob", "crisis_vol_mult",
                        "follower_trend_scale", "follower_vol_scale", "pairs", "groups", "close_ranks"});
            get_if(s, "n_assets", c.synth.n_assets);
            get_if(s, "n_days", c.synth.n_days);
            get_if(s, "seed", c.synth.seed);
            get_if(s, "trend_persistence", c.synth.trend_persistence);
            get_if(s, "trend_vol", c.synth.trend_vol);
            get_if(s, "base_vol", c.synth.base_vol);
            get_if(s, "crisis_enter_prob", c.synth.crisis_enter_prob);
            get_if(s, "crisis_exit_prob", c.synth.crisis_exit_prob);
            get_if(s, "crisis_vol_mult", c.synth.crisis_vol_mult);
            get_if(s, "follower_trend_scale", c.synth.follower_trend_scale);
            get_if(s, "follower_vol_scale", c.synth.follower_vol_scale);
            get_if(s, "groups", c.synth.groups);
            get_if(s, "close_ranks", c.synth.close_ranks);
            if (s.contains("pairs")) {
                for (const auto& p : s.at("pairs")) {
                    check_keys(p, "data.synth.pairs[]", {"leader", "follower", "coupling"});
                    data::LeadLagPair lp;
                    get_if(p, "leader", lp.leader);
                    get_if(p, "follower", lp.follower);
                    get_if(p, "coupling", lp.coupling);
                    c.synth.pairs.push_back(lp);
                }
            }
        }
    }
    if (j.contains("features")) {
        const json& f = j.at("features");
        check_keys(f, "features", {"subset", "vol_span", "vol_eps"});
        get_if(f, "subset", c.feature_subset);
        DEEPM_REQUIRE(c.feature_subset == "raw_momentum" || c.feature_subset == "signal_based",
                      "features.subset must be raw_momentum or signal_based");
        get_if(f, "vol_span", c.vol_span);
        get_if(f, "vol_eps", c.vol_eps);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        check_keys(m, "model",
                   {"d_model", "heads", "dropout", "protocol", "graph_mode", "cross_attn",
                    "block_order", "rezero"});
        get_if(m, "d_model", c.model.d_model);
        get_if(m, "heads", c.model.heads);
        get_if(m, "dropout", c.model.dropout);
        if (m.contains("protocol")) c.model.protocol = policy::protocol_from_string(m.at("protocol"));
        if (m.contains("graph_mode")) c.model.graph_mode = policy::graph_mode_from_string(m.at("graph_mode"));
        get_if(m, "cross_attn", c.model.cross_attn);
        if (m.contains("block_order")) c.model.block_order = policy::block_order_from_string(m.at("block_order"));
        get_if(m, "rezero", c.model.rezero);
    }
    if (j.contains("loss")) {
        const json& l = j.at("loss");
        check_keys(l, "loss",
                   {"tau", "lambda", "gamma", "annualization", "eps_sigma", "eps_var", "groups"});
        get_if(l, "tau", c.loss.tau);
        get_if(l, "lambda", c.loss.lambda);
        get_if(l, "gamma", c.loss.gamma);
        get_if(l, "annualization", c.loss.annualization);
        get_if(l, "eps_sigma", c.loss.eps_sigma);
        get_if(l, "eps_var", c.loss.eps_var);
        get_if(l, "groups", c.loss.groups);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        check_keys(t, "train",
                   {"learning_rate", "weight_decay", "grad_clip_norm", "batch_size", "microbatch",
                    "iterations", "patience", "ema_alpha", "min_delta", "stop_burn_in",
                    "eval_every", "seq_len", "burn_in_train", "burn_in_test"});
        get_if(t, "learning_rate", c.train.learning_rate);
        get_if(t, "weight_decay", c.train.weight_decay);
        get_if(t, "grad_clip_norm", c.train.grad_clip_norm);
        get_if(t, "batch_size", c.train.batch_size);
        get_if(t, "microbatch", c.train.microbatch);
        get_if(t, "iterations", c.train.iterations);
        get_if(t, "patience", c.train.patience);
        get_if(t, "ema_alpha", c.train.ema_alpha);
        get_if(t, "min_delta", c.train.min_delta);
        get_if(t, "stop_burn_in", c.train.stop_burn_in);
        get_if(t, "eval_every", c.train.eval_every);
        get_if(t, "seq_len", c.train.seq_len);
        get_if(t, "burn_in_train", c.train.burn_in_train);
        get_if(t, "burn_in_test", c.train.burn_in_test);
    }
    if (j.contains("ensemble")) {
        const json& e = j.at("ensemble");
        check_keys(e, "ensemble", {"n_seeds", "top_k"});
        get_if(e, "n_seeds", c.ensemble.n_seeds);
        get_if(e, "top_k", c.ensemble.top_k);
    }
    if (j.contains("split")) {
        const json& s = j.at("split");
        check_keys(s, "split",
                   {"block_years", "val_frac", "days_per_year", "min_test_days", "ablate_blocks"});
        get_if(s, "block_years", c.block_years);
        get_if(s, "val_frac", c.val_frac);
        get_if(s, "days_per_year", c.days_per_year);
        get_if(s, "min_test_days", c.min_test_days);
        get_if(s, "ablate_blocks", c.ablate_blocks);
    }
    if (j.contains("backtest")) {
        const json& b = j.at("backtest");
        check_keys(b, "backtest", {"sigma_tgt_annual", "baselines"});
        get_if(b, "sigma_tgt_annual", c.sigma_tgt_annual);
        get_if(b, "baselines", c.baseline_names);
    }
    if (j.contains("ablate")) {
        for (const auto& row : j.at("ablate")) {
            check_keys(row, "ablate[]", {"name", "overrides"});
            AblateRow r;
            r.name = row.at("name").get<std::string>();
            r.overrides = row.contains("overrides") ? row.at("overrides") : json::object();
            c.ablate_rows.push_back(std::move(r));
        }
    }
    get_if(j, "seed", c.seed);
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    DEEPM_REQUIRE(in.good(), "cannot open config file ", path);
    json j;
    try {
        j = json::parse(in);
    } catch (const std::exception& e) {
        fail("config parse error in ", path, ": ", e.what());
    }
    return from_json(j);
}

json RunConfig::to_json() const {
    json j;
    j["data"] = {{"source", data_source}, {"prices_csv", prices_csv}, {"universe_csv", universe_csv}};
    json pairs = json::array();
    for (const auto& p : synth.pairs)
        pairs.push_back({{"leader", p.leader}, {"follower", p.follower}, {"coupling", p.coupling}});
    j["data"]["synth"] = {{"n_assets", synth.n_assets},
                          {"n_days", synth.n_days},
                          {"seed", synth.seed},
                          {"trend_persistence", synth.trend_persistence},
                          {"trend_vol", synth.trend_vol},
                          {"base_vol", synth.base_vol},
                          {"crisis_enter_prob", synth.crisis_enter_prob},
                          {"crisis_exit_prob", synth.crisis_exit_prob},
                          {"crisis_vol_mult", synth.crisis_vol_mult},
                          {"follower_trend_scale", synth.follower_trend_scale},
                          {"follower_vol_scale", synth.follower_vol_scale},
                          {"pairs", pairs},
                          {"groups", synth.groups},
                          {"close_ranks", synth.close_ranks}};
    j["features"] = {{"subset", feature_subset}, {"vol_span", vol_span}, {"vol_eps", vol_eps}};
    j["model"] = {{"d_model", model.d_model},
                  {"heads", model.heads},
                  {"dropout", model.dropout},
                  {"protocol", policy::protocol_to_string(model.protocol)},
                  {"graph_mode", policy::graph_mode_to_string(model.graph_mode)},
                  {"cross_attn", model.cross_attn},
                  {"block_order", policy::block_order_to_string(model.block_order)},
                  {"rezero", model.rezero}};
    j["loss"] = {{"tau", loss.tau},       {"lambda", loss.lambda},
                 {"gamma", loss.gamma},   {"annualization", loss.annualization},
                 {"eps_sigma", loss.eps_sigma}, {"eps_var", loss.eps_var},
                 {"groups", loss.groups}};
    j["train"] = {{"learning_rate", train.learning_rate},
                  {"weight_decay", train.weight_decay},
                  {"grad_clip_norm", train.grad_clip_norm},
                  {"batch_size", train.batch_size},
                  {"microbatch", train.microbatch},
                  {"iterations", train.iterations},
                  {"patience", train.patience},
                  {"ema_alpha", train.ema_alpha},
                  {"min_delta", train.min_delta},
                  {"stop_burn_in", train.stop_burn_in},
                  {"eval_every", train.eval_every},
                  {"seq_len", train.seq_len},
                  {"burn_in_train", train.burn_in_train},
                  {"burn_in_test", train.burn_in_test}};
    j["ensemble"] = {{"n_seeds", ensemble.n_seeds}, {"top_k", ensemble.top_k}};
    j["split"] = {{"block_years", block_years},
                  {"val_frac", val_frac},
                  {"days_per_year", days_per_year},
                  {"min_test_days", min_test_days},
                  {"ablate_blocks", ablate_blocks}};
    j["backtest"] = {{"sigma_tgt_annual", sigma_tgt_annual}, {"baselines", baseline_names}};
    json rows = json::array();
    for (const auto& r : ablate_rows) rows.push_back({{"name", r.name}, {"overrides", r.overrides}});
    j["ablate"] = rows;
    j["seed"] = seed;
    return j;
}

uint64_t RunConfig::config_hash() const { return fnv1a(to_json().dump()); }

void RunConfig::apply_paper_scale() {
    ensemble.n_seeds = 50;
    ensemble.top_k = 25;
    train.iterations = 1000;
    train.patience = 50;
    train.batch_size = 64;
    train.learning_rate = 1e-4;
    model.d_model = 64;
    model.heads = 4;
}

data::FeatureSubset RunConfig::subset() const {
    return feature_subset == "raw_momentum" ? data::FeatureSubset::RawMomentum
                                            : data::FeatureSubset::SignalBased;
}

}  // namespace deepm::cli
