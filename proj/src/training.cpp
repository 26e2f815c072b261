#include "deepm/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

namespace deepm::train {

void TrainConfig::validate() const {
    DEEPM_REQUIRE(learning_rate > 0.0 && weight_decay >= 0.0, "bad optimizer config");
    DEEPM_REQUIRE(grad_clip_norm > 0.0, "grad_clip_norm must be positive");
    DEEPM_REQUIRE(batch_size >= 1 && microbatch >= 1 && iterations >= 0, "bad loop config");
    DEEPM_REQUIRE(patience >= 1, "patience must be >= 1");
    DEEPM_REQUIRE(seq_len > burn_in_train && seq_len > burn_in_test,
                  "sequence length must exceed burn-in");
    DEEPM_REQUIRE(eval_every >= 1, "eval_every must be >= 1");
}

SplitPlan walk_forward_plan(int n_days, int block_years, double val_frac, int days_per_year,
                            int min_test_days) {
    int block = block_years * days_per_year;
    DEEPM_REQUIRE(n_days >= 2 * block, "walk-forward needs at least ", 2 * block,
                  " days (2 blocks of ", block, "); got ", n_days);
    SplitPlan plan;
    for (int k = 1; k * block < n_days; ++k) {
        int train_end = k * block;
        int test_end = std::min((k + 1) * block, n_days);
        if (test_end - train_end < min_test_days) break;
        SplitBlock b;
        int val_len = static_cast<int>(std::ceil(val_frac * train_end));
        b.train = DateRange{0, train_end - val_len};
        b.val = DateRange{train_end - val_len, train_end};
        b.test = DateRange{train_end, test_end};
        plan.blocks.push_back(b);
    }
    return plan;
}

std::vector<int> make_sequences(int range_begin, int range_end, int seq_len, int burn_in) {
    DEEPM_REQUIRE(seq_len > burn_in, "seq_len must exceed burn_in");
    std::vector<int> starts;
    int stride = seq_len - burn_in;
    for (int s = range_begin; s + seq_len <= range_end; s += stride) starts.push_back(s);
    return starts;
}

StepInfo optimizer_step(ad::ParameterStore& store, AdamState& state, const TrainConfig& cfg) {
    auto grads = store.flat_grads();
    size_t n = grads.size();
    if (state.m.empty()) {
        state.m.assign(n, 0.0);
        state.v.assign(n, 0.0);
    }
    DEEPM_REQUIRE(state.m.size() == n, "optimizer state size mismatch");

    StepInfo info;
    double norm2 = 0.0;
    bool finite = true;
    for (double g : grads) {
        if (!std::isfinite(g)) {
            finite = false;
            break;
        }
        norm2 += g * g;
    }
    if (!finite || !std::isfinite(norm2)) {
        ++state.skipped;
        info.skipped = true;
        return info;
    }
    info.grad_norm = std::sqrt(norm2);
    double scale = info.grad_norm > cfg.grad_clip_norm && info.grad_norm > 0.0
                       ? cfg.grad_clip_norm / info.grad_norm
                       : 1.0;
    double applied2 = 0.0;
    ++state.step;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    size_t k = 0;
    for (auto& p : store.params) {
        for (size_t j = 0; j < p.value.v.size(); ++j, ++k) {
            double g = grads[k] * scale;
            applied2 += g * g;
            state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
            state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
            double mhat = state.m[k] / bc1;
            double vhat = state.v[k] / bc2;
            p.value.v[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
            p.value.v[j] -= cfg.learning_rate * cfg.weight_decay * p.value.v[j];
        }
    }
    info.applied_norm = std::sqrt(applied2);
    return info;
}

EmaEarlyStop::Decision EmaEarlyStop::observe(double raw_score, int iteration) {
    ++evals_;
    if (!has_) {
        smoothed_ = raw_score;
        has_ = true;
    } else {
        smoothed_ = alpha_ * raw_score + (1.0 - alpha_) * smoothed_;
    }
    Decision d;
    d.smoothed = smoothed_;
    if (smoothed_ > best_ + min_delta_ || best_eval_ < 0) {
        best_ = smoothed_;
        best_eval_ = evals_;
        since_improve_ = 0;
        d.improved = true;
    } else if (iteration > stop_burn_in_) {
        // evaluations inside the burn-in window do not count toward patience
        ++since_improve_;
    }
    d.stop = since_improve_ >= patience_;
    return d;
}

Dataset Dataset::build(data::PricePanel panel, std::vector<graph::AssetMeta> universe,
                       data::FeatureSubset subset, int vol_span, double vol_eps) {
    Dataset ds;
    ds.panel = std::move(panel);
    ds.universe = std::move(universe);
    DEEPM_REQUIRE(ds.universe.size() == ds.panel.tickers.size(),
                  "universe and panel asset counts differ");
    for (size_t i = 0; i < ds.universe.size(); ++i)
        DEEPM_REQUIRE(ds.universe[i].ticker == ds.panel.tickers[i],
                      "universe/panel ticker order mismatch at ", i);
    ds.N = ds.panel.n_assets();
    ds.T = ds.panel.n_days();
    ds.vol = data::estimate_vol(ds.panel, vol_span, vol_eps);
    ds.features = data::compute_features(ds.panel, ds.vol, subset);
    ds.macro = graph::build_macro_graph(ds.universe);
    ds.cost = backtest::CostModel{}.universe_costs(ds.universe);

    ds.y.assign(static_cast<size_t>(ds.N) * static_cast<size_t>(ds.T), 0.0);
    ds.inv_sigma.assign(static_cast<size_t>(ds.N) * static_cast<size_t>(ds.T), 0.0);
    for (int i = 0; i < ds.N; ++i)
        for (int t = 0; t < ds.T; ++t) {
            size_t idx = static_cast<size_t>(i) * static_cast<size_t>(ds.T) + static_cast<size_t>(t);
            ds.inv_sigma[idx] = 1.0 / (ds.vol.sgm(i, t) + vol_eps);
            if (t + 1 < ds.T && ds.panel.m(i, t) && ds.panel.m(i, t + 1))
                ds.y[idx] = (ds.panel.px(i, t + 1) / ds.panel.px(i, t) - 1.0) /
                            (ds.vol.sgm(i, t) + vol_eps);
        }
    ds.first_active = ds.T;
    for (int t = 0; t < ds.T && ds.first_active == ds.T; ++t)
        for (int i = 0; i < ds.N; ++i)
            if (ds.features.ex(i, t)) {
                ds.first_active = t;
                break;
            }
    return ds;
}

PolicySequenceModel::PolicySequenceModel(policy::PolicyModel& model, const Dataset& ds,
                                         std::vector<int> starts, int seq_len, int burn_in,
                                         double gamma, uint64_t dropout_seed)
    : model_(model), ds_(ds), starts_(std::move(starts)), L_(seq_len), burn_in_(burn_in),
      gamma_(gamma), dropout_seed_(dropout_seed) {
    for (int s : starts_)
        DEEPM_REQUIRE(s >= 0 && s + L_ <= ds_.T, "sequence window [", s, ",", s + L_,
                      ") outside panel of ", ds_.T, " days");
    // burn-in steps and steps with no live asset are excluded from the loss
    int B = total_sequences();
    loss_mask_.assign(static_cast<size_t>(B) * static_cast<size_t>(L_), 0.0);
    for (int b = 0; b < B; ++b)
        for (int t = burn_in_; t < L_; ++t) {
            int day = starts_[static_cast<size_t>(b)] + t;
            int live = 0;
            for (int i = 0; i < ds_.N; ++i) live += ds_.features.ex(i, day);
            if (live > 0)
                loss_mask_[static_cast<size_t>(b) * static_cast<size_t>(L_) + static_cast<size_t>(t)] = 1.0;
        }
}

policy::ForwardBatch PolicySequenceModel::make_batch(const std::vector<int>& ids,
                                                     bool train_mode) const {
    int Bm = static_cast<int>(ids.size()), N = ds_.N, L = L_, F = ds_.features.n_features;
    policy::ForwardBatch fb;
    fb.B = Bm;
    fb.N = N;
    fb.L = L;
    fb.F = F;
    fb.features = ad::Tensor(ad::Shape{Bm, N, L, F});
    fb.exist = ad::Tensor(ad::Shape{Bm, N, L});
    fb.cost = ds_.cost;
    fb.close_rank = ds_.panel.close_rank;
    fb.macro = &ds_.macro;
    fb.train_mode = train_mode;
    for (int k = 0; k < Bm; ++k) {
        int s0 = starts_[static_cast<size_t>(ids[static_cast<size_t>(k)])];
        fb.sample_keys.push_back(hash_combine(dropout_seed_, static_cast<uint64_t>(ids[static_cast<size_t>(k)])));
        for (int i = 0; i < N; ++i)
            for (int t = 0; t < L; ++t) {
                for (int f = 0; f < F; ++f) fb.features.at(k, i, t, f) = ds_.features.at(i, s0 + t, f);
                fb.exist.at(k, i, t) = ds_.features.ex(i, s0 + t) ? 1.0 : 0.0;
            }
    }
    return fb;
}

policy::ReturnsInputs PolicySequenceModel::make_returns_inputs(const std::vector<int>& ids) const {
    int Bm = static_cast<int>(ids.size()), N = ds_.N, L = L_;
    policy::ReturnsInputs ri;
    ri.gamma = gamma_;
    ri.y = ad::Tensor(ad::Shape{Bm, N, L});
    ri.inv_sigma = ad::Tensor(ad::Shape{Bm, N, L});
    ri.inv_live = ad::Tensor(ad::Shape{Bm, L});
    for (int k = 0; k < Bm; ++k) {
        int s0 = starts_[static_cast<size_t>(ids[static_cast<size_t>(k)])];
        for (int t = 0; t < L; ++t) {
            int live = 0;
            for (int i = 0; i < N; ++i) live += ds_.features.ex(i, s0 + t);
            ri.inv_live.at(k, t) = live > 0 ? 1.0 / static_cast<double>(live) : 0.0;
            for (int i = 0; i < N; ++i) {
                size_t idx = static_cast<size_t>(i) * static_cast<size_t>(ds_.T) + static_cast<size_t>(s0 + t);
                ri.y.at(k, i, t) = ds_.y[idx];
                ri.inv_sigma.at(k, i, t) = ds_.inv_sigma[idx];
            }
        }
    }
    return ri;
}

ad::NodeId PolicySequenceModel::build_returns(ad::Tape& tape, const std::vector<int>& ids,
                                              bool train_mode) {
    policy::ForwardBatch fb = make_batch(ids, train_mode);
    ad::NodeId p = policy_forward(tape, model_, fb);
    return net_returns_node(tape, p, fb, make_returns_inputs(ids));
}

std::vector<double> forward_positions(policy::PolicyModel& model, const Dataset& ds,
                                      DateRange range, int seq_len, int burn_in) {
    DEEPM_REQUIRE(range.begin >= 0 && range.end <= ds.T && range.len() > 0, "bad date range");
    int N = ds.N, D = range.len();
    std::vector<double> out(static_cast<size_t>(N) * static_cast<size_t>(D), 0.0);
    std::vector<char> covered(static_cast<size_t>(D), 0);

    int stride = seq_len - burn_in;
    int w = std::max(0, range.begin - burn_in);
    while (true) {
        if (w + seq_len > ds.T) w = ds.T - seq_len;
        if (w < 0) fail("panel shorter than one sequence window");
        std::vector<int> starts{w};
        PolicySequenceModel seq(model, ds, starts, seq_len, burn_in, 0.0, 0);
        ad::Tape tape;
        policy::ForwardBatch fb = seq.make_batch({0}, false);
        ad::NodeId p = policy_forward(tape, model, fb);
        const ad::Tensor& pv = tape.value(p);
        int min_day = (w == 0 && range.begin < burn_in) ? range.begin : w + burn_in;
        int lo = std::max(range.begin, min_day);
        for (int day = lo; day < std::min(range.end, w + seq_len); ++day) {
            int k = day - range.begin;
            if (covered[static_cast<size_t>(k)]) continue;
            for (int i = 0; i < N; ++i) out[static_cast<size_t>(i) * static_cast<size_t>(D) + static_cast<size_t>(k)] = pv.at(0, i, day - w);
            covered[static_cast<size_t>(k)] = 1;
        }
        if (w + seq_len >= range.end) break;
        w += stride;
    }
    for (int k = 0; k < D; ++k) DEEPM_REQUIRE(covered[static_cast<size_t>(k)], "position coverage gap at ", k);
    return out;
}

std::vector<double> average_positions(const std::vector<std::vector<double>>& member_positions) {
    DEEPM_REQUIRE(!member_positions.empty(), "no member positions to average");
    std::vector<double> out(member_positions[0].size(), 0.0);
    for (const auto& m : member_positions) {
        DEEPM_REQUIRE(m.size() == out.size(), "member position shapes differ");
        for (size_t i = 0; i < m.size(); ++i) out[i] += m[i];
    }
    for (double& v : out) v /= static_cast<double>(member_positions.size());
    return out;
}

double validation_sharpe(policy::PolicyModel& model, const Dataset& ds, DateRange val_range,
                         const TrainConfig& tcfg, double gamma) {
    auto pos = forward_positions(model, ds, val_range, tcfg.seq_len, tcfg.burn_in_test);
    backtest::SimInputs si;
    si.panel = &ds.panel;
    si.vol = &ds.vol;
    si.exist = &ds.features.exist;
    si.cost = ds.cost;
    si.day0 = val_range.begin;
    si.days = val_range.len();
    si.gamma_eval = gamma;  // validation is cost-aware at the training gamma
    auto rep = backtest::simulate(pos, si);
    double mean = std::accumulate(rep.net.begin(), rep.net.end(), 0.0) / static_cast<double>(rep.net.size());
    double var = 0.0;
    for (double r : rep.net) var += (r - mean) * (r - mean);
    var /= std::max<double>(1.0, static_cast<double>(rep.net.size()) - 1.0);
    double sd = std::sqrt(var);
    return sd > 0.0 ? std::sqrt(252.0) * mean / sd : 0.0;
}

TrainedSeed train_seed(uint64_t seed, const Dataset& ds, DateRange train_range,
                       DateRange val_range, const policy::PolicyConfig& pcfg,
                       const objective::LossConfig& lcfg, const TrainConfig& tcfg) {
    tcfg.validate();
    lcfg.validate();
    TrainedSeed out;
    out.seed = seed;
    out.model = policy::PolicyModel::init(pcfg, seed);

    // reserve the final day of the range so every step has a realized return
    int usable_begin = std::max(train_range.begin, ds.first_active);
    auto starts = make_sequences(usable_begin, train_range.end - 1, tcfg.seq_len, tcfg.burn_in_train);
    if (starts.empty()) {
        out.fail_reason = "training range too short for one sequence";
        return out;
    }

    AdamState opt;
    EmaEarlyStop stopper(tcfg);
    std::vector<double> best_params = out.model.store.flat_values();
    bool have_best = false;

    Rng batch_rng(hash_combine(seed, 0xba7c5eedULL));
    for (int iter = 1; iter <= tcfg.iterations; ++iter) {
        std::vector<int> chosen;
        if (static_cast<int>(starts.size()) <= tcfg.batch_size) {
            chosen.resize(starts.size());
            std::iota(chosen.begin(), chosen.end(), 0);
        } else {  // sample without replacement, deterministic in (seed, iter)
            std::vector<int> pool(starts.size());
            std::iota(pool.begin(), pool.end(), 0);
            for (int k = 0; k < tcfg.batch_size; ++k) {
                int j = k + batch_rng.uniform_int(static_cast<int>(pool.size()) - k);
                std::swap(pool[static_cast<size_t>(k)], pool[static_cast<size_t>(j)]);
                chosen.push_back(pool[static_cast<size_t>(k)]);
            }
            std::sort(chosen.begin(), chosen.end());
        }
        std::vector<int> batch_starts;
        for (int id : chosen) batch_starts.push_back(starts[static_cast<size_t>(id)]);

        PolicySequenceModel seq(out.model, ds, batch_starts, tcfg.seq_len, tcfg.burn_in_train,
                                lcfg.gamma, hash_combine(seed, static_cast<uint64_t>(iter)));
        auto mbs = objective::split_microbatches(seq.total_sequences(), tcfg.microbatch);
        out.model.store.zero_grads();
        objective::TwoPassResult res;
        try {
            res = objective::two_pass_step(seq, out.model.store, mbs, lcfg);
        } catch (const Error& e) {
            out.fail_reason = std::string("two-pass failure: ") + e.what();
            return out;
        }
        if (!std::isfinite(res.loss)) {
            out.fail_reason = "loss diverged to non-finite value";
            return out;
        }
        out.diagnostics += res.diag.delimited();
        optimizer_step(out.model.store, opt, tcfg);
        out.iterations_run = iter;

        if (iter % tcfg.eval_every == 0) {
            double vs = validation_sharpe(out.model, ds, val_range, tcfg, lcfg.gamma);
            out.val_history.push_back(vs);
            auto d = stopper.observe(vs, iter);
            if (d.improved) {
                best_params = out.model.store.flat_values();
                have_best = true;
                out.best_iteration = iter;
            }
            if (d.stop) break;
        }
    }
    if (have_best) out.model.store.set_flat_values(best_params);
    if (tcfg.iterations == 0 || out.val_history.empty()) {
        // iteration-free call still reports a validation score
        double vs = validation_sharpe(out.model, ds, val_range, tcfg, lcfg.gamma);
        out.val_history.push_back(vs);
        stopper.observe(vs, 0);
    }
    out.best_smoothed_val = stopper.best_smoothed();
    out.ok = true;
    return out;
}

std::vector<size_t> ensemble_select(const std::vector<TrainedSeed>& seeds, int top_k,
                                    std::string* warning) {
    std::vector<size_t> ok;
    for (size_t i = 0; i < seeds.size(); ++i)
        if (seeds[i].ok) ok.push_back(i);
    DEEPM_REQUIRE(!ok.empty(), "no successful seeds to ensemble");
    std::stable_sort(ok.begin(), ok.end(), [&](size_t a, size_t b) {
        if (seeds[a].best_smoothed_val != seeds[b].best_smoothed_val)
            return seeds[a].best_smoothed_val > seeds[b].best_smoothed_val;
        return seeds[a].seed < seeds[b].seed;
    });
    if (static_cast<int>(ok.size()) < top_k) {
        if (warning)
            *warning = "only " + std::to_string(ok.size()) + " successful seeds; using all of them";
        return ok;
    }
    ok.resize(static_cast<size_t>(top_k));
    return ok;
}

EnsembleRun train_ensemble(const Dataset& ds, DateRange train_range, DateRange val_range,
                           const policy::PolicyConfig& pcfg, const objective::LossConfig& lcfg,
                           const TrainConfig& tcfg, const EnsembleSpec& ens, uint64_t base_seed,
                           int jobs) {
    DEEPM_REQUIRE(ens.top_k <= ens.n_seeds, "top_k must be <= n_seeds");
    EnsembleRun run;
    run.seeds.resize(static_cast<size_t>(ens.n_seeds));
    jobs = std::max(1, jobs);
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    auto worker = [&]() {
        while (true) {
            int k = next.fetch_add(1);
            if (k >= ens.n_seeds) break;
            uint64_t seed = hash_combine(base_seed, static_cast<uint64_t>(k + 1));
            run.seeds[static_cast<size_t>(k)] =
                train_seed(seed, ds, train_range, val_range, pcfg, lcfg, tcfg);
        }
    };
    for (int j = 0; j < std::min(jobs, ens.n_seeds); ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    run.selected = ensemble_select(run.seeds, ens.top_k, &run.warning);
    return run;
}

}  // namespace deepm::train
