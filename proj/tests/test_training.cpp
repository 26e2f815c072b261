#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "deepm/training.hpp"
#include "deepm/verify.hpp"

using namespace deepm;
using namespace deepm::train;

TEST_CASE("optimizer: no-op, decoupled decay, clipping and NaN skipping") {
    TrainConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.weight_decay = 0.0;
    cfg.grad_clip_norm = 1.0;
    ad::ParameterStore store;
    store.add("w", ad::Tensor::from(ad::Shape{2}, {1.0, -2.0}));

    AdamState st;
    optimizer_step(store, st, cfg);  // zero gradient, zero decay: unchanged
    CHECK(store[0].value.v[0] == 1.0);
    CHECK(store[0].value.v[1] == -2.0);

    cfg.weight_decay = 0.1;  // zero gradient: pure shrink by (1 - lr*wd)
    optimizer_step(store, st, cfg);
    CHECK(store[0].value.v[0] == doctest::Approx(1.0 * (1.0 - 0.01 * 0.1)).epsilon(1e-15));
    CHECK(store[0].value.v[1] == doctest::Approx(-2.0 * (1.0 - 0.01 * 0.1)).epsilon(1e-15));

    store[0].grad.v = {6.0, 8.0};  // norm 10, clip 1.0
    auto info = optimizer_step(store, st, cfg);
    CHECK(info.grad_norm == doctest::Approx(10.0).epsilon(1e-14));
    CHECK(info.applied_norm == doctest::Approx(1.0).epsilon(1e-12));

    store[0].grad.v = {std::numeric_limits<double>::quiet_NaN(), 0.0};
    auto before = store[0].value.v;
    auto skipped = optimizer_step(store, st, cfg);
    CHECK(skipped.skipped);
    CHECK(st.skipped == 1);
    CHECK(store[0].value.v == before);
}

TEST_CASE("ema early stop: rising, constant-after-burn-in, and spike traces") {
    TrainConfig cfg;
    cfg.ema_alpha = 0.45;
    cfg.min_delta = 0.001;
    cfg.patience = 5;
    cfg.stop_burn_in = 20;

    {  // monotonically rising score never stops
        EmaEarlyStop es(cfg);
        bool stopped = false;
        for (int it = 1; it <= 200; ++it)
            if (es.observe(0.01 * it, it).stop) stopped = true;
        CHECK(!stopped);
    }
    {  // constant score stops exactly at burn_in + patience evaluations
        EmaEarlyStop es(cfg);
        int stop_at = -1;
        for (int it = 1; it <= 100 && stop_at < 0; ++it)
            if (es.observe(0.5, it).stop) stop_at = it;
        CHECK(stop_at == cfg.stop_burn_in + cfg.patience);
    }
    {  // single spike then flat: smoothed peak lags the raw peak
        EmaEarlyStop es(cfg);
        std::vector<double> raw;
        for (int it = 1; it <= 60; ++it) raw.push_back(it == 30 ? 2.0 : 0.1);
        double sm = 0.0;
        int best_manual = -1;
        double best_val = -1e300;
        for (int it = 1; it <= 60; ++it) {
            sm = (it == 1) ? raw[0] : 0.45 * raw[static_cast<size_t>(it - 1)] + 0.55 * sm;
            if (sm > best_val + cfg.min_delta) {
                best_val = sm;
                best_manual = it;
            }
            es.observe(raw[static_cast<size_t>(it - 1)], it);
        }
        CHECK(es.best_eval() == best_manual);
        CHECK(best_manual == 30);  // EMA peak sits at the spike itself...
        CHECK(es.best_smoothed() == doctest::Approx(best_val).epsilon(1e-12));
        // ...but the smoothed peak value is far below the raw spike
        CHECK(es.best_smoothed() < 2.0);
    }
}

TEST_CASE("walk-forward plan: 15-year span gives 2 expanding blocks") {
    auto plan = walk_forward_plan(3780, 5, 0.1, 252);
    REQUIRE(plan.blocks.size() == 2);
    CHECK(plan.blocks[0].val.end == 1260);
    CHECK(plan.blocks[0].test.begin == 1260);
    CHECK(plan.blocks[0].test.end == 2520);
    CHECK(plan.blocks[1].val.end == 2520);
    CHECK(plan.blocks[1].test.begin == 2520);
    CHECK(plan.blocks[1].test.end == 3780);
    // expanding train, validation = final 10% of the raw train range, contiguous
    CHECK(plan.blocks[0].train.begin == 0);
    CHECK(plan.blocks[0].val.len() == 126);
    CHECK(plan.blocks[0].train.end == plan.blocks[0].val.begin);
    CHECK(plan.blocks[1].val.len() == 252);
    // ordering invariant: no train/val date at or beyond the first test date
    for (const auto& b : plan.blocks) {
        CHECK(b.train.end <= b.test.begin);
        CHECK(b.val.end <= b.test.begin);
    }
    // insufficient data errors out, naming the minimum span
    try {
        walk_forward_plan(1000, 5, 0.1, 252);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("2520") != std::string::npos);
    }
}

TEST_CASE("make_sequences: non-overlapping after burn-in exclusion") {
    auto starts = make_sequences(0, 168, 84, 21);
    REQUIRE(starts.size() == 2);
    CHECK(starts[0] == 0);
    CHECK(starts[1] == 63);
    auto none = make_sequences(0, 80, 84, 21);
    CHECK(none.empty());
}

TEST_CASE("sequence model: burn-in steps carry zero loss mask") {
    auto ds = verify::toy_dataset(4, 700, 3, 0.4);
    policy::PolicyConfig pcfg;
    pcfg.d_model = 8;
    pcfg.heads = 2;
    pcfg.n_assets = ds.N;
    pcfg.n_features = ds.features.n_features;
    auto model = policy::PolicyModel::init(pcfg, 1);
    PolicySequenceModel seq(model, ds, {300, 363}, 84, 21, 0.5, 9);
    const auto& mask = seq.loss_mask();
    for (int b = 0; b < 2; ++b) {
        for (int t = 0; t < 21; ++t) CHECK(mask[static_cast<size_t>(b * 84 + t)] == 0.0);
        for (int t = 21; t < 84; ++t) CHECK(mask[static_cast<size_t>(b * 84 + t)] == 1.0);
    }
}

TEST_CASE("train_seed: determinism and the zero-iteration path") {
    auto ds = verify::toy_dataset(4, 700, 5, 0.5);
    policy::PolicyConfig pcfg;
    pcfg.d_model = 8;
    pcfg.heads = 2;
    pcfg.dropout = 0.3;
    pcfg.n_assets = ds.N;
    pcfg.n_features = ds.features.n_features;
    objective::LossConfig lcfg;
    lcfg.burn_in = 10;
    TrainConfig tcfg;
    tcfg.iterations = 2;
    tcfg.batch_size = 4;
    tcfg.microbatch = 2;
    tcfg.seq_len = 42;
    tcfg.burn_in_train = 10;
    tcfg.burn_in_test = 10;
    DateRange tr{260, 560}, vr{560, 660};

    auto a = train_seed(11, ds, tr, vr, pcfg, lcfg, tcfg);
    auto b = train_seed(11, ds, tr, vr, pcfg, lcfg, tcfg);
    REQUIRE(a.ok);
    CHECK(a.model.store.flat_values() == b.model.store.flat_values());
    CHECK(a.val_history == b.val_history);

    TrainConfig zero = tcfg;
    zero.iterations = 0;
    auto c = train_seed(12, ds, tr, vr, pcfg, lcfg, zero);
    REQUIRE(c.ok);
    CHECK(c.val_history.size() == 1);
    CHECK(std::isfinite(c.best_smoothed_val));
    // untrained: parameters equal a fresh init
    auto fresh = policy::PolicyModel::init(pcfg, 12);
    CHECK(c.model.store.flat_values() == fresh.store.flat_values());
}

TEST_CASE("ensemble selection: ranking, K=1, duplicates and shortfall warning") {
    std::vector<TrainedSeed> seeds(4);
    for (size_t i = 0; i < 4; ++i) {
        seeds[i].ok = true;
        seeds[i].seed = i;
    }
    seeds[0].best_smoothed_val = 0.3;
    seeds[1].best_smoothed_val = 0.9;
    seeds[2].best_smoothed_val = -0.1;
    seeds[3].best_smoothed_val = 0.9;  // tie with 1: lower seed wins

    auto top1 = ensemble_select(seeds, 1);
    REQUIRE(top1.size() == 1);
    CHECK(top1[0] == 1);

    auto top2 = ensemble_select(seeds, 2);
    CHECK(top2 == std::vector<size_t>{1, 3});

    seeds[2].ok = false;
    seeds[0].ok = false;
    std::string warning;
    auto fallback = ensemble_select(seeds, 3, &warning);
    CHECK(fallback.size() == 2);
    CHECK(!warning.empty());

    // averaging identical members reproduces any one of them
    std::vector<std::vector<double>> members = {{0.1, -0.2, 0.3}, {0.1, -0.2, 0.3}};
    CHECK(average_positions(members) == members[0]);
}

TEST_CASE("planted lead-lag smoke run reaches a positive validation Sharpe") {
    data::SynthSpec spec;
    spec.n_assets = 6;
    spec.n_days = 2500;
    spec.seed = 9;
    spec.trend_vol = 0.003;
    spec.pairs = {{0, 1, 0.8}, {2, 3, 0.8}, {4, 5, 0.8}};
    auto panel = data::synth_generate(spec);
    auto ds = Dataset::build(std::move(panel),
                             graph::synth_universe(6, spec.effective_groups()),
                             data::FeatureSubset::RawMomentum);
    policy::PolicyConfig pcfg;
    pcfg.d_model = 16;
    pcfg.heads = 2;
    pcfg.dropout = 0.3;
    pcfg.n_assets = ds.N;
    pcfg.n_features = ds.features.n_features;
    objective::LossConfig lcfg;
    lcfg.burn_in = 21;
    TrainConfig tcfg;
    tcfg.iterations = 100;
    tcfg.learning_rate = 1e-3;
    tcfg.weight_decay = 1e-3;
    tcfg.batch_size = 16;
    tcfg.microbatch = 8;
    tcfg.seq_len = 84;
    tcfg.eval_every = 5;
    tcfg.patience = 100;
    DateRange tr{252, 2000}, vr{2000, 2480};
    auto ts = train_seed(1, ds, tr, vr, pcfg, lcfg, tcfg);
    REQUIRE(ts.ok);
    INFO("val history size ", ts.val_history.size(), " best ", ts.best_smoothed_val);
    CHECK(ts.best_smoothed_val > 0.0);
}

TEST_CASE("forward_positions covers the range and respects masks") {
    auto ds = verify::toy_dataset(4, 700, 7, 0.4);
    policy::PolicyConfig pcfg;
    pcfg.d_model = 8;
    pcfg.heads = 2;
    pcfg.n_assets = ds.N;
    pcfg.n_features = ds.features.n_features;
    auto model = policy::PolicyModel::init(pcfg, 3);
    DateRange range{400, 640};
    auto pos = forward_positions(model, ds, range, 84, 63);
    REQUIRE(static_cast<int>(pos.size()) == ds.N * range.len());
    for (int i = 0; i < ds.N; ++i)
        for (int k = 0; k < range.len(); ++k) {
            double p = pos[static_cast<size_t>(i * range.len() + k)];
            CHECK(std::abs(p) < 1.0);
            if (!ds.features.ex(i, range.begin + k)) CHECK(p == 0.0);
        }
    // deterministic
    auto pos2 = forward_positions(model, ds, range, 84, 63);
    CHECK(pos == pos2);
}
