#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "deepm/policy.hpp"
#include "deepm/tape.hpp"

using namespace deepm;
using namespace deepm::policy;
using ad::Shape;
using ad::Tensor;

namespace {

std::vector<graph::AssetMeta> toy_universe(int n) {
    std::vector<graph::AssetMeta> u;
    for (int i = 0; i < n; ++i) {
        graph::AssetMeta m;
        m.ticker = "A" + std::to_string(i);
        m.macro_group = "G" + std::to_string(i / 2);
        m.region = (i % 3 == 0) ? "US" : (i % 3 == 1 ? "EU" : "JP");
        m.struct_bps = 1.0;
        m.liquidity_scalar = 1.0;
        u.push_back(m);
    }
    return u;
}

ForwardBatch toy_batch(int B, int N, int L, int F, const graph::MacroGraph* g, uint64_t seed,
                       bool train_mode = false) {
    Rng rng(seed);
    ForwardBatch fb;
    fb.B = B;
    fb.N = N;
    fb.L = L;
    fb.F = F;
    fb.features = Tensor(Shape{B, N, L, F});
    for (double& x : fb.features.v) x = 0.6 * rng.normal();
    fb.exist = Tensor(Shape{B, N, L}, 1.0);
    for (int i = 0; i < N; ++i) {
        fb.cost.push_back(1e-4);
        fb.close_rank.push_back(0);
    }
    fb.macro = g;
    fb.train_mode = train_mode;
    for (int b = 0; b < B; ++b) fb.sample_keys.push_back(hash_combine(seed, static_cast<uint64_t>(b)));
    return fb;
}

PolicyConfig toy_config(int N, int F, int d = 12) {
    PolicyConfig c;
    c.d_model = d;
    c.heads = 2;
    c.dropout = 0.0;
    c.n_assets = N;
    c.n_features = F;
    return c;
}

}  // namespace

TEST_CASE("vsn weights live on the simplex; uniform logits give 1/F") {
    const int B = 2, N = 4, L = 6, F = 7;
    auto u = toy_universe(N);
    auto g = graph::build_macro_graph(u);
    auto cfg = toy_config(N, F);
    PolicyModel model = PolicyModel::init(cfg, 3);
    auto fb = toy_batch(B, N, L, F, &g, 10);

    ForwardCapture cap;
    ad::Tape tape;
    policy_forward(tape, model, fb, &cap);
    REQUIRE(cap.vsn_weights.numel() == B * N * L * F);
    for (int64_t r = 0; r < B * N * L; ++r) {
        double s = 0.0;
        for (int f = 0; f < F; ++f) s += cap.vsn_weights.v[static_cast<size_t>(r * F + f)];
        CHECK(std::abs(s - 1.0) < 1e-12);
    }

    // zeroing the gate path makes logits constant: weights exactly 1/F
    PolicyModel m2 = PolicyModel::init(cfg, 3);
    for (int pid : {m2.ids.w_gate, m2.ids.b_gate})
        for (double& x : m2.store[pid].value.v) x = 0.0;
    ForwardCapture cap2;
    ad::Tape t2;
    policy_forward(t2, m2, fb, &cap2);
    for (double w : cap2.vsn_weights.v) CHECK(w == doctest::Approx(1.0 / F).epsilon(1e-14));
}

TEST_CASE("film identity: unit scale and zero shift reduce gates to a plain linear map") {
    const int B = 1, N = 2, L = 5, F = 7;
    auto u = toy_universe(N);
    auto g = graph::build_macro_graph(u);
    auto cfg = toy_config(N, F);
    PolicyModel model = PolicyModel::init(cfg, 7);
    // force gamma(s) = 1, beta(s) = 0
    for (double& x : model.store[model.ids.w_gamma].value.v) x = 0.0;
    for (double& x : model.store[model.ids.b_gamma].value.v) x = 1.0;
    for (double& x : model.store[model.ids.w_beta].value.v) x = 0.0;
    for (double& x : model.store[model.ids.b_beta].value.v) x = 0.0;

    auto fb = toy_batch(B, N, L, F, &g, 21);
    ForwardCapture cap;
    ad::Tape tape;
    policy_forward(tape, model, fb, &cap);

    // oracle: softmax(x @ w_gate + b_gate) straight from the raw features
    const Tensor& Wg = model.store[model.ids.w_gate].value;
    const Tensor& bg = model.store[model.ids.b_gate].value;
    for (int n = 0; n < N; ++n)
        for (int t = 0; t < L; ++t) {
            std::vector<double> logits(F, 0.0);
            for (int fo = 0; fo < F; ++fo) {
                double s = bg.v[static_cast<size_t>(fo)];
                for (int fi = 0; fi < F; ++fi) s += fb.features.at(0, n, t, fi) * Wg.at(fi, fo);
                logits[static_cast<size_t>(fo)] = s;
            }
            double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0.0;
            for (double& l : logits) {
                l = std::exp(l - mx);
                z += l;
            }
            for (int fo = 0; fo < F; ++fo)
                CHECK(cap.vsn_weights.at(0, n, t, fo) == doctest::Approx(logits[static_cast<size_t>(fo)] / z).epsilon(1e-12));
        }
}

TEST_CASE("action head: zero parameters give zero positions; tanh keeps |p| < 1") {
    const int B = 1, N = 3, L = 8, F = 7;
    auto u = toy_universe(N);
    auto g = graph::build_macro_graph(u);
    auto cfg = toy_config(N, F);
    PolicyModel model = PolicyModel::init(cfg, 5);
    auto fb = toy_batch(B, N, L, F, &g, 33);

    {
        PolicyModel zero = PolicyModel::init(cfg, 5);
        for (double& x : zero.store[zero.ids.w_head].value.v) x = 0.0;
        for (double& x : zero.store[zero.ids.b_head].value.v) x = 0.0;
        ad::Tape tape;
        const Tensor& p = tape.value(policy_forward(tape, zero, fb));
        for (double v : p.v) CHECK(v == 0.0);
    }
    {
        ad::Tape tape;
        const Tensor& p = tape.value(policy_forward(tape, model, fb));
        for (double v : p.v) CHECK(std::abs(v) < 1.0);
    }
    {
        auto fb2 = fb;
        fb2.exist.at(0, 1, 3) = 0.0;  // masked asset forced to zero
        ad::Tape tape;
        const Tensor& p = tape.value(policy_forward(tape, model, fb2));
        CHECK(p.at(0, 1, 3) == 0.0);
    }
}

TEST_CASE("independent config: outputs for one asset ignore every other asset") {
    const int B = 1, N = 4, L = 10, F = 7;
    auto cfg = toy_config(N, F);
    cfg.cross_attn = false;
    cfg.graph_mode = GraphMode::None;
    PolicyModel model = PolicyModel::init(cfg, 9);
    auto fb = toy_batch(B, N, L, F, nullptr, 44);
    ad::Tape t1;
    Tensor base = t1.value(policy_forward(t1, model, fb));
    auto fb2 = fb;
    for (int t = 0; t < L; ++t)
        for (int f = 0; f < F; ++f) fb2.features.at(0, 2, t, f) += 5.0;
    ad::Tape t2;
    Tensor pert = t2.value(policy_forward(t2, model, fb2));
    for (int i = 0; i < N; ++i) {
        if (i == 2) continue;
        for (int t = 0; t < L; ++t) CHECK(base.at(0, i, t) == pert.at(0, i, t));
    }
}

TEST_CASE("L = 1 sequence: attention reduces to self-only, output finite") {
    const int N = 3, F = 7;
    auto u = toy_universe(N);
    auto g = graph::build_macro_graph(u);
    auto cfg = toy_config(N, F);
    PolicyModel model = PolicyModel::init(cfg, 2);
    auto fb = toy_batch(1, N, 1, F, &g, 5);
    ad::Tape tape;
    const Tensor& p = tape.value(policy_forward(tape, model, fb));
    for (double v : p.v) CHECK(std::isfinite(v));
}

TEST_CASE("cascading with equal close ranks behaves exactly as directed delay") {
    const int B = 2, N = 4, L = 8, F = 7;
    auto u = toy_universe(N);
    auto g = graph::build_macro_graph(u);
    auto cfg = toy_config(N, F);
    cfg.protocol = Protocol::DirectedDelay;
    PolicyModel m1 = PolicyModel::init(cfg, 13);
    m1.store[m1.ids.alpha_cross].value.v[0] = 0.5;
    m1.store[m1.ids.alpha_gnn].value.v[0] = 0.4;
    auto fb = toy_batch(B, N, L, F, &g, 55);  // close_rank all zero

    cfg.protocol = Protocol::Cascading;
    PolicyModel m2 = PolicyModel::init(cfg, 13);
    m2.store[m2.ids.alpha_cross].value.v[0] = 0.5;
    m2.store[m2.ids.alpha_gnn].value.v[0] = 0.4;

    ad::Tape t1, t2;
    Tensor a = t1.value(policy_forward(t1, m1, fb));
    Tensor b = t2.value(policy_forward(t2, m2, fb));
    CHECK(ad::bitwise_equal(a, b));
}

TEST_CASE("cascading sees earlier-closing markets same-day, not the reverse") {
    const int B = 1, N = 4, L = 8, F = 7;
    auto u = toy_universe(N);
    auto g = graph::build_macro_graph(u);
    auto cfg = toy_config(N, F);
    cfg.protocol = Protocol::Cascading;
    PolicyModel model = PolicyModel::init(cfg, 17);
    model.store[model.ids.alpha_cross].value.v[0] = 0.5;
    model.store[model.ids.alpha_gnn].value.v[0] = 0.4;

    auto fb = toy_batch(B, N, L, F, &g, 66);
    const int jp = 0, us = 1;  // jp closes first
    fb.close_rank = {0, 1, 1, 1};
    ad::Tape t1;
    Tensor base = t1.value(policy_forward(t1, model, fb));

    const int t0 = 4;
    auto fb_jp = fb;
    for (int f = 0; f < F; ++f) fb_jp.features.at(0, jp, t0, f) += 2.0;
    ad::Tape t2;
    Tensor pert_jp = t2.value(policy_forward(t2, model, fb_jp));
    CHECK(base.at(0, us, t0) != pert_jp.at(0, us, t0));  // us sees jp same-day

    auto fb_us = fb;
    for (int f = 0; f < F; ++f) fb_us.features.at(0, us, t0, f) += 2.0;
    ad::Tape t3;
    Tensor pert_us = t3.value(policy_forward(t3, model, fb_us));
    CHECK(base.at(0, jp, t0) == pert_us.at(0, jp, t0));  // jp only sees us at t-1
}

TEST_CASE("parameter count follows the documented formula when d_model doubles") {
    auto count = [](int N, int F, int d, bool cross, GraphMode gm, bool rezero) {
        // independent recomputation of the header formula
        int64_t dd = d, FF = F, NN = N;
        int64_t c = NN * dd + (dd + 1) * dd + dd;
        c += 2 * (dd * FF + FF) + FF * FF + FF + 2 * FF * dd;
        c += 8 * dd * dd + 4 * dd + 2 * dd * dd + 2 * dd;
        int64_t adapters = 2;
        c += 4 * (dd * dd + dd);
        if (cross) {
            c += 4 * (dd * dd + dd) + 2 * dd + (rezero ? 1 : 0);
            adapters += 1;
        }
        if (gm == GraphMode::GAT) {
            c += 3 * dd * dd + 2 * dd + (rezero ? 1 : 0);
            adapters += 1;
        } else if (gm == GraphMode::GCN) {
            c += dd * dd + 2 * dd + (rezero ? 1 : 0);
            adapters += 1;
        }
        c += adapters * (6 * dd * dd + 7 * dd);
        c += dd + 1;
        return c;
    };
    for (int d : {8, 16}) {
        for (auto gm : {GraphMode::GAT, GraphMode::GCN, GraphMode::None}) {
            PolicyConfig cfg = toy_config(5, 7, d);
            cfg.graph_mode = gm;
            PolicyModel m = PolicyModel::init(cfg, 1);
            CHECK(m.parameter_count() == count(5, 7, d, true, gm, true));
        }
    }
    PolicyConfig small = toy_config(5, 7, 8);
    PolicyConfig big = toy_config(5, 7, 16);
    CHECK(PolicyModel::init(big, 1).parameter_count() ==
          count(5, 7, 16, true, GraphMode::GAT, true));
    CHECK(PolicyModel::init(small, 1).parameter_count() <
          PolicyModel::init(big, 1).parameter_count());
}

TEST_CASE("checkpoint round trip is bit-exact") {
    auto cfg = toy_config(4, 7, 12);
    cfg.protocol = Protocol::Cascading;
    cfg.graph_mode = GraphMode::GCN;
    PolicyModel model = PolicyModel::init(cfg, 77);
    Rng rng(5);
    for (auto& p : model.store.params)
        for (double& x : p.value.v) x += 0.01 * rng.normal();
    save_checkpoint(model, "/tmp/deepm_ckpt_test.bin");
    PolicyModel loaded = load_checkpoint("/tmp/deepm_ckpt_test.bin");
    CHECK(loaded.config.protocol == cfg.protocol);
    CHECK(loaded.config.graph_mode == cfg.graph_mode);
    REQUIRE(loaded.store.size() == model.store.size());
    for (size_t i = 0; i < model.store.size(); ++i) {
        CHECK(loaded.store[static_cast<int>(i)].name == model.store[static_cast<int>(i)].name);
        CHECK(loaded.store[static_cast<int>(i)].value.v == model.store[static_cast<int>(i)].value.v);
    }
}

TEST_CASE("full policy gradient passes the finite-difference oracle on a 3-asset toy") {
    const int B = 1, N = 3, L = 12, F = 7;
    auto u = toy_universe(N);
    auto g = graph::build_macro_graph(u);
    PolicyConfig cfg = toy_config(N, F, 8);
    cfg.dropout = 0.2;  // stochastic layers stay deterministic under fixed keys
    PolicyModel model = PolicyModel::init(cfg, 31);
    model.store[model.ids.alpha_cross].value.v[0] = 0.3;
    model.store[model.ids.alpha_gnn].value.v[0] = 0.2;
    auto fb = toy_batch(B, N, L, F, &g, 88, true);
    Tensor weights(Shape{B, N, L});
    Rng rng(6);
    for (double& w : weights.v) w = rng.normal();

    auto fn = [&](bool with_grad) {
        ad::Tape tape;
        ad::NodeId p = policy_forward(tape, model, fb);
        ad::NodeId loss = tape.reduce_sum_all(tape.mul(p, tape.input(weights)));
        if (with_grad) tape.backward(loss, Tensor::scalar(1.0));
        return tape.value(loss).v[0];
    };
    auto rep = ad::grad_check(fn, model.store, 3e-6);
    INFO("worst ", rep.max_rel_err, " at ", rep.worst_param, "[", rep.worst_coord, "]");
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("config validation rejects inconsistent ablation switches") {
    PolicyConfig cfg = toy_config(3, 7, 12);
    cfg.block_order = BlockOrder::GraphThenCross;
    cfg.cross_attn = false;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg.cross_attn = true;
    cfg.graph_mode = GraphMode::None;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg.graph_mode = GraphMode::GAT;
    CHECK_NOTHROW(cfg.validate());
}
