#include "deepm/policy.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace deepm::policy {

using ad::NodeId;
using ad::ParameterStore;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

void PolicyConfig::validate() const {
    DEEPM_REQUIRE(d_model > 0 && d_model % heads == 0, "d_model ", d_model,
                  " must be positive and divisible by heads ", heads);
    DEEPM_REQUIRE(dropout >= 0.0 && dropout < 1.0, "dropout out of range: ", dropout);
    DEEPM_REQUIRE(n_assets > 0, "n_assets not set");
    DEEPM_REQUIRE(n_features > 0, "n_features not set");
    if (block_order == BlockOrder::GraphThenCross)
        DEEPM_REQUIRE(cross_attn && graph_mode != GraphMode::None,
                      "GraphThenCross needs both spatial blocks enabled");
}

int64_t PolicyConfig::expected_param_count() const {
    int64_t d = d_model, F = n_features, N = n_assets;
    int64_t cnt = 0;
    cnt += N * d + (d + 1) * d + d;
    cnt += 2 * (d * F + F) + F * F + F + 2 * F * d;
    cnt += 8 * d * d + 4 * d + 2 * d * d + 2 * d;
    int64_t adapters = 2;
    cnt += 4 * (d * d + d);  // temporal MHA
    if (cross_attn) {
        cnt += 4 * (d * d + d) + 2 * d + (rezero ? 1 : 0);
        adapters += 1;
    }
    if (graph_mode == GraphMode::GAT)
        cnt += 3 * d * d + 2 * d + (rezero ? 1 : 0), adapters += 1;
    else if (graph_mode == GraphMode::GCN)
        cnt += d * d + 2 * d + (rezero ? 1 : 0), adapters += 1;
    cnt += adapters * (6 * d * d + 7 * d);
    cnt += d + 1;
    return cnt;
}

namespace {

Tensor xavier(Shape s, Rng& rng) {
    DEEPM_REQUIRE(s.ndim == 2, "xavier expects rank-2");
    double a = std::sqrt(6.0 / static_cast<double>(s.dim[0] + s.dim[1]));
    Tensor t(s);
    for (double& x : t.v) x = rng.uniform(-a, a);
    return t;
}

AdapterIds make_adapter(ParameterStore& st, const std::string& name, int d, Rng& rng) {
    int ff = 2 * d;
    AdapterIds a;
    a.w1 = st.add(name + ".w1", xavier(Shape{d, ff}, rng));
    a.b1 = st.add(name + ".b1", Tensor(Shape{ff}, 0.0));
    a.v = st.add(name + ".v", xavier(Shape{d, ff}, rng));
    a.bv = st.add(name + ".bv", Tensor(Shape{ff}, 0.0));
    a.w2 = st.add(name + ".w2", xavier(Shape{ff, d}, rng));
    a.b2 = st.add(name + ".b2", Tensor(Shape{d}, 0.0));
    a.ln_g = st.add(name + ".ln_g", Tensor(Shape{d}, 1.0));
    a.ln_b = st.add(name + ".ln_b", Tensor(Shape{d}, 0.0));
    return a;
}

MhaIds make_mha(ParameterStore& st, const std::string& name, int d, Rng& rng) {
    MhaIds m;
    m.wq = st.add(name + ".wq", xavier(Shape{d, d}, rng));
    m.bq = st.add(name + ".bq", Tensor(Shape{d}, 0.0));
    m.wk = st.add(name + ".wk", xavier(Shape{d, d}, rng));
    m.bk = st.add(name + ".bk", Tensor(Shape{d}, 0.0));
    m.wv = st.add(name + ".wv", xavier(Shape{d, d}, rng));
    m.bv = st.add(name + ".bv", Tensor(Shape{d}, 0.0));
    m.wo = st.add(name + ".wo", xavier(Shape{d, d}, rng));
    m.bo = st.add(name + ".bo", Tensor(Shape{d}, 0.0));
    return m;
}

// dropout lanes, one per stochastic site
enum Lane : uint64_t {
    kLaneAdLstm = 0,
    kLaneAdTemp = 1,
    kLaneAdCross = 2,
    kLaneAdGnn = 3,
    kLaneTempAttn = 4,
    kLaneCrossAttn = 5,
};

}  // namespace

PolicyModel PolicyModel::init(const PolicyConfig& config, uint64_t seed) {
    config.validate();
    PolicyModel m;
    m.config = config;
    Rng rng(hash_combine(seed, 0x9d01fULL));
    int d = config.d_model, F = config.n_features, N = config.n_assets;
    auto& st = m.store;
    auto& id = m.ids;

    {
        Tensor e(Shape{N, d});
        for (double& x : e.v) x = 0.1 * rng.normal();
        id.embed = st.add("static.embed", std::move(e));
    }
    id.w_s = st.add("static.w", xavier(Shape{d + 1, d}, rng));
    id.b_s = st.add("static.b", Tensor(Shape{d}, 0.0));

    id.w_gamma = st.add("vsn.w_gamma", xavier(Shape{d, F}, rng));
    id.b_gamma = st.add("vsn.b_gamma", Tensor(Shape{F}, 0.0));
    id.w_beta = st.add("vsn.w_beta", xavier(Shape{d, F}, rng));
    id.b_beta = st.add("vsn.b_beta", Tensor(Shape{F}, 0.0));
    id.w_gate = st.add("vsn.w_gate", xavier(Shape{F, F}, rng));
    id.b_gate = st.add("vsn.b_gate", Tensor(Shape{F}, 0.0));
    id.u_conv = st.add("vsn.u_conv", xavier(Shape{F, d}, rng));
    id.b_conv = st.add("vsn.b_conv", Tensor(Shape{F, d}, 0.0));

    id.w_x = st.add("lstm.w_x", xavier(Shape{d, 4 * d}, rng));
    id.w_h = st.add("lstm.w_h", xavier(Shape{d, 4 * d}, rng));
    {
        Tensor b(Shape{4 * d}, 0.0);
        for (int i = d; i < 2 * d; ++i) b.v[static_cast<size_t>(i)] = 1.0;  // forget-gate bias
        id.b_lstm = st.add("lstm.b", std::move(b));
    }
    id.w0 = st.add("lstm.w0", xavier(Shape{d, 2 * d}, rng));
    id.b0 = st.add("lstm.b0", Tensor(Shape{2 * d}, 0.0));

    id.ad_lstm = make_adapter(st, "adapter.lstm", d, rng);
    id.temp = make_mha(st, "temporal", d, rng);
    id.ad_temp = make_adapter(st, "adapter.temporal", d, rng);

    if (config.cross_attn) {
        id.cross = make_mha(st, "cross", d, rng);
        id.cross_ln_g = st.add("cross.ln_g", Tensor(Shape{d}, 1.0));
        id.cross_ln_b = st.add("cross.ln_b", Tensor(Shape{d}, 0.0));
        if (config.rezero) id.alpha_cross = st.add("cross.alpha", Tensor(Shape{1}, 0.0));
        id.ad_cross = make_adapter(st, "adapter.cross", d, rng);
    }
    if (config.graph_mode != GraphMode::None) {
        if (config.graph_mode == GraphMode::GAT) {
            id.gat_q = st.add("gnn.q", xavier(Shape{d, d}, rng));
            id.gat_k = st.add("gnn.k", xavier(Shape{d, d}, rng));
        }
        id.gat_w = st.add("gnn.w", xavier(Shape{d, d}, rng));
        id.gnn_ln_g = st.add("gnn.ln_g", Tensor(Shape{d}, 1.0));
        id.gnn_ln_b = st.add("gnn.ln_b", Tensor(Shape{d}, 0.0));
        if (config.rezero) id.alpha_gnn = st.add("gnn.alpha", Tensor(Shape{1}, 0.0));
        id.ad_gnn = make_adapter(st, "adapter.gnn", d, rng);
    }
    id.w_head = st.add("head.w", xavier(Shape{d, 1}, rng));
    id.b_head = st.add("head.b", Tensor(Shape{1}, 0.0));

    DEEPM_REQUIRE(m.store.total_count() == config.expected_param_count(),
                  "parameter count drifted from documented formula: ", m.store.total_count(),
                  " vs ", config.expected_param_count());
    return m;
}

namespace {

struct Ctx {
    Tape& tape;
    PolicyModel& model;
    const ForwardBatch& fb;
    ForwardCapture* capture;

    NodeId P(int id) { return tape.param(model.store, id); }

    NodeId linear(NodeId x, int w, int b) { return tape.add_bias(tape.matmul(x, P(w)), P(b)); }

    NodeId maybe_dropout(NodeId x, uint64_t lane) {
        if (!fb.train_mode || model.config.dropout <= 0.0) return x;
        return tape.dropout(x, model.config.dropout, lane, fb.sample_keys);
    }

    // y = x * (rezero_gain * alpha): the learnable gate starts at exactly zero
    // (identity block); the fixed gain only speeds up how fast an optimizer
    // step opens the gate.
    static constexpr double kRezeroGain = 4.0;
    NodeId scale_by_param(NodeId x, int alpha_id) {
        const Shape s = tape.value(x).shape;
        NodeId a = tape.scale(P(alpha_id), kRezeroGain);
        Shape ones;
        ones.ndim = s.ndim;
        for (int i = 0; i < s.ndim; ++i) ones.dim[i] = 1;
        a = tape.reshape(a, ones);
        for (int i = 0; i < s.ndim; ++i)
            if (s.dim[i] > 1) a = tape.broadcast(a, i, s.dim[i]);
        return tape.mul(x, a);
    }

    NodeId adapter(NodeId x, const AdapterIds& a, uint64_t lane) {
        NodeId u = tape.mul(linear(x, a.w1, a.b1), tape.silu(linear(x, a.v, a.bv)));
        NodeId y = maybe_dropout(linear(u, a.w2, a.b2), lane);
        return tape.layer_norm(tape.add(x, y), P(a.ln_g), P(a.ln_b));
    }
};

// [B,N,L,d] -> [B*N*heads, L, dh]
NodeId split_heads_time(Tape& t, NodeId x, int B, int N, int L, int d, int H) {
    int dh = d / H;
    NodeId r = t.reshape(x, Shape{static_cast<int64_t>(B) * N, L, H, dh});
    r = t.permute(r, {0, 2, 1, 3});
    return t.reshape(r, Shape{static_cast<int64_t>(B) * N * H, L, dh});
}
NodeId merge_heads_time(Tape& t, NodeId x, int B, int N, int L, int d, int H) {
    int dh = d / H;
    NodeId r = t.reshape(x, Shape{static_cast<int64_t>(B) * N, H, L, dh});
    r = t.permute(r, {0, 2, 1, 3});
    return t.reshape(r, Shape{B, N, L, d});
}

// [B,L,N,d] -> [B*L*heads, N, dh]
NodeId split_heads_asset(Tape& t, NodeId x, int B, int N, int L, int d, int H) {
    int dh = d / H;
    NodeId r = t.reshape(x, Shape{static_cast<int64_t>(B) * L, N, H, dh});
    r = t.permute(r, {0, 2, 1, 3});
    return t.reshape(r, Shape{static_cast<int64_t>(B) * L * H, N, dh});
}
NodeId merge_heads_asset(Tape& t, NodeId x, int B, int N, int L, int d, int H) {
    int dh = d / H;
    NodeId r = t.reshape(x, Shape{static_cast<int64_t>(B) * L, H, N, dh});
    r = t.permute(r, {0, 2, 1, 3});
    return t.reshape(r, Shape{static_cast<int64_t>(B) * L, N, d});  // caller reshapes to [B,L,N,d]
}

NodeId vsn_block(Ctx& cx, NodeId x, NodeId s_b) {
    Tape& t = cx.tape;
    const auto& id = cx.model.ids;
    int B = cx.fb.B, N = cx.fb.N, L = cx.fb.L, F = cx.fb.F;
    NodeId gamma = cx.linear(s_b, id.w_gamma, id.b_gamma);  // [B,N,F]
    NodeId beta = cx.linear(s_b, id.w_beta, id.b_beta);
    gamma = t.broadcast(t.reshape(gamma, Shape{B, N, 1, F}), 2, L);
    beta = t.broadcast(t.reshape(beta, Shape{B, N, 1, F}), 2, L);
    NodeId xf = t.add(t.mul(gamma, x), beta);
    NodeId w = t.softmax_masked(cx.linear(xf, id.w_gate, id.b_gate));  // weights over F
    if (cx.capture) cx.capture->vsn_weights = t.value(w);
    // kernel-1 grouped projection: sum_f w_f * (x_f * U_f + b_f)
    NodeId vx = t.matmul(t.mul(w, x), cx.P(id.u_conv));
    NodeId vb = t.matmul(w, cx.P(id.b_conv));
    return t.add(vx, vb);  // [B,N,L,d]
}

NodeId lstm_block(Ctx& cx, NodeId v, NodeId s_b) {
    Tape& t = cx.tape;
    const auto& id = cx.model.ids;
    int B = cx.fb.B, N = cx.fb.N, L = cx.fb.L, d = cx.model.config.d_model;
    NodeId hc = t.tanh_(cx.linear(s_b, id.w0, id.b0));  // [B,N,2d], primes the recurrence
    NodeId h = t.slice(hc, 2, 0, d);
    NodeId c = t.slice(hc, 2, d, d);
    std::vector<NodeId> hs;
    hs.reserve(static_cast<size_t>(L));
    for (int step = 0; step < L; ++step) {
        NodeId vt = t.reshape(t.slice(v, 2, step, 1), Shape{B, N, d});
        NodeId gates = t.add(cx.linear(vt, id.w_x, id.b_lstm), t.matmul(h, cx.P(id.w_h)));
        NodeId ig = t.sigmoid_(t.slice(gates, 2, 0, d));
        NodeId fg = t.sigmoid_(t.slice(gates, 2, d, d));
        NodeId gg = t.tanh_(t.slice(gates, 2, 2 * d, d));
        NodeId og = t.sigmoid_(t.slice(gates, 2, 3 * d, d));
        c = t.add(t.mul(fg, c), t.mul(ig, gg));
        h = t.mul(og, t.tanh_(c));
        hs.push_back(t.reshape(h, Shape{B, N, 1, d}));
    }
    return t.concat(hs, 2);  // [B,N,L,d]
}

NodeId temporal_attention(Ctx& cx, NodeId z) {
    Tape& t = cx.tape;
    const auto& id = cx.model.ids;
    int B = cx.fb.B, N = cx.fb.N, L = cx.fb.L, d = cx.model.config.d_model,
        H = cx.model.config.heads;
    NodeId q = split_heads_time(t, cx.linear(z, id.temp.wq, id.temp.bq), B, N, L, d, H);
    NodeId k = split_heads_time(t, cx.linear(z, id.temp.wk, id.temp.bk), B, N, L, d, H);
    NodeId v = split_heads_time(t, cx.linear(z, id.temp.wv, id.temp.bv), B, N, L, d, H);
    NodeId scores = t.scale(t.matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d / H)));
    Tensor causal(Shape{L, L}, 0.0);  // query attends to keys <= its own step
    for (int i = 0; i < L; ++i)
        for (int j = 0; j <= i; ++j) causal.at(i, j) = 1.0;
    NodeId attn = t.softmax_masked(scores, causal);
    NodeId out = merge_heads_time(t, t.matmul(attn, v), B, N, L, d, H);
    return cx.maybe_dropout(cx.linear(out, id.temp.wo, id.temp.bo), kLaneTempAttn);
}

// existence expanded over channels, [B,N,L,d]
NodeId exist_full(Ctx& cx) {
    Tape& t = cx.tape;
    int B = cx.fb.B, N = cx.fb.N, L = cx.fb.L, d = cx.model.config.d_model;
    Tensor e4(Shape{B, N, L, 1});
    for (int64_t i = 0; i < cx.fb.exist.numel(); ++i) e4.v[static_cast<size_t>(i)] = cx.fb.exist.v[static_cast<size_t>(i)];
    return t.broadcast(t.input(std::move(e4)), 3, d);
}

// Filtration-compliant context masks for one spatial block. same_sel[i][j]=1
// when query i may see key j's same-day state (cascading: j closes strictly
// earlier; directed delay: never).
struct SpatialMasks {
    Tensor same_sel;   // [N,N]
    Tensor lag_sel;    // [N,N]
    Tensor valid;      // [B*L*H, N, N] softmax validity
    Tensor same_full;  // [B*L*H, N, N] same_sel with key existence applied
    Tensor lag_full;
};

SpatialMasks build_spatial_masks(const ForwardBatch& fb, int heads, bool cascading) {
    int B = fb.B, N = fb.N, L = fb.L, H = heads;
    SpatialMasks m;
    m.same_sel = Tensor(Shape{N, N}, 0.0);
    m.lag_sel = Tensor(Shape{N, N}, 0.0);
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) {
            bool same = cascading && fb.close_rank[static_cast<size_t>(j)] < fb.close_rank[static_cast<size_t>(i)];
            m.same_sel.at(i, j) = same ? 1.0 : 0.0;
            m.lag_sel.at(i, j) = same ? 0.0 : 1.0;
        }
    Shape full{static_cast<int64_t>(B) * L * H, N, N};
    m.valid = Tensor(full, 0.0);
    m.same_full = Tensor(full, 0.0);
    m.lag_full = Tensor(full, 0.0);
    auto ex = [&](int b, int j, int t) { return fb.exist.at(b, j, t); };
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < L; ++t)
            for (int h = 0; h < H; ++h) {
                int64_t row = (static_cast<int64_t>(b) * L + t) * H + h;
                for (int i = 0; i < N; ++i)
                    for (int j = 0; j < N; ++j) {
                        // t = 0 has no previous close: the whole context is masked
                        double same_ok = (t > 0) ? m.same_sel.at(i, j) * ex(b, j, t) : 0.0;
                        double lag_ok = (t > 0) ? m.lag_sel.at(i, j) * ex(b, j, t - 1) : 0.0;
                        int64_t idx = (row * N + i) * N + j;
                        m.same_full.v[static_cast<size_t>(idx)] = same_ok;
                        m.lag_full.v[static_cast<size_t>(idx)] = lag_ok;
                        m.valid.v[static_cast<size_t>(idx)] = (same_ok + lag_ok) > 0.0 ? 1.0 : 0.0;
                    }
            }
    return m;
}

// Post-norm ReZero cross-sectional MHA over the delayed context.
NodeId cross_block(Ctx& cx, NodeId Hin, NodeId e4) {
    Tape& t = cx.tape;
    const auto& cfg = cx.model.config;
    const auto& id = cx.model.ids;
    int B = cx.fb.B, N = cx.fb.N, L = cx.fb.L, d = cfg.d_model, H = cfg.heads;
    bool cascading = cfg.protocol == Protocol::Cascading;

    NodeId Hq = t.permute(Hin, {0, 2, 1, 3});                  // [B,L,N,d]
    NodeId Hlag = t.permute(t.time_shift(Hin, 2), {0, 2, 1, 3});

    NodeId q = split_heads_asset(t, cx.linear(Hq, id.cross.wq, id.cross.bq), B, N, L, d, H);
    NodeId k_lag = split_heads_asset(t, cx.linear(Hlag, id.cross.wk, id.cross.bk), B, N, L, d, H);
    NodeId v_lag = split_heads_asset(t, cx.linear(Hlag, id.cross.wv, id.cross.bv), B, N, L, d, H);

    SpatialMasks masks = build_spatial_masks(cx.fb, H, cascading);
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d / H));
    NodeId scores;
    NodeId k_same = -1, v_same = -1;
    if (cascading) {
        k_same = split_heads_asset(t, cx.linear(Hq, id.cross.wk, id.cross.bk), B, N, L, d, H);
        v_same = split_heads_asset(t, cx.linear(Hq, id.cross.wv, id.cross.bv), B, N, L, d, H);
        NodeId s_same = t.mul(t.scale(t.matmul(q, k_same, false, true), inv_sqrt), t.input(masks.same_full));
        NodeId s_lag = t.mul(t.scale(t.matmul(q, k_lag, false, true), inv_sqrt), t.input(masks.lag_full));
        scores = t.add(s_same, s_lag);
    } else {
        scores = t.scale(t.matmul(q, k_lag, false, true), inv_sqrt);
    }
    NodeId attn = t.softmax_masked(scores, masks.valid);
    if (cx.capture) cx.capture->cross_attention = t.value(attn);

    NodeId mixed;
    if (cascading) {
        mixed = t.add(t.matmul(t.mul(attn, t.input(masks.same_full)), v_same),
                      t.matmul(t.mul(attn, t.input(masks.lag_full)), v_lag));
    } else {
        mixed = t.matmul(attn, v_lag);
    }
    NodeId out = t.reshape(merge_heads_asset(t, mixed, B, N, L, d, H), Shape{B, L, N, d});
    out = t.permute(out, {0, 2, 1, 3});  // back to [B,N,L,d]
    out = cx.maybe_dropout(cx.linear(out, id.cross.wo, id.cross.bo), kLaneCrossAttn);
    if (cfg.rezero) out = cx.scale_by_param(out, id.alpha_cross);
    NodeId hn = t.layer_norm(t.add(Hin, out), cx.P(id.cross_ln_g), cx.P(id.cross_ln_b));
    NodeId hc = cx.adapter(hn, id.ad_cross, kLaneAdCross);
    return t.mul(hc, e4);  // invalid node rows zeroed after the block
}

NodeId graph_block(Ctx& cx, NodeId Hin, NodeId e4) {
    Tape& t = cx.tape;
    const auto& cfg = cx.model.config;
    const auto& id = cx.model.ids;
    if (cfg.graph_mode == GraphMode::None) return Hin;
    DEEPM_REQUIRE(cx.fb.macro != nullptr && cx.fb.macro->n == cx.fb.N,
                  "graph layer needs macro graph aligned with asset order");
    int B = cx.fb.B, N = cx.fb.N, L = cx.fb.L, d = cfg.d_model;
    const graph::MacroGraph& g = *cx.fb.macro;

    NodeId Hq = t.reshape(t.permute(Hin, {0, 2, 1, 3}), Shape{static_cast<int64_t>(B) * L, N, d});
    NodeId Hlag = t.reshape(t.permute(t.time_shift(Hin, 2), {0, 2, 1, 3}),
                            Shape{static_cast<int64_t>(B) * L, N, d});

    // key validity: graph edge present and key asset existed at t-1
    Tensor valid(Shape{static_cast<int64_t>(B) * L, N, N}, 0.0);
    for (int b = 0; b < B; ++b)
        for (int tt = 0; tt < L; ++tt)
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < N; ++j) {
                    double ok = (tt > 0 && g.a(i, j) > 0.0) ? cx.fb.exist.at(b, j, tt - 1) : 0.0;
                    valid.v[static_cast<size_t>((((static_cast<int64_t>(b) * L + tt) * N + i) * N + j))] = ok;
                }

    NodeId wv = t.matmul(Hlag, cx.P(id.gat_w));  // [B*L,N,d]
    NodeId agg;
    if (cfg.graph_mode == GraphMode::GAT) {
        NodeId q = t.matmul(Hq, cx.P(id.gat_q));
        NodeId k = t.matmul(Hlag, cx.P(id.gat_k));
        NodeId scores = t.scale(t.matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d)));
        Tensor lnA(Shape{N, N}, 0.0);  // log-adjacency structural bias
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < N; ++j) lnA.at(i, j) = g.a(i, j) > 0.0 ? std::log(g.a(i, j)) : 0.0;
        NodeId attn = t.softmax_masked(scores, valid, lnA);
        if (cx.capture) cx.capture->graph_attention = t.value(attn);
        agg = t.matmul(attn, wv);
    } else {
        // isotropic spectral weights 1/sqrt(deg_i deg_j), masked like the GAT path
        Tensor spectral(Shape{static_cast<int64_t>(B) * L, N, N}, 0.0);
        for (int64_t r = 0; r < static_cast<int64_t>(B) * L; ++r)
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < N; ++j) {
                    double di = g.degree[static_cast<size_t>(i)], dj = g.degree[static_cast<size_t>(j)];
                    double w = (g.a(i, j) > 0.0 && di > 0.0 && dj > 0.0) ? g.a(i, j) / std::sqrt(di * dj) : 0.0;
                    spectral.v[static_cast<size_t>((r * N + i) * N + j)] =
                        w * valid.v[static_cast<size_t>((r * N + i) * N + j)];
                }
        if (cx.capture) cx.capture->graph_attention = spectral;
        agg = t.matmul(t.input(std::move(spectral)), wv);
    }
    agg = t.permute(t.reshape(agg, Shape{B, L, N, d}), {0, 2, 1, 3});
    if (cfg.rezero) agg = cx.scale_by_param(agg, id.alpha_gnn);
    NodeId hn = t.layer_norm(t.add(Hin, agg), cx.P(id.gnn_ln_g), cx.P(id.gnn_ln_b));
    NodeId hg = cx.adapter(hn, id.ad_gnn, kLaneAdGnn);
    return t.mul(hg, e4);
}

}  // namespace

NodeId policy_forward(Tape& tape, PolicyModel& model, const ForwardBatch& fb,
                      ForwardCapture* capture) {
    const auto& cfg = model.config;
    cfg.validate();
    DEEPM_REQUIRE((fb.features.shape == Shape{fb.B, fb.N, fb.L, fb.F}), "features shape mismatch");
    DEEPM_REQUIRE((fb.exist.shape == Shape{fb.B, fb.N, fb.L}), "exist shape mismatch");
    DEEPM_REQUIRE(static_cast<int>(fb.cost.size()) == fb.N, "cost vector size mismatch");
    DEEPM_REQUIRE(fb.N == cfg.n_assets && fb.F == cfg.n_features, "batch does not match config");
    DEEPM_REQUIRE(static_cast<int>(fb.sample_keys.size()) == fb.B || !fb.train_mode,
                  "train mode needs one dropout key per sequence");

    Ctx cx{tape, model, fb, capture};
    int B = fb.B, N = fb.N, L = fb.L, d = cfg.d_model;

    // static context s_i = Linear([e_i; c_i]) shared across the batch
    Tensor cvec(Shape{N, 1});
    for (int i = 0; i < N; ++i) cvec.at(i, 0) = fb.cost[static_cast<size_t>(i)];
    NodeId s = cx.linear(tape.concat({cx.P(model.ids.embed), tape.input(std::move(cvec))}, 1),
                         model.ids.w_s, model.ids.b_s);
    NodeId s_b = tape.broadcast(tape.reshape(s, Shape{1, N, d}), 0, B);

    NodeId x = tape.input(fb.features);
    NodeId v = vsn_block(cx, x, s_b);
    NodeId h_lstm = lstm_block(cx, v, s_b);
    NodeId z = cx.adapter(h_lstm, model.ids.ad_lstm, kLaneAdLstm);
    NodeId h_temp = temporal_attention(cx, z);
    NodeId H = cx.adapter(h_temp, model.ids.ad_temp, kLaneAdTemp);

    NodeId e4 = exist_full(cx);
    if (cfg.block_order == BlockOrder::CrossThenGraph) {
        if (cfg.cross_attn) H = cross_block(cx, H, e4);
        H = graph_block(cx, H, e4);
    } else {
        H = graph_block(cx, H, e4);
        if (cfg.cross_attn) H = cross_block(cx, H, e4);
    }

    NodeId a = cx.linear(H, model.ids.w_head, model.ids.b_head);  // [B,N,L,1]
    NodeId p = tape.tanh_(tape.reshape(a, Shape{B, N, L}));
    return tape.mul(p, tape.input(fb.exist));  // masked assets forced to zero
}

NodeId net_returns_node(Tape& tape, NodeId positions, const ForwardBatch& fb,
                        const ReturnsInputs& ri) {
    int B = fb.B, N = fb.N, L = fb.L;
    DEEPM_REQUIRE((tape.value(positions).shape == Shape{B, N, L}), "positions shape mismatch");
    DEEPM_REQUIRE((ri.y.shape == Shape{B, N, L} && ri.inv_sigma.shape == Shape{B, N, L}),
                  "returns inputs shape mismatch");
    DEEPM_REQUIRE((ri.inv_live.shape == Shape{B, L}), "inv_live shape mismatch");

    // gross: (1/N_t) sum_i m * p * y   (y already carries the mask)
    Tensor my(Shape{B, N, L});
    for (int64_t i = 0; i < my.numel(); ++i) my.v[static_cast<size_t>(i)] = ri.y.v[static_cast<size_t>(i)] * fb.exist.v[static_cast<size_t>(i)];
    NodeId gross = tape.reduce_sum(tape.mul(positions, tape.input(std::move(my))), 1);

    // cost: (gamma/N_t) sum_i m * c_i * |w_t - w_{t-1}|, w_{-1} = 0
    NodeId w = tape.mul(positions, tape.input(ri.inv_sigma));
    NodeId dw = tape.abs_(tape.sub(w, tape.time_shift(w, 2)));
    Tensor mc(Shape{B, N, L});
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < N; ++i)
            for (int t = 0; t < L; ++t)
                mc.at(b, i, t) = ri.gamma * fb.cost[static_cast<size_t>(i)] * fb.exist.at(b, i, t);
    NodeId cost = tape.reduce_sum(tape.mul(dw, tape.input(std::move(mc))), 1);

    NodeId inv_live = tape.input(ri.inv_live);
    return tape.mul(tape.sub(gross, cost), inv_live);  // [B,L]
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'D', 'P', 'M', 'C', 'K', '0', '0', '1'};

nlohmann::json config_to_json(const PolicyConfig& c) {
    return nlohmann::json{{"d_model", c.d_model},
                          {"heads", c.heads},
                          {"dropout", c.dropout},
                          {"protocol", protocol_to_string(c.protocol)},
                          {"graph_mode", graph_mode_to_string(c.graph_mode)},
                          {"cross_attn", c.cross_attn},
                          {"block_order", block_order_to_string(c.block_order)},
                          {"rezero", c.rezero},
                          {"n_assets", c.n_assets},
                          {"n_features", c.n_features}};
}

PolicyConfig config_from_json(const nlohmann::json& j) {
    PolicyConfig c;
    c.d_model = j.at("d_model").get<int>();
    c.heads = j.at("heads").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.protocol = protocol_from_string(j.at("protocol").get<std::string>());
    c.graph_mode = graph_mode_from_string(j.at("graph_mode").get<std::string>());
    c.cross_attn = j.at("cross_attn").get<bool>();
    c.block_order = block_order_from_string(j.at("block_order").get<std::string>());
    c.rezero = j.at("rezero").get<bool>();
    c.n_assets = j.at("n_assets").get<int>();
    c.n_features = j.at("n_features").get<int>();
    return c;
}
}  // namespace

void save_checkpoint(const PolicyModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    DEEPM_REQUIRE(out.good(), "cannot write checkpoint ", path);
    out.write(kMagic, 8);
    std::string cfg = config_to_json(model.config).dump();
    uint64_t n = cfg.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    uint64_t np = model.store.size();
    out.write(reinterpret_cast<const char*>(&np), 8);
    for (const auto& p : model.store.params) {
        uint64_t nl = p.name.size();
        out.write(reinterpret_cast<const char*>(&nl), 8);
        out.write(p.name.data(), static_cast<std::streamsize>(nl));
        int32_t nd = p.value.shape.ndim;
        out.write(reinterpret_cast<const char*>(&nd), 4);
        for (int i = 0; i < nd; ++i) {
            int64_t dd = p.value.shape.dim[i];
            out.write(reinterpret_cast<const char*>(&dd), 8);
        }
        out.write(reinterpret_cast<const char*>(p.value.v.data()),
                  static_cast<std::streamsize>(p.value.v.size() * sizeof(double)));
    }
}

PolicyModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    DEEPM_REQUIRE(in.good(), "cannot open checkpoint ", path);
    char magic[8];
    in.read(magic, 8);
    DEEPM_REQUIRE(std::memcmp(magic, kMagic, 8) == 0, "bad checkpoint magic in ", path);
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    std::string cfg(n, '\0');
    in.read(cfg.data(), static_cast<std::streamsize>(n));
    PolicyConfig config = config_from_json(nlohmann::json::parse(cfg));
    PolicyModel model = PolicyModel::init(config, 0);
    uint64_t np = 0;
    in.read(reinterpret_cast<char*>(&np), 8);
    DEEPM_REQUIRE(np == model.store.size(), "checkpoint param count mismatch");
    for (auto& p : model.store.params) {
        uint64_t nl = 0;
        in.read(reinterpret_cast<char*>(&nl), 8);
        std::string name(nl, '\0');
        in.read(name.data(), static_cast<std::streamsize>(nl));
        DEEPM_REQUIRE(name == p.name, "checkpoint param order mismatch: ", name, " vs ", p.name);
        int32_t nd = 0;
        in.read(reinterpret_cast<char*>(&nd), 4);
        DEEPM_REQUIRE(nd == p.value.shape.ndim, "checkpoint rank mismatch for ", name);
        for (int i = 0; i < nd; ++i) {
            int64_t dd = 0;
            in.read(reinterpret_cast<char*>(&dd), 8);
            DEEPM_REQUIRE(dd == p.value.shape.dim[i], "checkpoint dim mismatch for ", name);
        }
        in.read(reinterpret_cast<char*>(p.value.v.data()),
                static_cast<std::streamsize>(p.value.v.size() * sizeof(double)));
    }
    DEEPM_REQUIRE(in.good(), "checkpoint truncated: ", path);
    return model;
}

std::string protocol_to_string(Protocol p) {
    return p == Protocol::DirectedDelay ? "directed_delay" : "cascading";
}
Protocol protocol_from_string(const std::string& s) {
    if (s == "directed_delay") return Protocol::DirectedDelay;
    if (s == "cascading") return Protocol::Cascading;
    fail("unknown protocol '", s, "' (directed_delay|cascading)");
}
std::string graph_mode_to_string(GraphMode m) {
    switch (m) {
        case GraphMode::GAT: return "gat";
        case GraphMode::GCN: return "gcn";
        case GraphMode::None: return "none";
    }
    return "?";
}
GraphMode graph_mode_from_string(const std::string& s) {
    if (s == "gat") return GraphMode::GAT;
    if (s == "gcn") return GraphMode::GCN;
    if (s == "none") return GraphMode::None;
    fail("unknown graph mode '", s, "' (gat|gcn|none)");
}
std::string block_order_to_string(BlockOrder b) {
    return b == BlockOrder::CrossThenGraph ? "cross_then_graph" : "graph_then_cross";
}
BlockOrder block_order_from_string(const std::string& s) {
    if (s == "cross_then_graph") return BlockOrder::CrossThenGraph;
    if (s == "graph_then_cross") return BlockOrder::GraphThenCross;
    fail("unknown block order '", s, "' (cross_then_graph|graph_then_cross)");
}

}  // namespace deepm::policy
