#include "deepm/verify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "deepm/baselines.hpp"

namespace deepm::verify {

using objective::LossConfig;
using objective::ReturnMatrix;

namespace {

std::string fmt(double v) { return format_double(v, 6); }

CheckResult make_result(const std::string& name, bool pass, const std::string& detail) {
    return CheckResult{name, pass, detail};
}

}  // namespace

train::Dataset toy_dataset(int n_assets, int n_days, uint64_t seed, double coupling) {
    data::SynthSpec spec;
    spec.n_assets = n_assets;
    spec.n_days = n_days;
    spec.seed = seed;
    for (int i = 0; i + 1 < n_assets; i += 2)
        spec.pairs.push_back(data::LeadLagPair{i, i + 1, coupling});
    auto panel = data::synth_generate(spec);
    auto universe = graph::synth_universe(n_assets, spec.effective_groups());
    return train::Dataset::build(std::move(panel), std::move(universe),
                                 data::FeatureSubset::RawMomentum);
}

// ---------------------------------------------------------------------------
// criterion 1: analytical gradient vs central finite differences
// ---------------------------------------------------------------------------

CheckResult check_gradient_exactness(int settings) {
    double worst = 0.0;
    std::string where;
    for (int s = 0; s < settings; ++s) {
        Rng rng(9000 + static_cast<uint64_t>(s));
        int B = 1 + rng.uniform_int(8);
        int L = 5 + rng.uniform_int(26);
        LossConfig cfg;
        cfg.tau = rng.uniform(0.02, 5.0);
        cfg.lambda = (s % 5 == 0) ? 0.0 : rng.uniform(0.0, 1.0);
        cfg.gamma = rng.uniform(0.0, 1.0);
        cfg.burn_in = rng.uniform_int(std::min(4, L - 2));
        std::vector<int> divisors;
        for (int g = 1; g <= B; ++g)
            if (B % g == 0) divisors.push_back(g);
        cfg.groups = divisors[static_cast<size_t>(rng.uniform_int(static_cast<int>(divisors.size())))];

        // returns produced through the net-return formula so gamma matters
        ReturnMatrix rm = ReturnMatrix::zeros(B, L);
        const int n_assets = 3;
        for (int b = 0; b < B; ++b) {
            std::vector<double> w_prev(n_assets, 0.0);
            for (int t = 0; t < L; ++t) {
                double gross = 0.0, cost = 0.0;
                for (int a = 0; a < n_assets; ++a) {
                    double p = rng.uniform(-0.9, 0.9);
                    double sigma = rng.uniform(0.005, 0.02);
                    double y = rng.normal();
                    double w = p / (sigma + 1e-8);
                    gross += p * y;
                    cost += 1e-4 * std::abs(w - w_prev[static_cast<size_t>(a)]);
                    w_prev[static_cast<size_t>(a)] = w;
                }
                rm.at(b, t) = (gross - cfg.gamma * cost) / n_assets;
                if (t < cfg.burn_in) rm.loss_mask[static_cast<size_t>(b) * static_cast<size_t>(L) + static_cast<size_t>(t)] = 0.0;
            }
        }

        auto G = objective::analytic_upstream_grad(rm, cfg);
        const double h = 1e-5;
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < L; ++t) {
                size_t idx = static_cast<size_t>(b) * static_cast<size_t>(L) + static_cast<size_t>(t);
                double keep = rm.R[idx];
                rm.R[idx] = keep + h;
                double fp = objective::total_loss(rm, cfg);
                rm.R[idx] = keep - h;
                double fm = objective::total_loss(rm, cfg);
                rm.R[idx] = keep;
                double num = (fp - fm) / (2.0 * h);
                double rel = std::abs(G[idx] - num) / std::max({1.0, std::abs(G[idx]), std::abs(num)});
                if (rel > worst) {
                    worst = rel;
                    where = "setting " + std::to_string(s) + " entry (" + std::to_string(b) + "," +
                            std::to_string(t) + ")";
                }
            }
    }
    bool pass = worst < 1e-6;
    return make_result("gradient_exactness",
                       pass, "max rel err " + fmt(worst) + " over " + std::to_string(settings) +
                                 " random settings (" + where + ")");
}

// ---------------------------------------------------------------------------
// criterion 2: two-pass microbatching vs split granularity
// ---------------------------------------------------------------------------

CheckResult check_two_pass_exactness() {
    auto ds = toy_dataset(4, 700, 21, 0.4);
    policy::PolicyConfig pcfg;
    pcfg.d_model = 8;
    pcfg.heads = 2;
    pcfg.dropout = 0.3;
    pcfg.n_assets = ds.N;
    pcfg.n_features = ds.features.n_features;

    LossConfig lcfg;
    lcfg.burn_in = 2;
    lcfg.groups = 1;

    const int B = 4, L = 12;
    std::vector<int> starts{300, 330, 360, 390};
    std::vector<std::vector<std::vector<int>>> splits = {
        {{0, 1, 2, 3}}, {{0, 1}, {2, 3}}, {{0}, {1}, {2}, {3}}};

    std::vector<std::vector<double>> grads;
    for (const auto& split : splits) {
        policy::PolicyModel model = policy::PolicyModel::init(pcfg, 5);
        train::PolicySequenceModel seq(model, ds, starts, L, lcfg.burn_in, lcfg.gamma, 99);
        model.store.zero_grads();
        objective::two_pass_step(seq, model.store, split, lcfg);
        grads.push_back(model.store.flat_grads());
    }
    double worst = 0.0;
    for (size_t k = 1; k < grads.size(); ++k)
        for (size_t i = 0; i < grads[0].size(); ++i)
            worst = std::max(worst, std::abs(grads[k][i] - grads[0][i]));
    bool pass = worst < 1e-10;
    return make_result("two_pass_exactness", pass,
                       "max abs grad difference across splits {1x" + std::to_string(B) + ", 2x" +
                           std::to_string(B / 2) + ", " + std::to_string(B) + "x1} = " + fmt(worst) +
                           " (dropout on, per-sample reseeding)");
}

// ---------------------------------------------------------------------------
// criterion 3: SoftMin limits and bounds
// ---------------------------------------------------------------------------

CheckResult check_softmin_limits(int draws) {
    Rng rng(300);
    double worst_min = 0.0, worst_mean = 0.0;
    int violations = 0, mono_violations = 0;
    for (int d = 0; d < draws; ++d) {
        int B = 2 + rng.uniform_int(15);
        std::vector<double> v(static_cast<size_t>(B));
        for (double& x : v) x = rng.uniform(-3.0, 3.0);
        double mn = *std::min_element(v.begin(), v.end());
        double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(B);
        worst_min = std::max(worst_min, std::abs(objective::softmin(v, 1e-4) - mn));
        worst_mean = std::max(worst_mean, std::abs(objective::softmin(v, 1e4) - mean));
        double tau = rng.uniform(0.05, 5.0);
        double sm = objective::softmin(v, tau);
        if (!(sm >= mn - 1e-12 && sm <= mean + 1e-12)) ++violations;
        if (objective::softmin(v, tau * 2.0) < sm - 1e-12) ++mono_violations;
    }
    bool pass = worst_min < 1e-3 && worst_mean < 1e-3 && violations == 0 && mono_violations == 0;
    return make_result("softmin_limits", pass,
                       "|softmin(1e-4)-min| " + fmt(worst_min) + ", |softmin(1e4)-mean| " +
                           fmt(worst_mean) + ", bound violations " + std::to_string(violations) +
                           ", monotonicity violations " + std::to_string(mono_violations) + " in " +
                           std::to_string(draws) + " draws");
}

// ---------------------------------------------------------------------------
// criterion 4: Donsker-Varadhan attainment and EVaR vs grid oracle
// ---------------------------------------------------------------------------

CheckResult check_duality(int instances) {
    Rng rng(400);
    double worst = 0.0;
    for (int k = 0; k < instances; ++k) {
        int B = 2 + rng.uniform_int(63);
        double tau = rng.uniform(0.05, 20.0);
        std::vector<double> z(static_cast<size_t>(B)), sr(static_cast<size_t>(B));
        for (int b = 0; b < B; ++b) {
            z[static_cast<size_t>(b)] = rng.uniform(-5.0, 5.0);
            sr[static_cast<size_t>(b)] = -z[static_cast<size_t>(b)];
        }
        // lhs: tau log E_P[e^{Z/tau}] under uniform P, via max shift
        double m = *std::max_element(z.begin(), z.end()) / tau;
        double s = 0.0;
        for (double zi : z) s += std::exp(zi / tau - m);
        double lhs = tau * (m + std::log(s / static_cast<double>(B)));
        // rhs: E_Q*[Z] - tau KL(Q*||P) with Q* from the adversarial weights
        auto aw = objective::adversarial_weights(sr, tau);
        double eq = 0.0;
        for (int b = 0; b < B; ++b) eq += aw.q[static_cast<size_t>(b)] * z[static_cast<size_t>(b)];
        worst = std::max(worst, std::abs(lhs - (eq - tau * aw.kl)));
    }

    // EVaR golden section vs brute-force grid on two-point distributions
    double worst_evar = 0.0;
    for (int k = 0; k < 20; ++k) {
        Rng r2(4400 + static_cast<uint64_t>(k));
        std::vector<double> z{r2.uniform(-1.0, 1.0), r2.uniform(0.0, 2.0)};
        double p0 = r2.uniform(0.1, 0.9);
        std::vector<double> probs{p0, 1.0 - p0};
        double alpha = r2.uniform(0.05, 0.95);
        double fast = objective::evar(z, probs, alpha);
        // brute force over the same documented lambda domain as the minimizer
        double zmax = std::max(z[0], z[1]);
        double grid = kInf;
        for (int g = 0; g <= 60000; ++g) {
            double lam = std::exp(std::log(1e-4) + (std::log(1e4) - std::log(1e-4)) * g / 60000.0);
            double val = zmax + lam * std::log(probs[0] * std::exp((z[0] - zmax) / lam) +
                                               probs[1] * std::exp((z[1] - zmax) / lam)) -
                         lam * std::log1p(-alpha);
            grid = std::min(grid, val);
        }
        worst_evar = std::max(worst_evar, std::abs(fast - grid));
    }
    bool pass = worst < 1e-9 && worst_evar < 1e-6;
    return make_result("duality_attainment", pass,
                       "DV gap " + fmt(worst) + " over " + std::to_string(instances) +
                           " instances; EVaR vs grid " + fmt(worst_evar));
}

// ---------------------------------------------------------------------------
// criterion 5: turnover convexity / Jensen
// ---------------------------------------------------------------------------

CheckResult check_turnover_jensen(int ensembles) {
    Rng rng(500);
    int violations = 0;
    for (int e = 0; e < ensembles; ++e) {
        int K = 2 + rng.uniform_int(7);
        int N = 2 + rng.uniform_int(5);
        int T = 5 + rng.uniform_int(36);
        std::vector<double> vols(static_cast<size_t>(T) * static_cast<size_t>(N));
        for (double& v : vols) v = rng.uniform(0.1, 100.0);
        std::vector<std::vector<double>> paths(static_cast<size_t>(K));
        for (auto& p : paths) {
            p.resize(static_cast<size_t>(T) * static_cast<size_t>(N));
            for (double& x : p) x = rng.uniform(-1.0, 1.0);
        }
        std::vector<double> mean_path(static_cast<size_t>(T) * static_cast<size_t>(N), 0.0);
        double mean_cost = 0.0;
        for (const auto& p : paths) {
            for (size_t i = 0; i < p.size(); ++i) mean_path[i] += p[i] / static_cast<double>(K);
            mean_cost += objective::turnover_cost(p, vols, T, N, 0.7) / static_cast<double>(K);
        }
        double ens_cost = objective::turnover_cost(mean_path, vols, T, N, 0.7);
        if (ens_cost > mean_cost) ++violations;
    }
    bool pass = violations == 0;
    return make_result("turnover_jensen", pass,
                       std::to_string(violations) + " violations of C(mean) <= mean C in " +
                           std::to_string(ensembles) + " random ensembles (exact inequality)");
}

// ---------------------------------------------------------------------------
// criterion 6: architecture invariants
// ---------------------------------------------------------------------------

namespace {

std::vector<graph::AssetMeta> probe_universe(int n) {
    std::vector<std::string> groups;
    for (int i = 0; i < n; ++i) groups.push_back("G" + std::to_string(i / 2));
    auto u = graph::synth_universe(n, groups);
    if (n >= 3) {  // one regional triangle to exercise role channels
        u[0].roles = {graph::Role::EquityIndex};
        u[0].region = "US";
        u[1].roles = {graph::Role::SovereignBond};
        u[1].region = "US";
        u[2].roles = {graph::Role::Currency};
        u[2].region = "US";
    }
    return u;
}

policy::ForwardBatch probe_batch(int B, int N, int L, int F, const graph::MacroGraph* g,
                                 uint64_t seed, bool train_mode) {
    Rng rng(seed);
    policy::ForwardBatch fb;
    fb.B = B;
    fb.N = N;
    fb.L = L;
    fb.F = F;
    fb.features = ad::Tensor(ad::Shape{B, N, L, F});
    for (double& x : fb.features.v) x = 0.5 * rng.normal();
    fb.exist = ad::Tensor(ad::Shape{B, N, L}, 1.0);
    fb.exist.at(0, N - 1, 0) = 0.0;  // ragged start
    fb.exist.at(0, N - 1, 1) = 0.0;
    for (int i = 0; i < N; ++i) {
        fb.cost.push_back(1e-4 * (1.0 + i));
        fb.close_rank.push_back(i % 3);
    }
    fb.macro = g;
    fb.train_mode = train_mode;
    for (int b = 0; b < B; ++b) fb.sample_keys.push_back(hash_combine(seed, static_cast<uint64_t>(b)));
    return fb;
}

policy::ForwardBatch permute_batch(const policy::ForwardBatch& fb, const std::vector<int>& perm,
                                   const graph::MacroGraph* pg) {
    policy::ForwardBatch out = fb;
    out.macro = pg;
    for (int b = 0; b < fb.B; ++b)
        for (int i = 0; i < fb.N; ++i) {
            out.cost[static_cast<size_t>(i)] = fb.cost[static_cast<size_t>(perm[static_cast<size_t>(i)])];
            out.close_rank[static_cast<size_t>(i)] = fb.close_rank[static_cast<size_t>(perm[static_cast<size_t>(i)])];
            for (int t = 0; t < fb.L; ++t) {
                out.exist.at(b, i, t) = fb.exist.at(b, perm[static_cast<size_t>(i)], t);
                for (int f = 0; f < fb.F; ++f)
                    out.features.at(b, i, t, f) = fb.features.at(b, perm[static_cast<size_t>(i)], t, f);
            }
        }
    return out;
}

}  // namespace

CheckResult check_architecture_invariants() {
    const int N = 5, B = 2, L = 10, F = 7;
    auto universe = probe_universe(N);
    auto g = graph::build_macro_graph(universe);
    policy::PolicyConfig pcfg;
    pcfg.d_model = 16;
    pcfg.heads = 2;
    pcfg.dropout = 0.25;
    pcfg.n_assets = N;
    pcfg.n_features = F;
    std::ostringstream detail;
    bool pass = true;

    // --- permutation equivariance (dropout off, ReZero gates opened) ---
    for (auto protocol : {policy::Protocol::DirectedDelay, policy::Protocol::Cascading}) {
        pcfg.protocol = protocol;
        policy::PolicyModel model = policy::PolicyModel::init(pcfg, 11);
        model.store[model.ids.alpha_cross].value.v[0] = 0.31;
        model.store[model.ids.alpha_gnn].value.v[0] = 0.22;
        auto fb = probe_batch(B, N, L, F, &g, 61, false);

        std::vector<int> perm{2, 0, 3, 4, 1};
        std::vector<graph::AssetMeta> perm_universe(universe.size());
        for (int i = 0; i < N; ++i) perm_universe[static_cast<size_t>(i)] = universe[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        auto pg = graph::build_macro_graph(perm_universe);
        auto pfb = permute_batch(fb, perm, &pg);

        policy::PolicyModel pmodel = policy::PolicyModel::init(pcfg, 11);
        pmodel.store[pmodel.ids.alpha_cross].value.v[0] = 0.31;
        pmodel.store[pmodel.ids.alpha_gnn].value.v[0] = 0.22;
        auto& E = model.store[model.ids.embed].value;
        auto& PE = pmodel.store[pmodel.ids.embed].value;
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < pcfg.d_model; ++c) PE.at(i, c) = E.at(perm[static_cast<size_t>(i)], c);

        ad::Tape t1, t2;
        const ad::Tensor& out1 = t1.value(policy::policy_forward(t1, model, fb));
        const ad::Tensor& out2 = t2.value(policy::policy_forward(t2, pmodel, pfb));
        double worst = 0.0;
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < N; ++i)
                for (int tt = 0; tt < L; ++tt)
                    worst = std::max(worst, std::abs(out2.at(b, i, tt) - out1.at(b, perm[static_cast<size_t>(i)], tt)));
        bool ok = worst < 1e-9;
        pass = pass && ok;
        detail << "equivariance(" << policy::protocol_to_string(protocol) << ") " << fmt(worst)
               << "; ";
    }

    // --- temporal causality, bitwise with dropout fixed ---
    {
        pcfg.protocol = policy::Protocol::DirectedDelay;
        policy::PolicyModel model = policy::PolicyModel::init(pcfg, 13);
        model.store[model.ids.alpha_cross].value.v[0] = 0.4;
        model.store[model.ids.alpha_gnn].value.v[0] = 0.3;
        auto fb = probe_batch(B, N, L, F, &g, 62, true);
        ad::Tape t1;
        ad::Tensor base = t1.value(policy::policy_forward(t1, model, fb));
        const int t0 = 6;
        auto fb2 = fb;
        Rng nr(99);
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < N; ++i)
                for (int tt = t0 + 1; tt < L; ++tt)
                    for (int f = 0; f < F; ++f) fb2.features.at(b, i, tt, f) += nr.normal();
        ad::Tape t2;
        ad::Tensor pert = t2.value(policy::policy_forward(t2, model, fb2));
        bool ok = true;
        for (int b = 0; b < B && ok; ++b)
            for (int i = 0; i < N && ok; ++i)
                for (int tt = 0; tt <= t0 && ok; ++tt)
                    ok = base.at(b, i, tt) == pert.at(b, i, tt);
        pass = pass && ok;
        detail << "temporal_causality " << (ok ? "bitwise" : "VIOLATED") << "; ";
    }

    // --- DirectedDelay cross-sectional causality, bitwise ---
    {
        policy::PolicyModel model = policy::PolicyModel::init(pcfg, 17);
        model.store[model.ids.alpha_cross].value.v[0] = 0.4;
        model.store[model.ids.alpha_gnn].value.v[0] = 0.3;
        auto fb = probe_batch(B, N, L, F, &g, 63, true);
        ad::Tape t1;
        ad::Tensor base = t1.value(policy::policy_forward(t1, model, fb));
        const int t0 = 5, j = 1;
        auto fb2 = fb;
        for (int b = 0; b < B; ++b)
            for (int f = 0; f < F; ++f) fb2.features.at(b, j, t0, f) += 3.0 + f;
        ad::Tape t2;
        ad::Tensor pert = t2.value(policy::policy_forward(t2, model, fb2));
        bool ok = true;
        for (int b = 0; b < B && ok; ++b) {
            for (int i = 0; i < N && ok; ++i) {
                if (i != j) ok = base.at(b, i, t0) == pert.at(b, i, t0);
                for (int tt = 0; tt < t0 && ok; ++tt) ok = base.at(b, i, tt) == pert.at(b, i, tt);
            }
        }
        pass = pass && ok;
        detail << "directed_delay_causality " << (ok ? "bitwise" : "VIOLATED") << "; ";
    }

    // --- ReZero at zero: cross-asset key/value perturbations are invisible ---
    {
        policy::PolicyModel model = policy::PolicyModel::init(pcfg, 19);  // alphas start at 0
        auto fb = probe_batch(B, N, L, F, &g, 64, true);
        ad::Tape t1;
        ad::Tensor base = t1.value(policy::policy_forward(t1, model, fb));
        auto fb2 = fb;
        const int j = 0;
        Rng nr(101);
        for (int b = 0; b < B; ++b)
            for (int tt = 0; tt < L; ++tt)
                for (int f = 0; f < F; ++f) fb2.features.at(b, j, tt, f) += 2.0 * nr.normal();
        ad::Tape t2;
        ad::Tensor pert = t2.value(policy::policy_forward(t2, model, fb2));
        bool ok = true;
        for (int b = 0; b < B && ok; ++b)
            for (int i = 0; i < N && ok; ++i)
                if (i != j)
                    for (int tt = 0; tt < L && ok; ++tt) ok = base.at(b, i, tt) == pert.at(b, i, tt);
        pass = pass && ok;
        detail << "rezero_identity " << (ok ? "bitwise" : "VIOLATED") << "; ";
    }

    // --- GAT non-edge attention is exactly zero ---
    {
        policy::PolicyModel model = policy::PolicyModel::init(pcfg, 23);
        model.store[model.ids.alpha_cross].value.v[0] = 0.4;
        model.store[model.ids.alpha_gnn].value.v[0] = 0.3;
        auto fb = probe_batch(B, N, L, F, &g, 65, false);
        policy::ForwardCapture cap;
        ad::Tape t1;
        policy::policy_forward(t1, model, fb, &cap);
        bool ok = cap.graph_attention.numel() == static_cast<int64_t>(B) * L * N * N;
        int nonedges = 0;
        for (int64_t r = 0; ok && r < static_cast<int64_t>(B) * L; ++r)
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < N; ++j)
                    if (g.a(i, j) == 0.0) {
                        ++nonedges;
                        if (cap.graph_attention.v[static_cast<size_t>((r * N + i) * N + j)] != 0.0) ok = false;
                    }
        pass = pass && ok && nonedges > 0;
        detail << "gat_nonedge_zero " << (ok ? "exact" : "VIOLATED") << " (" << nonedges
               << " pairs checked)";
    }

    return make_result("architecture_invariants", pass, detail.str());
}

// ---------------------------------------------------------------------------
// criterion 7: cost-table reproduction
// ---------------------------------------------------------------------------

CheckResult check_cost_table() {
    struct Row {
        const char* ticker;
        double calc, lambda, final_bps;
    };
    static const Row rows[] = {
        {"TU", 0.19, 1.3, 0.25}, {"FV", 0.25, 1.0, 0.25}, {"TY", 0.71, 1.1, 0.75},
        {"US", 1.32, 1.1, 1.50}, {"DU", 0.25, 1.0, 0.25}, {"OE", 1.32, 1.1, 1.50},
        {"RX", 0.25, 2.0, 0.50}, {"G", 0.25, 2.0, 0.50},  {"CN", 0.25, 2.0, 0.50},
        {"ES", 0.18, 1.4, 0.25}, {"EN", 0.05, 5.0, 0.25}, {"YM", 0.10, 2.5, 0.25},
        {"RTY", 0.18, 2.8, 0.50}, {"VG", 1.04, 1.0, 1.00}, {"Z", 0.65, 0.8, 0.50},
        {"CF", 0.65, 0.8, 0.50}, {"NK", 0.64, 2.3, 1.50}, {"HI", 1.35, 0.6, 0.75},
        {"DX", 0.65, 0.8, 0.50}, {"EU", 0.24, 1.0, 0.25}, {"JY", 0.39, 1.3, 0.50},
        {"BP", 0.39, 1.3, 0.50}, {"CD", 0.36, 1.4, 0.50}, {"AD", 0.40, 1.3, 0.50},
        {"SF", 0.50, 1.0, 0.50}, {"PE", 1.02, 1.0, 1.00}, {"CL", 0.71, 1.1, 0.75},
        {"CO", 0.71, 1.1, 0.75}, {"XB", 1.30, 1.2, 1.50}, {"QS", 1.30, 1.2, 1.50},
        {"NG", 1.67, 1.5, 2.50}, {"GC", 0.19, 1.3, 0.25}, {"SI", 0.81, 1.2, 1.00},
        {"PL", 0.53, 2.8, 1.50}, {"PA", 2.50, 2.4, 6.00}, {"HG", 0.58, 1.3, 0.75},
        {"C", 2.91, 0.9, 2.50},  {"S", 1.26, 1.2, 1.50},  {"SM", 1.72, 1.5, 2.50},
        {"BO", 1.30, 1.2, 1.50}, {"W", 2.27, 1.1, 2.50},  {"KW", 2.50, 1.0, 2.50},
        {"SB", 2.38, 1.1, 2.50}, {"KC", 0.81, 3.1, 2.50}, {"CC", 1.00, 6.0, 6.00},
        {"CT", 0.70, 3.6, 2.50}, {"JO", 1.19, 12.6, 15.0}, {"LC", 0.68, 2.2, 1.50},
        {"FC", 0.49, 5.1, 2.50}, {"LH", 1.47, 1.7, 2.50},
    };
    backtest::CostModel cm;
    int checked = 0, wrong = 0;
    std::string first_bad;
    for (const auto& r : rows) {
        graph::AssetMeta m;
        m.ticker = r.ticker;
        m.macro_group = "X";
        m.struct_bps = r.calc;
        m.liquidity_scalar = r.lambda;
        ++checked;
        if (cm.asset_cost_bps(m) != r.final_bps) {
            ++wrong;
            if (first_bad.empty())
                first_bad = std::string(r.ticker) + " got " + fmt(cm.asset_cost_bps(m)) +
                            " want " + fmt(r.final_bps);
        }
    }
    bool pass = wrong == 0 && checked == 50;
    return make_result("cost_table", pass,
                       std::to_string(checked - wrong) + "/" + std::to_string(checked) +
                           " master-universe rows reproduced exactly" +
                           (first_bad.empty() ? "" : ("; first mismatch " + first_bad)));
}

// ---------------------------------------------------------------------------
// criterion 8: metric correctness
// ---------------------------------------------------------------------------

CheckResult check_metric_correctness() {
    std::ostringstream detail;
    bool pass = true;

    // hand ledger: 2 assets, 3 days
    {
        data::PricePanel panel;
        panel.tickers = {"AA", "BB"};
        panel.dates = {"2020-01-01", "2020-01-02", "2020-01-03"};
        panel.close = {100.0, 102.0, 101.0, 50.0, 49.0, 50.0};
        panel.mask = {1, 1, 1, 1, 1, 1};
        panel.close_rank = {0, 0};
        data::VolEstimate vol;
        vol.n_assets = 2;
        vol.n_days = 3;
        vol.eps = 1e-8;
        vol.sigma = {0.01, 0.01, 0.01, 0.02, 0.02, 0.02};
        vol.valid = {1, 1, 1, 1, 1, 1};
        std::vector<uint8_t> exist = {1, 1, 1, 1, 1, 1};
        std::vector<double> pos = {0.5, 0.3, -0.2, -0.4, 0.8, 0.1};  // [N x D]
        backtest::SimInputs si;
        si.panel = &panel;
        si.vol = &vol;
        si.exist = &exist;
        si.cost = {5e-4, 1e-3};
        si.day0 = 0;
        si.days = 3;
        si.gamma_eval = 1.0;
        auto rep = backtest::simulate(pos, si);

        // manual ledger, scalar arithmetic only
        const double e = 1e-8;
        auto y = [&](double p1, double p0, double s) { return (p1 / p0 - 1.0) / (s + e); };
        double wA0 = 0.5 / (0.01 + e), wB0 = -0.4 / (0.02 + e);
        double wA1 = 0.3 / (0.01 + e), wB1 = 0.8 / (0.02 + e);
        double g1 = 0.5 * (0.5 * y(102, 100, 0.01) + (-0.4) * y(49, 50, 0.02));
        double c1 = 0.5 * (5e-4 * std::abs(wA0 - 0.0) + 1e-3 * std::abs(wB0 - 0.0));
        double g2 = 0.5 * (0.3 * y(101, 102, 0.01) + 0.8 * y(50, 49, 0.02));
        double c2 = 0.5 * (5e-4 * std::abs(wA1 - wA0) + 1e-3 * std::abs(wB1 - wB0));
        double worst = std::max(
            std::max(std::abs(rep.gross[0] - g1), std::abs(rep.net[0] - (g1 - c1))),
            std::max(std::abs(rep.gross[1] - g2), std::abs(rep.net[1] - (g2 - c2))));
        // ledger identity: net = gross - cost, summed
        double lhs = 0.0, rhs = 0.0;
        for (size_t k = 0; k < rep.net.size(); ++k) {
            lhs += rep.net[k];
            rhs += rep.gross[k] - rep.cost[k];
        }
        bool ok = worst < 1e-12 && lhs == rhs;
        pass = pass && ok;
        detail << "hand_ledger " << fmt(worst) << "; ";
    }

    // Newey-West at lag 0 equals plain t with population std
    {
        Rng rng(808);
        std::vector<double> x(200);
        for (double& v : x) v = 0.001 + 0.02 * rng.normal();
        double t_nw = backtest::hac_tstat(x, 0);
        double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
        double var = 0.0;
        for (double v : x) var += (v - mean) * (v - mean);
        var /= static_cast<double>(x.size());
        double t_plain = std::sqrt(static_cast<double>(x.size())) * mean / std::sqrt(var);
        bool ok = std::abs(t_nw - t_plain) < 1e-10;
        pass = pass && ok;
        detail << "nw_lag0 " << fmt(std::abs(t_nw - t_plain)) << "; ";
    }

    // closed-form CAGR / MDD / Calmar scenarios
    {
        std::vector<double> constant(50, 0.001);
        auto m = backtest::compute_metrics(constant, constant, {}, {}, 0, 0);
        bool ok = std::abs(m.cagr - (std::pow(1.001, 252.0) - 1.0)) < 1e-12 && m.mdd == 0.0 &&
                  m.calmar_inf;
        std::vector<double> vshape = {0.01, -0.20, 0.05, 0.30, 0.01};
        auto m2 = backtest::compute_metrics(vshape, vshape, {}, {}, 0, 0);
        ok = ok && std::abs(m2.mdd - 0.20) < 1e-12;
        // degenerate spread: strategy identical to benchmark
        std::vector<double> b = vshape;
        auto m3 = backtest::compute_metrics(vshape, vshape, b, {}, 0, 0);
        ok = ok && m3.ir == 0.0 && m3.ir_degenerate && std::abs(m3.rho - 1.0) < 1e-12;
        pass = pass && ok;
        detail << "cagr_mdd_calmar " << (ok ? "exact" : "WRONG");
    }

    return make_result("metric_correctness", pass, detail.str());
}

// ---------------------------------------------------------------------------
// criterion 10: realized ensemble turnover bound
// ---------------------------------------------------------------------------

CheckResult check_ensemble_turnover(int runs) {
    auto ds = toy_dataset(4, 700, 31, 0.4);
    int violations = 0;
    Rng rng(1000);
    int d0 = 400, D = 200;
    for (int run = 0; run < runs; ++run) {
        int K = 2 + rng.uniform_int(5);
        std::vector<std::vector<double>> members(static_cast<size_t>(K));
        for (auto& mpos : members) {
            mpos.assign(static_cast<size_t>(ds.N) * static_cast<size_t>(D), 0.0);
            double level = rng.uniform(-0.5, 0.5);
            for (int i = 0; i < ds.N; ++i)
                for (int k = 0; k < D; ++k) {
                    level = 0.9 * level + 0.2 * rng.uniform(-1.0, 1.0);
                    mpos[static_cast<size_t>(i) * static_cast<size_t>(D) + static_cast<size_t>(k)] =
                        ds.features.ex(i, d0 + k) ? std::tanh(level) : 0.0;
                }
        }
        backtest::SimInputs si;
        si.panel = &ds.panel;
        si.vol = &ds.vol;
        si.exist = &ds.features.exist;
        si.cost = ds.cost;
        si.day0 = d0;
        si.days = D;
        double mean_turnover = 0.0;
        for (const auto& mpos : members) {
            auto rep = backtest::simulate(mpos, si);
            mean_turnover += std::accumulate(rep.turnover.begin(), rep.turnover.end(), 0.0) /
                             static_cast<double>(K);
        }
        auto avg = train::average_positions(members);
        auto rep = backtest::simulate(avg, si);
        double ens_turnover = std::accumulate(rep.turnover.begin(), rep.turnover.end(), 0.0);
        if (ens_turnover > mean_turnover) ++violations;
    }
    bool pass = violations == 0;
    return make_result("ensemble_turnover", pass,
                       std::to_string(violations) + " violations in " + std::to_string(runs) +
                           " simulated ensembles (exact inequality)");
}

// ---------------------------------------------------------------------------
// determinism probe (fast slice of criterion 11)
// ---------------------------------------------------------------------------

CheckResult check_determinism() {
    auto ds = toy_dataset(4, 700, 41, 0.4);
    policy::PolicyConfig pcfg;
    pcfg.d_model = 8;
    pcfg.heads = 2;
    pcfg.dropout = 0.3;
    pcfg.n_assets = ds.N;
    pcfg.n_features = ds.features.n_features;
    objective::LossConfig lcfg;
    lcfg.burn_in = 10;
    train::TrainConfig tcfg;
    tcfg.iterations = 3;
    tcfg.batch_size = 4;
    tcfg.microbatch = 2;
    tcfg.seq_len = 42;
    tcfg.burn_in_train = 10;
    tcfg.burn_in_test = 10;
    tcfg.learning_rate = 1e-3;
    train::DateRange tr{260, 560}, vr{560, 660};

    auto a = train::train_seed(3, ds, tr, vr, pcfg, lcfg, tcfg);
    auto b = train::train_seed(3, ds, tr, vr, pcfg, lcfg, tcfg);
    bool ok = a.ok && b.ok;
    if (ok) {
        auto va = a.model.store.flat_values();
        auto vb = b.model.store.flat_values();
        for (size_t i = 0; i < va.size() && ok; ++i) ok = va[i] == vb[i];
        ok = ok && a.diagnostics == b.diagnostics;
    }
    return make_result("determinism", ok,
                       ok ? "repeated 3-iteration training run is bit-identical"
                          : "repeated training runs diverged");
}

std::vector<CheckResult> run_fast_checks() {
    std::vector<CheckResult> out;
    out.push_back(check_gradient_exactness());
    out.push_back(check_two_pass_exactness());
    out.push_back(check_softmin_limits());
    out.push_back(check_duality());
    out.push_back(check_turnover_jensen());
    out.push_back(check_architecture_invariants());
    out.push_back(check_cost_table());
    out.push_back(check_metric_correctness());
    out.push_back(check_ensemble_turnover());
    out.push_back(check_determinism());
    return out;
}

}  // namespace deepm::verify
