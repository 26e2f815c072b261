#include "deepm/objective.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace deepm::objective {

void LossConfig::validate() const {
    DEEPM_REQUIRE(tau > 0.0, "SoftMin temperature must be positive, got ", tau);
    DEEPM_REQUIRE(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0,1], got ", gamma);
    DEEPM_REQUIRE(lambda >= 0.0, "lambda must be non-negative");
    DEEPM_REQUIRE(annualization > 0.0, "annualization must be positive");
    DEEPM_REQUIRE(burn_in >= 0, "burn_in must be non-negative");
    DEEPM_REQUIRE(groups >= 1, "groups must be >= 1");
}

SufficientStats SufficientStats::compute(const ReturnMatrix& rm, const LossConfig& cfg) {
    SufficientStats st;
    int B = rm.B, L = rm.L;
    st.s1_b.assign(static_cast<size_t>(B), 0.0);
    st.s2_b.assign(static_cast<size_t>(B), 0.0);
    st.n_b.assign(static_cast<size_t>(B), 0);
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < L; ++t) {
            if (rm.mask_at(b, t) == 0.0) continue;
            double r = rm.at(b, t);
            st.s1_b[static_cast<size_t>(b)] += r;
            st.s2_b[static_cast<size_t>(b)] += r * r;
            st.n_b[static_cast<size_t>(b)] += 1;
        }
    for (int b = 0; b < B; ++b) {  // pooled sums in fixed sample order
        st.s1 += st.s1_b[static_cast<size_t>(b)];
        st.s2 += st.s2_b[static_cast<size_t>(b)];
        st.n += st.n_b[static_cast<size_t>(b)];
    }
    DEEPM_REQUIRE(st.n >= 2, "need at least 2 unmasked return entries, got ", st.n);

    st.mu = st.s1 / static_cast<double>(st.n);
    st.q = st.s2 / static_cast<double>(st.n);
    double var = st.q - st.mu * st.mu;
    st.clamped = var <= cfg.eps_var;
    st.sigma = std::sqrt(std::max(var, cfg.eps_var));

    double rootA = std::sqrt(cfg.annualization);
    st.mu_b.assign(static_cast<size_t>(B), 0.0);
    st.q_b.assign(static_cast<size_t>(B), 0.0);
    st.sigma_b.assign(static_cast<size_t>(B), std::sqrt(cfg.eps_var));
    st.clamped_b.assign(static_cast<size_t>(B), 1);
    st.sr_b.assign(static_cast<size_t>(B), 0.0);
    for (int b = 0; b < B; ++b) {
        int64_t nb = st.n_b[static_cast<size_t>(b)];
        if (nb == 0) continue;  // fully masked window: SR stays 0, contributes nothing
        double mu_b = st.s1_b[static_cast<size_t>(b)] / static_cast<double>(nb);
        double q_b = st.s2_b[static_cast<size_t>(b)] / static_cast<double>(nb);
        double var_b = q_b - mu_b * mu_b;
        st.mu_b[static_cast<size_t>(b)] = mu_b;
        st.q_b[static_cast<size_t>(b)] = q_b;
        st.clamped_b[static_cast<size_t>(b)] = var_b <= cfg.eps_var ? 1 : 0;
        st.sigma_b[static_cast<size_t>(b)] = std::sqrt(std::max(var_b, cfg.eps_var));
        st.sr_b[static_cast<size_t>(b)] = rootA * mu_b / (st.sigma_b[static_cast<size_t>(b)] + cfg.eps_sigma);
    }
    return st;
}

double pooled_sharpe(const ReturnMatrix& rm, const LossConfig& cfg) {
    SufficientStats st = SufficientStats::compute(rm, cfg);
    return st.mu / (st.sigma + cfg.eps_sigma);
}

double softmin(const std::vector<double>& values, double tau) {
    DEEPM_REQUIRE(tau > 0.0, "softmin needs tau > 0");
    DEEPM_REQUIRE(!values.empty(), "softmin of empty set");
    double m = kNegInf;  // max of -v/tau
    for (double v : values) m = std::max(m, -v / tau);
    double s = 0.0;
    for (double v : values) s += std::exp(-v / tau - m);
    return -tau * (m + std::log(s / static_cast<double>(values.size())));
}

namespace {

// group g covers sequences [g*K, (g+1)*K)
int group_size(int B, const LossConfig& cfg) {
    DEEPM_REQUIRE(B % cfg.groups == 0, "batch of ", B, " sequences not divisible into ",
                  cfg.groups, " groups");
    return B / cfg.groups;
}

}  // namespace

double total_loss(const ReturnMatrix& rm, const LossConfig& cfg) {
    cfg.validate();
    SufficientStats st = SufficientStats::compute(rm, cfg);
    double rootA = std::sqrt(cfg.annualization);
    double l_pool = -rootA * st.mu / (st.sigma + cfg.eps_sigma);
    int K = group_size(rm.B, cfg);
    double soft_sum = 0.0;
    for (int g = 0; g < cfg.groups; ++g) {
        std::vector<double> vals(st.sr_b.begin() + static_cast<long>(g) * K,
                                 st.sr_b.begin() + static_cast<long>(g + 1) * K);
        soft_sum += softmin(vals, cfg.tau);
    }
    return l_pool - cfg.lambda * soft_sum / static_cast<double>(cfg.groups);
}

std::vector<double> analytic_upstream_grad(const ReturnMatrix& rm, const LossConfig& cfg,
                                           const SufficientStats* precomputed) {
    cfg.validate();
    SufficientStats local;
    const SufficientStats& st = precomputed ? *precomputed : (local = SufficientStats::compute(rm, cfg));
    int B = rm.B, L = rm.L;
    double rootA = std::sqrt(cfg.annualization);
    double Np = static_cast<double>(st.n);
    double denom = st.sigma + cfg.eps_sigma;

    // group-wise adversarial weights over per-sample Sharpes
    int K = group_size(B, cfg);
    std::vector<double> qstar(static_cast<size_t>(B), 0.0);
    for (int g = 0; g < cfg.groups; ++g) {
        double m = kNegInf;
        for (int k = 0; k < K; ++k) m = std::max(m, -st.sr_b[static_cast<size_t>(g * K + k)] / cfg.tau);
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += std::exp(-st.sr_b[static_cast<size_t>(g * K + k)] / cfg.tau - m);
        for (int k = 0; k < K; ++k)
            qstar[static_cast<size_t>(g * K + k)] = std::exp(-st.sr_b[static_cast<size_t>(g * K + k)] / cfg.tau - m) / s;
    }

    std::vector<double> G(static_cast<size_t>(B) * static_cast<size_t>(L), 0.0);
    for (int b = 0; b < B; ++b) {
        int64_t nb = st.n_b[static_cast<size_t>(b)];
        double denom_b = st.sigma_b[static_cast<size_t>(b)] + cfg.eps_sigma;
        for (int t = 0; t < L; ++t) {
            if (rm.mask_at(b, t) == 0.0) continue;
            double r = rm.at(b, t);
            double d_pool = 1.0 / (Np * denom);
            if (!st.clamped)
                d_pool -= st.mu * (r - st.mu) / (Np * denom * denom * st.sigma);
            d_pool *= -rootA;

            double d_soft = 0.0;
            if (cfg.lambda != 0.0 && nb > 0) {
                double d_sr = 1.0 / (static_cast<double>(nb) * denom_b);
                if (!st.clamped_b[static_cast<size_t>(b)])
                    d_sr -= st.mu_b[static_cast<size_t>(b)] * (r - st.mu_b[static_cast<size_t>(b)]) /
                            (static_cast<double>(nb) * denom_b * denom_b * st.sigma_b[static_cast<size_t>(b)]);
                d_sr *= rootA;
                d_soft = -(1.0 / static_cast<double>(cfg.groups)) * qstar[static_cast<size_t>(b)] * d_sr;
            }
            G[static_cast<size_t>(b) * static_cast<size_t>(L) + static_cast<size_t>(t)] = d_pool + cfg.lambda * d_soft;
        }
    }
    return G;
}

AdversarialWeights adversarial_weights(const std::vector<double>& sr, double tau) {
    DEEPM_REQUIRE(tau > 0.0, "adversarial_weights needs tau > 0");
    DEEPM_REQUIRE(!sr.empty(), "adversarial_weights of empty set");
    AdversarialWeights out;
    size_t B = sr.size();
    out.q.assign(B, 0.0);
    double m = kNegInf;
    for (double v : sr) m = std::max(m, -v / tau);
    double s = 0.0;
    for (size_t b = 0; b < B; ++b) {
        out.q[b] = std::exp(-sr[b] / tau - m);
        s += out.q[b];
    }
    for (double& qb : out.q) qb /= s;
    double kl = 0.0;
    for (double qb : out.q)
        if (qb > 0.0) kl += qb * std::log(static_cast<double>(B) * qb);
    out.kl = kl;
    return out;
}

namespace {

// lambda log E[e^{Z/lambda}] - lambda log(1-alpha), stable via max shift
double evar_objective(const std::vector<double>& z, const std::vector<double>& p, double alpha,
                      double lam) {
    double zmax = kNegInf;
    for (double zi : z) zmax = std::max(zmax, zi);
    double s = 0.0;
    for (size_t i = 0; i < z.size(); ++i) s += p[i] * std::exp((z[i] - zmax) / lam);
    return zmax + lam * std::log(s) - lam * std::log1p(-alpha);
}

}  // namespace

double evar(const std::vector<double>& z, const std::vector<double>& probs, double alpha) {
    DEEPM_REQUIRE(alpha > 0.0 && alpha < 1.0, "EVaR level must be in (0,1), got ", alpha);
    DEEPM_REQUIRE(z.size() == probs.size() && !z.empty(), "EVaR inputs misaligned");
    double psum = 0.0;
    for (double p : probs) psum += p;
    DEEPM_REQUIRE(std::abs(psum - 1.0) < 1e-9, "EVaR probabilities must sum to 1");

    // golden section on u = log(lambda)
    const double inv_phi = 0.6180339887498949;
    double lo = std::log(1e-4), hi = std::log(1e4);
    double a = hi - inv_phi * (hi - lo), b = lo + inv_phi * (hi - lo);
    double fa = evar_objective(z, probs, alpha, std::exp(a));
    double fb = evar_objective(z, probs, alpha, std::exp(b));
    while (hi - lo > 1e-8) {
        if (fa < fb) {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = evar_objective(z, probs, alpha, std::exp(a));
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = evar_objective(z, probs, alpha, std::exp(b));
        }
    }
    double best = std::min(fa, fb);
    // the infimum can sit on the boundary (e.g. constant Z as lambda -> 0)
    best = std::min(best, evar_objective(z, probs, alpha, 1e-4));
    best = std::min(best, evar_objective(z, probs, alpha, 1e4));
    return best;
}

double turnover_cost(const std::vector<double>& path, const std::vector<double>& vols, int T,
                     int N, double gamma) {
    DEEPM_REQUIRE(static_cast<int>(path.size()) == T * N, "path size mismatch");
    DEEPM_REQUIRE(static_cast<int>(vols.size()) == T * N, "vols size mismatch");
    double c = 0.0;
    for (int t = 1; t < T; ++t)
        for (int i = 0; i < N; ++i)
            c += vols[static_cast<size_t>(t) * static_cast<size_t>(N) + static_cast<size_t>(i)] *
                 std::abs(path[static_cast<size_t>(t) * static_cast<size_t>(N) + static_cast<size_t>(i)] -
                          path[static_cast<size_t>(t - 1) * static_cast<size_t>(N) + static_cast<size_t>(i)]);
    return gamma * c;
}

std::string StepDiagnostics::delimited() const {
    std::ostringstream os;
    for (size_t b = 0; b < sr_b.size(); ++b) {
        os << b << ',' << format_double(sr_b[b], 12) << ',' << format_double(q_star[b], 12) << ','
           << format_double(kl, 12) << ',' << (b < clamped_b.size() ? int(clamped_b[b]) : 0) << ','
           << (pooled_clamped ? 1 : 0) << '\n';
    }
    return os.str();
}

namespace {

uint64_t hash_composition(const std::vector<std::vector<int>>& mbs) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& mb : mbs) {
        h = splitmix64(h ^ 0x7c7c7c7cULL);
        h = fnv1a(mb.data(), mb.size() * sizeof(int), h);
    }
    return h;
}

void check_partition(const std::vector<std::vector<int>>& mbs, int total) {
    std::vector<char> seen(static_cast<size_t>(total), 0);
    int count = 0;
    for (const auto& mb : mbs)
        for (int id : mb) {
            DEEPM_REQUIRE(id >= 0 && id < total, "microbatch sample id ", id, " out of range");
            DEEPM_REQUIRE(!seen[static_cast<size_t>(id)], "duplicate sample id ", id, " in microbatches");
            seen[static_cast<size_t>(id)] = 1;
            ++count;
        }
    DEEPM_REQUIRE(count == total, "microbatches must cover all ", total, " sequences, got ", count);
}

}  // namespace

void TwoPassContext::pass1(const std::vector<std::vector<int>>& microbatches) {
    int B = model_.total_sequences(), L = model_.seq_len();
    check_partition(microbatches, B);
    rm_ = ReturnMatrix::zeros(B, L);
    rm_.loss_mask = model_.loss_mask();
    DEEPM_REQUIRE(static_cast<int>(rm_.loss_mask.size()) == B * L, "loss mask size mismatch");
    for (const auto& mb : microbatches) {
        if (mb.empty()) continue;
        ad::Tape tape;  // statistics pass: tape is discarded, nothing retained
        ad::NodeId r = model_.build_returns(tape, mb, true);
        const ad::Tensor& rv = tape.value(r);
        DEEPM_REQUIRE((rv.shape == ad::Shape{static_cast<int64_t>(mb.size()), L}),
                      "model returned wrong shape from build_returns");
        for (size_t k = 0; k < mb.size(); ++k)
            for (int t = 0; t < L; ++t) rm_.at(mb[k], t) = rv.at(static_cast<int64_t>(k), t);
    }
    composition_hash_ = hash_composition(microbatches);
    pass1_done_ = true;
}

TwoPassResult TwoPassContext::pass2(ad::ParameterStore& store,
                                    const std::vector<std::vector<int>>& microbatches) {
    DEEPM_REQUIRE(pass1_done_, "pass2 called before pass1");
    DEEPM_REQUIRE(hash_composition(microbatches) == composition_hash_,
                  "microbatch composition differs between pass 1 and pass 2");
    int L = model_.seq_len();
    TwoPassResult res;
    res.stats = SufficientStats::compute(rm_, cfg_);
    std::vector<double> G = analytic_upstream_grad(rm_, cfg_, &res.stats);

    for (const auto& mb : microbatches) {
        if (mb.empty()) continue;
        ad::Tape tape;
        ad::NodeId r = model_.build_returns(tape, mb, true);
        const ad::Tensor& rv = tape.value(r);
        for (size_t k = 0; k < mb.size(); ++k)
            for (int t = 0; t < L; ++t)
                DEEPM_REQUIRE(rv.at(static_cast<int64_t>(k), t) == rm_.at(mb[k], t),
                              "pass-2 forward deviates from pass 1 (seeding broken?) at sample ",
                              mb[k], " step ", t);
        ad::Tensor gm(ad::Shape{static_cast<int64_t>(mb.size()), L});
        for (size_t k = 0; k < mb.size(); ++k)
            for (int t = 0; t < L; ++t)
                gm.at(static_cast<int64_t>(k), t) = G[static_cast<size_t>(mb[k]) * static_cast<size_t>(L) + static_cast<size_t>(t)];
        tape.backward(r, gm);
        (void)store;
    }

    res.returns = rm_;
    res.loss = total_loss(rm_, cfg_);
    int K = res.stats.sr_b.empty() ? 1 : static_cast<int>(res.stats.sr_b.size()) / cfg_.groups;
    res.diag.sr_b = res.stats.sr_b;
    res.diag.q_star.assign(res.stats.sr_b.size(), 0.0);
    double kl_sum = 0.0;
    for (int g = 0; g < cfg_.groups; ++g) {
        std::vector<double> vals(res.stats.sr_b.begin() + static_cast<long>(g) * K,
                                 res.stats.sr_b.begin() + static_cast<long>(g + 1) * K);
        auto aw = adversarial_weights(vals, cfg_.tau);
        for (int k = 0; k < K; ++k) res.diag.q_star[static_cast<size_t>(g * K + k)] = aw.q[static_cast<size_t>(k)];
        kl_sum += aw.kl;
    }
    res.diag.kl = kl_sum / static_cast<double>(cfg_.groups);
    res.diag.pooled_clamped = res.stats.clamped;
    res.diag.clamped_b = res.stats.clamped_b;
    return res;
}

TwoPassResult two_pass_step(SequenceModel& model, ad::ParameterStore& store,
                            const std::vector<std::vector<int>>& microbatches,
                            const LossConfig& cfg) {
    TwoPassContext ctx(model, cfg);
    ctx.pass1(microbatches);
    return ctx.pass2(store, microbatches);
}

std::vector<std::vector<int>> split_microbatches(int total, int microbatch_size) {
    DEEPM_REQUIRE(microbatch_size >= 1, "microbatch size must be >= 1");
    std::vector<std::vector<int>> out;
    for (int start = 0; start < total; start += microbatch_size) {
        std::vector<int> mb;
        for (int i = start; i < std::min(total, start + microbatch_size); ++i) mb.push_back(i);
        out.push_back(std::move(mb));
    }
    return out;
}

}  // namespace deepm::objective
