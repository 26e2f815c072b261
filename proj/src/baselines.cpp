#include "deepm/baselines.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

namespace deepm::baselines {

std::string baseline_name(BaselineKind k) {
    switch (k) {
        case BaselineKind::Passive: return "passive_equal_risk";
        case BaselineKind::Tsmom: return "tsmom";
        case BaselineKind::Macd: return "macd_multiscale";
        case BaselineKind::RiskManagedTsmom: return "risk_managed_tsmom";
        case BaselineKind::RiskManagedMacd: return "risk_managed_macd";
        case BaselineKind::MvoTsmom: return "mvo_tsmom";
        case BaselineKind::MvoTpTsmom: return "mvo_tp_tsmom";
        case BaselineKind::MvoTpMacd: return "mvo_tp_macd";
        case BaselineKind::ErcTsmom: return "risk_parity_tsmom";
    }
    return "?";
}

BaselineKind baseline_from_string(const std::string& s) {
    for (BaselineKind k :
         {BaselineKind::Passive, BaselineKind::Tsmom, BaselineKind::Macd,
          BaselineKind::RiskManagedTsmom, BaselineKind::RiskManagedMacd, BaselineKind::MvoTsmom,
          BaselineKind::MvoTpTsmom, BaselineKind::MvoTpMacd, BaselineKind::ErcTsmom})
        if (baseline_name(k) == s) return k;
    fail("unknown baseline '", s, "'");
}

double tsmom_signal(const data::PricePanel& panel, int asset, int day) {
    if (day < 252 || !panel.m(asset, day)) return 0.0;
    // needs a real observation 252 days back (not just forward-fill)
    bool has_history = false;
    for (int t = 0; t <= day - 252; ++t)
        if (panel.m(asset, t)) {
            has_history = true;
            break;
        }
    if (!has_history) return 0.0;
    double r = panel.px(asset, day) / panel.px(asset, day - 252) - 1.0;
    return r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
}

double macd_response(double x) { return x * std::exp(-x * x / 4.0) / 0.89; }

double macd_signal(const data::PricePanel& panel, const data::VolEstimate& vol, int asset,
                   int day) {
    static const int scales[3][2] = {{8, 24}, {16, 48}, {32, 96}};
    double acc = 0.0;
    for (const auto& sl : scales) {
        auto series = data::macd_normalized(panel, vol, asset, sl[0], sl[1]);
        acc += macd_response(series[static_cast<size_t>(day)]);
    }
    return acc / 3.0;
}

CovEstimate ledoit_wolf_cov(const std::vector<double>& obs, int T, int n) {
    DEEPM_REQUIRE(T >= 2, "covariance needs >= 2 observations");
    DEEPM_REQUIRE(static_cast<int>(obs.size()) == T * n, "observation matrix size mismatch");
    using Mat = Eigen::MatrixXd;
    Mat X(T, n);
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < n; ++j) X(t, j) = obs[static_cast<size_t>(t) * static_cast<size_t>(n) + static_cast<size_t>(j)];
    Eigen::RowVectorXd mean = X.colwise().mean();
    X.rowwise() -= mean;

    Mat S = (X.transpose() * X) / static_cast<double>(T);
    double m = S.trace() / static_cast<double>(n);
    double d2 = (S - m * Mat::Identity(n, n)).squaredNorm() / static_cast<double>(n);
    double bbar2 = 0.0;
    for (int t = 0; t < T; ++t) {
        Mat xk = X.row(t).transpose() * X.row(t);
        bbar2 += (xk - S).squaredNorm();
    }
    bbar2 /= static_cast<double>(n) * static_cast<double>(T) * static_cast<double>(T);
    double b2 = std::min(bbar2, d2);
    double rho = d2 > 0.0 ? b2 / d2 : 1.0;

    CovEstimate ce;
    ce.n = n;
    ce.shrinkage = rho;
    Mat shrunk = rho * m * Mat::Identity(n, n) + (1.0 - rho) * S;
    ce.cov.assign(static_cast<size_t>(n) * static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) ce.cov[static_cast<size_t>(i) * static_cast<size_t>(n) + static_cast<size_t>(j)] = shrunk(i, j);
    return ce;
}

std::vector<double> risk_managed_scale(const std::vector<double>& s, const CovEstimate& cov,
                                       double sigma_tgt) {
    int n = cov.n;
    DEEPM_REQUIRE(static_cast<int>(s.size()) == n, "signal size mismatch");
    double l1 = 0.0;
    for (double v : s) l1 += std::abs(v);
    std::vector<double> p(s.size(), 0.0);
    if (l1 <= 0.0) return p;  // all-flat signal: no position, no division
    for (size_t i = 0; i < s.size(); ++i) p[i] = s[i] / l1;
    double var = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) var += p[static_cast<size_t>(i)] * cov.a(i, j) * p[static_cast<size_t>(j)];
    if (var <= 0.0) return std::vector<double>(s.size(), 0.0);
    double scale = sigma_tgt / std::sqrt(var);
    for (double& v : p) v *= scale;
    return p;
}

std::vector<double> mvo_allocate(const std::vector<double>& s, const CovEstimate& cov,
                                 double ridge, double kappa, const std::vector<double>& p_prev) {
    int n = cov.n;
    DEEPM_REQUIRE(static_cast<int>(s.size()) == n, "signal size mismatch");
    using Mat = Eigen::MatrixXd;
    using Vec = Eigen::VectorXd;
    Mat A(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) A(i, j) = cov.a(i, j);
    Vec rhs(n);
    if (kappa > 0.0) {
        DEEPM_REQUIRE(static_cast<int>(p_prev.size()) == n, "p_prev size mismatch");
        A += kappa * Mat::Identity(n, n);
        for (int i = 0; i < n; ++i) rhs(i) = s[static_cast<size_t>(i)] + kappa * p_prev[static_cast<size_t>(i)];
    } else {
        A += ridge * Mat::Identity(n, n);
        for (int i = 0; i < n; ++i) rhs(i) = s[static_cast<size_t>(i)];
    }
    Vec x = A.ldlt().solve(rhs);
    std::vector<double> p(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = x(i);
    return p;
}

std::vector<double> erc_weights(const CovEstimate& cov, double tol, int max_passes) {
    int n = cov.n;
    for (int i = 0; i < n; ++i)
        DEEPM_REQUIRE(cov.a(i, i) > 0.0, "ERC needs positive diagonal, asset ", i);
    std::vector<double> q(static_cast<size_t>(n), 1.0 / static_cast<double>(n));
    auto sigma_q = [&](int i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += cov.a(i, j) * q[static_cast<size_t>(j)];
        return s;
    };
    for (int pass = 0; pass < max_passes; ++pass) {
        for (int i = 0; i < n; ++i) {
            double b = sigma_q(i) - cov.a(i, i) * q[static_cast<size_t>(i)];
            double disc = b * b + 4.0 * cov.a(i, i) / static_cast<double>(n);
            q[static_cast<size_t>(i)] = (-b + std::sqrt(disc)) / (2.0 * cov.a(i, i));
        }
        // convergence on the normalized risk-contribution spread
        double l1 = std::accumulate(q.begin(), q.end(), 0.0);
        double lo = kInf, hi = -kInf;
        for (int i = 0; i < n; ++i) {
            double rc = (q[static_cast<size_t>(i)] / l1) * (sigma_q(i) / l1);
            lo = std::min(lo, rc);
            hi = std::max(hi, rc);
        }
        if (hi - lo < tol) break;
    }
    double l1 = std::accumulate(q.begin(), q.end(), 0.0);
    for (double& v : q) v /= l1;
    return q;
}

std::vector<double> erc_allocate(const std::vector<double>& s, const CovEstimate& cov) {
    auto q = erc_weights(cov);
    std::vector<double> p(q.size(), 0.0);
    for (size_t i = 0; i < q.size(); ++i) {
        double sgn = s[i] > 0.0 ? 1.0 : (s[i] < 0.0 ? -1.0 : 0.0);
        p[i] = sgn * q[i];  // direction strictly preserved from the trend signal
    }
    return p;
}

namespace {

// vol-scaled daily returns for the covariance window, ex-ante scaling
std::vector<double> cov_observations(const data::PricePanel& panel, const data::VolEstimate& vol,
                                     const std::vector<int>& live, int day, int window) {
    int n = static_cast<int>(live.size());
    int lo = std::max(1, day - window + 1);
    int T = day - lo + 1;
    std::vector<double> obs(static_cast<size_t>(T) * static_cast<size_t>(n), 0.0);
    for (int t = lo; t <= day; ++t)
        for (int j = 0; j < n; ++j) {
            int i = live[static_cast<size_t>(j)];
            if (panel.m(i, t) && panel.m(i, t - 1)) {
                double r = panel.px(i, t) / panel.px(i, t - 1) - 1.0;
                obs[static_cast<size_t>(t - lo) * static_cast<size_t>(n) + static_cast<size_t>(j)] = r / (vol.sgm(i, t - 1) + vol.eps);
            }
        }
    return obs;
}

}  // namespace

std::vector<double> run_baseline(const BaselineConfig& cfg, const data::PricePanel& panel,
                                 const data::VolEstimate& vol, const std::vector<uint8_t>& exist,
                                 int day0, int days) {
    int N = panel.n_assets(), T = panel.n_days();
    DEEPM_REQUIRE(static_cast<int>(exist.size()) == N * T, "exist mask size mismatch");
    std::vector<double> out(static_cast<size_t>(N) * static_cast<size_t>(days), 0.0);
    auto ex = [&](int i, int d) { return exist[static_cast<size_t>(i) * static_cast<size_t>(T) + static_cast<size_t>(d)] != 0; };

    const bool needs_cov = cfg.kind != BaselineKind::Passive && cfg.kind != BaselineKind::Tsmom &&
                           cfg.kind != BaselineKind::Macd;
    const bool macd_based = cfg.kind == BaselineKind::Macd ||
                            cfg.kind == BaselineKind::RiskManagedMacd ||
                            cfg.kind == BaselineKind::MvoTpMacd;

    // per-asset normalized MACD series computed once (causal by construction)
    std::vector<std::array<std::vector<double>, 3>> macd_series;
    if (macd_based) {
        static const int scales[3][2] = {{8, 24}, {16, 48}, {32, 96}};
        macd_series.resize(static_cast<size_t>(N));
        for (int i = 0; i < N; ++i)
            for (int s = 0; s < 3; ++s)
                macd_series[static_cast<size_t>(i)][static_cast<size_t>(s)] =
                    data::macd_normalized(panel, vol, i, scales[s][0], scales[s][1]);
    }
    auto macd_at = [&](int i, int d) {
        double acc = 0.0;
        for (int s = 0; s < 3; ++s) acc += macd_response(macd_series[static_cast<size_t>(i)][static_cast<size_t>(s)][static_cast<size_t>(d)]);
        return acc / 3.0;
    };

    std::vector<double> prev_full(static_cast<size_t>(N), 0.0);  // MVO-TP anchor
    for (int k = 0; k < days; ++k) {
        int d = day0 + k;
        std::vector<int> live;
        for (int i = 0; i < N; ++i)
            if (ex(i, d)) live.push_back(i);
        if (live.empty()) continue;

        auto put = [&](int i, double v) { out[static_cast<size_t>(i) * static_cast<size_t>(days) + static_cast<size_t>(k)] = v; };

        if (cfg.kind == BaselineKind::Passive) {
            for (int i : live) put(i, 1.0);
            continue;
        }
        if (cfg.kind == BaselineKind::Tsmom) {
            for (int i : live) put(i, tsmom_signal(panel, i, d));
            continue;
        }
        if (cfg.kind == BaselineKind::Macd) {
            for (int i : live) put(i, macd_at(i, d));
            continue;
        }

        std::vector<double> sig(live.size(), 0.0);
        for (size_t j = 0; j < live.size(); ++j)
            sig[j] = macd_based ? macd_at(live[j], d) : tsmom_signal(panel, live[j], d);

        if (needs_cov) {
            auto obs = cov_observations(panel, vol, live, d, cfg.cov_window);
            int Tw = static_cast<int>(obs.size() / live.size());
            if (Tw < 2) continue;
            CovEstimate cov = ledoit_wolf_cov(obs, Tw, static_cast<int>(live.size()));

            std::vector<double> p;
            switch (cfg.kind) {
                case BaselineKind::RiskManagedTsmom:
                case BaselineKind::RiskManagedMacd:
                    p = risk_managed_scale(sig, cov, cfg.sigma_tgt);
                    break;
                case BaselineKind::MvoTsmom:
                    p = risk_managed_scale(mvo_allocate(sig, cov, cfg.ridge, 0.0, {}), cov,
                                           cfg.sigma_tgt);
                    break;
                case BaselineKind::MvoTpTsmom:
                case BaselineKind::MvoTpMacd: {
                    std::vector<double> prev(live.size());
                    for (size_t j = 0; j < live.size(); ++j) prev[j] = prev_full[static_cast<size_t>(live[j])];
                    p = risk_managed_scale(mvo_allocate(sig, cov, cfg.ridge, cfg.kappa, prev), cov,
                                           cfg.sigma_tgt);
                    break;
                }
                case BaselineKind::ErcTsmom: {
                    auto signed_q = erc_allocate(sig, cov);
                    p = risk_managed_scale(signed_q, cov, cfg.sigma_tgt);
                    // vol targeting may flip nothing: magnitudes only
                    for (size_t j = 0; j < p.size(); ++j)
                        if (sig[j] == 0.0) p[j] = 0.0;
                    break;
                }
                default: fail("unhandled baseline kind");
            }
            for (size_t j = 0; j < live.size(); ++j) put(live[j], p[j]);
            std::fill(prev_full.begin(), prev_full.end(), 0.0);
            for (size_t j = 0; j < live.size(); ++j) prev_full[static_cast<size_t>(live[j])] = p[j];
        }
    }
    return out;
}

void save_signals(const std::vector<double>& positions, const data::PricePanel& panel, int day0,
                  int days, const std::string& path) {
    std::ofstream out(path);
    DEEPM_REQUIRE(out.good(), "cannot write ", path);
    out << "date,ticker,position\n";
    for (int k = 0; k < days; ++k)
        for (int i = 0; i < panel.n_assets(); ++i)
            out << panel.dates[static_cast<size_t>(day0 + k)] << ',' << panel.tickers[static_cast<size_t>(i)] << ','
                << format_double(positions[static_cast<size_t>(i) * static_cast<size_t>(days) + static_cast<size_t>(k)], 12) << '\n';
}

}  // namespace deepm::baselines
