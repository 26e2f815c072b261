#include "deepm/backtest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace deepm::backtest {

double CostModel::asset_cost_bps(const graph::AssetMeta& meta) const {
    if (meta.final_bps > 0.0) return meta.final_bps;  // metadata override wins
    DEEPM_REQUIRE(meta.struct_bps > 0.0, "struct_bps must be positive for ", meta.ticker);
    DEEPM_REQUIRE(meta.liquidity_scalar >= 0.5, "liquidity scalar below 0.5 for ", meta.ticker);
    double raw = std::max(floor_bps, meta.struct_bps * meta.liquidity_scalar);
    if (bands_bps.empty()) return raw;
    double best = bands_bps.front();
    for (double b : bands_bps)
        if (std::abs(b - raw) < std::abs(best - raw)) best = b;
    return best;
}

std::vector<double> CostModel::universe_costs(const std::vector<graph::AssetMeta>& u) const {
    std::vector<double> out;
    out.reserve(u.size());
    for (const auto& m : u) out.push_back(asset_cost(m));
    return out;
}

BacktestReport simulate(const std::vector<double>& positions, const SimInputs& in) {
    DEEPM_REQUIRE(in.panel && in.vol && in.exist, "simulate inputs incomplete");
    int N = in.panel->n_assets(), D = in.days, d0 = in.day0;
    int T = in.panel->n_days();
    DEEPM_REQUIRE(static_cast<int>(positions.size()) == N * D, "positions must be [N x D]");
    DEEPM_REQUIRE(d0 >= 0 && d0 + D <= T, "day range out of panel");
    DEEPM_REQUIRE(static_cast<int>(in.cost.size()) == N, "cost vector size mismatch");

    auto pos = [&](int i, int k) { return positions[static_cast<size_t>(i) * static_cast<size_t>(D) + static_cast<size_t>(k)]; };
    auto ex = [&](int i, int d) { return (*in.exist)[static_cast<size_t>(i) * static_cast<size_t>(T) + static_cast<size_t>(d)]; };

    BacktestReport rep;
    rep.n_assets = N;
    rep.n_days = D;
    rep.day0 = d0;
    rep.notionals.assign(static_cast<size_t>(N) * static_cast<size_t>(D), 0.0);
    for (int i = 0; i < N; ++i)
        for (int k = 0; k < D; ++k) {
            int d = d0 + k;
            if (!ex(i, d))
                DEEPM_REQUIRE(pos(i, k) == 0.0, "nonzero position for masked asset ",
                              in.panel->tickers[static_cast<size_t>(i)], " at day ", d);
            rep.notionals[static_cast<size_t>(i) * static_cast<size_t>(D) + static_cast<size_t>(k)] =
                pos(i, k) / (in.vol->sgm(i, d) + in.vol_eps);
        }

    auto w = [&](int i, int k) {
        return k < 0 ? 0.0 : rep.notionals[static_cast<size_t>(i) * static_cast<size_t>(D) + static_cast<size_t>(k)];
    };

    for (int k = 0; k + 1 < D; ++k) {
        int d = d0 + k;  // position day; return realized at d+1
        int live = 0;
        for (int i = 0; i < N; ++i) live += ex(i, d) ? 1 : 0;
        double gross = 0.0, cost = 0.0, tto = 0.0;
        if (live > 0) {
            for (int i = 0; i < N; ++i) {
                if (!ex(i, d)) continue;
                double y = 0.0;
                if (in.panel->m(i, d + 1) && in.panel->m(i, d))
                    y = (in.panel->px(i, d + 1) / in.panel->px(i, d) - 1.0) /
                        (in.vol->sgm(i, d) + in.vol_eps);
                gross += pos(i, k) * y;
                double dw = std::abs(w(i, k) - w(i, k - 1));
                cost += in.cost[static_cast<size_t>(i)] * dw;
                tto += dw;
            }
            gross /= static_cast<double>(live);
            cost *= in.gamma_eval / static_cast<double>(live);
            tto /= static_cast<double>(live);
        }
        rep.gross.push_back(gross);
        rep.cost.push_back(cost);
        rep.net.push_back(gross - cost);
        rep.turnover.push_back(tto);
    }
    return rep;
}

std::vector<double> rescale_to_vol(const std::vector<double>& returns, double sigma_tgt,
                                   double annualization) {
    DEEPM_REQUIRE(returns.size() >= 2, "rescale needs >= 2 observations");
    double mean = std::accumulate(returns.begin(), returns.end(), 0.0) / static_cast<double>(returns.size());
    double var = 0.0;
    for (double r : returns) var += (r - mean) * (r - mean);
    var /= static_cast<double>(returns.size() - 1);
    double ann_vol = std::sqrt(var * annualization);
    DEEPM_REQUIRE(ann_vol > 0.0, "cannot rescale a zero-volatility series");
    double s = sigma_tgt / ann_vol;
    std::vector<double> out(returns.size());
    for (size_t i = 0; i < returns.size(); ++i) out[i] = returns[i] * s;
    return out;
}

double hac_tstat(const std::vector<double>& x, int lags, bool* degenerate) {
    int T = static_cast<int>(x.size());
    DEEPM_REQUIRE(T >= 30, "HAC t-stat needs >= 30 observations, got ", T);
    if (lags < 0) lags = static_cast<int>(std::floor(4.0 * std::pow(static_cast<double>(T) / 100.0, 2.0 / 9.0)));
    double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(T);
    std::vector<double> e(x.size());
    for (int t = 0; t < T; ++t) e[static_cast<size_t>(t)] = x[static_cast<size_t>(t)] - mean;
    auto gamma = [&](int l) {
        double s = 0.0;
        for (int t = l; t < T; ++t) s += e[static_cast<size_t>(t)] * e[static_cast<size_t>(t - l)];
        return s / static_cast<double>(T);
    };
    double S = gamma(0);
    for (int l = 1; l <= lags; ++l)
        S += 2.0 * (1.0 - static_cast<double>(l) / (static_cast<double>(lags) + 1.0)) * gamma(l);
    if (degenerate) *degenerate = false;
    if (!(S > 0.0)) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    return mean / std::sqrt(S / static_cast<double>(T));
}

namespace {

double sample_std(const std::vector<double>& x) {
    double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    return std::sqrt(var / static_cast<double>(x.size() - 1));
}

}  // namespace

MetricSet compute_metrics(const std::vector<double>& net, const std::vector<double>& gross,
                          const std::vector<double>& bench, const std::vector<double>& notionals,
                          int n_assets, int n_days) {
    DEEPM_REQUIRE(net.size() >= 2, "metrics need >= 2 observations");
    MetricSet m;
    const double A = 252.0;
    size_t T = net.size();
    double mean = std::accumulate(net.begin(), net.end(), 0.0) / static_cast<double>(T);
    double sd = sample_std(net);
    m.net_sr = sd > 0.0 ? std::sqrt(A) * mean / sd : 0.0;
    if (gross.size() == T) {
        double gm = std::accumulate(gross.begin(), gross.end(), 0.0) / static_cast<double>(T);
        double gs = sample_std(gross);
        m.gross_sr = gs > 0.0 ? std::sqrt(A) * gm / gs : 0.0;
    }
    m.t_stat = static_cast<int>(T) >= 30 ? hac_tstat(net) : 0.0;

    double wealth = 1.0, peak = 1.0, mdd = 0.0;
    double log_wealth = 0.0;
    for (double r : net) {
        wealth *= (1.0 + r);
        log_wealth += std::log1p(r);
        peak = std::max(peak, wealth);
        mdd = std::max(mdd, 1.0 - wealth / peak);
    }
    m.cagr = std::exp(log_wealth * A / static_cast<double>(T)) - 1.0;
    m.mdd = mdd;
    if (mdd > 0.0) {
        m.calmar = m.cagr / mdd;
    } else {
        m.calmar_inf = true;
        m.calmar = kInf;
    }

    // Hold = 2*252 / (tau / avg GMV); tau annualized mean per-asset |dw|
    if (n_assets > 0 && n_days > 1 && static_cast<int>(notionals.size()) == n_assets * n_days) {
        double tau = 0.0, gmv = 0.0;
        auto wv = [&](int i, int k) { return notionals[static_cast<size_t>(i) * static_cast<size_t>(n_days) + static_cast<size_t>(k)]; };
        for (int k = 0; k < n_days; ++k) {
            double g = 0.0;
            for (int i = 0; i < n_assets; ++i) g += std::abs(wv(i, k));
            gmv += g;
        }
        gmv /= static_cast<double>(n_days);
        for (int k = 1; k < n_days; ++k) {
            double s = 0.0;
            for (int i = 0; i < n_assets; ++i) s += std::abs(wv(i, k) - wv(i, k - 1));
            tau += s / static_cast<double>(n_assets);
        }
        tau *= A / static_cast<double>(n_days - 1);
        if (tau > 0.0 && gmv > 0.0) {
            m.hold_days = 2.0 * A / (tau / gmv);
        } else {
            m.hold_inf = true;
            m.hold_days = kInf;
        }
    }

    if (bench.size() == T) {
        std::vector<double> spread(T);
        for (size_t t = 0; t < T; ++t) spread[t] = net[t] - bench[t];
        double smean = std::accumulate(spread.begin(), spread.end(), 0.0) / static_cast<double>(T);
        double ssd = sample_std(spread);
        if (ssd > 0.0) {
            m.ir = std::sqrt(A) * smean / ssd;
            m.t_alpha = static_cast<int>(T) >= 30 ? hac_tstat(spread) : 0.0;
        } else {
            m.ir_degenerate = true;
            m.ir = 0.0;
            m.t_alpha = 0.0;
        }
        double bmean = std::accumulate(bench.begin(), bench.end(), 0.0) / static_cast<double>(T);
        double bsd = sample_std(bench);
        if (sd > 0.0 && bsd > 0.0) {
            double cov = 0.0;
            for (size_t t = 0; t < T; ++t) cov += (net[t] - mean) * (bench[t] - bmean);
            cov /= static_cast<double>(T - 1);
            m.rho = cov / (sd * bsd);
        }
    }
    return m;
}

std::string metric_table_header() {
    return "strategy,gross_sr,net_sr,t,cagr,calmar,mdd,hold_days,ir,t_alpha,rho";
}

std::string metric_table_row(const std::string& name, const MetricSet& m) {
    char buf[512];
    auto fmt = [](double v, bool inf_flag) {
        char b[32];
        if (inf_flag)
            std::snprintf(b, sizeof(b), "inf");
        else
            std::snprintf(b, sizeof(b), "%.6f", v);
        return std::string(b);
    };
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%s,%.6f,%s,%.6f,%.6f,%.6f",
                  name.c_str(), m.gross_sr, m.net_sr, m.t_stat, m.cagr,
                  fmt(m.calmar, m.calmar_inf).c_str(), m.mdd,
                  fmt(m.hold_days, m.hold_inf).c_str(), m.ir, m.t_alpha, m.rho);
    return std::string(buf);
}

}  // namespace deepm::backtest
