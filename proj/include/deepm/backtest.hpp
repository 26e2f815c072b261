#pragma once

#include <string>
#include <vector>

#include "deepm/macro_graph.hpp"
#include "deepm/market_data.hpp"

namespace deepm::backtest {

// Structural minimum cost model: c = max(floor, C_struct * lambda), snapped to
// the nearest band. Explicit per-asset final_bps overrides win.
struct CostModel {
    double floor_bps = 0.25;
    std::vector<double> bands_bps = {0.25, 0.50, 0.75, 1.00, 1.50, 2.50, 6.00, 15.0};

    double asset_cost_bps(const graph::AssetMeta& meta) const;
    double asset_cost(const graph::AssetMeta& meta) const {  // decimal fraction
        return asset_cost_bps(meta) * 1e-4;
    }
    std::vector<double> universe_costs(const std::vector<graph::AssetMeta>& u) const;
};

struct MetricSet {
    double gross_sr = 0.0;
    double net_sr = 0.0;
    double t_stat = 0.0;
    double cagr = 0.0;
    double calmar = 0.0;
    double mdd = 0.0;        // positive magnitude
    double hold_days = 0.0;
    double ir = 0.0;
    double t_alpha = 0.0;
    double rho = 0.0;
    bool calmar_inf = false;     // MDD = 0 sentinel; excluded from aggregation
    bool hold_inf = false;       // zero turnover
    bool ir_degenerate = false;  // zero tracking error
};

struct BacktestReport {
    // daily series; entry k is realized on day d0+k+1 from positions at d0+k
    std::vector<double> gross;
    std::vector<double> net;
    std::vector<double> cost;
    std::vector<double> turnover;   // (1/N_t) sum_i |w_t - w_{t-1}|
    std::vector<double> notionals;  // [N x D] w = p/(sigma+eps)
    int n_assets = 0, n_days = 0, day0 = 0;
    MetricSet metrics;
};

struct SimInputs {
    const data::PricePanel* panel = nullptr;
    const data::VolEstimate* vol = nullptr;
    const std::vector<uint8_t>* exist = nullptr;  // [N x T_panel]; positions must be 0 off it
    std::vector<double> cost;                     // [N] decimal
    int day0 = 0;  // first day covered by the position stream
    int days = 0;  // D
    double gamma_eval = 1.0;
    double vol_eps = 1e-8;
};

// Executes a causal position stream under the linear cost model. Evaluation
// always charges full costs (gamma_eval = 1) regardless of the training gamma.
// A nonzero position on a masked asset is a contract breach (hard error).
BacktestReport simulate(const std::vector<double>& positions, const SimInputs& in);

// single ex-post scalar so the annualized std hits sigma_tgt
std::vector<double> rescale_to_vol(const std::vector<double>& returns, double sigma_tgt = 0.10,
                                   double annualization = 252.0);

double hac_tstat(const std::vector<double>& x, int lags = -1, bool* degenerate = nullptr);

// Full Table-1 metric set; returns are used as-is (rescale first if desired).
MetricSet compute_metrics(const std::vector<double>& net, const std::vector<double>& gross,
                          const std::vector<double>& bench, const std::vector<double>& notionals,
                          int n_assets, int n_days);

// Metric table row in the Table-1 column order:
// strategy,gross_sr,net_sr,t,cagr,calmar,mdd,hold_days,ir,t_alpha,rho
std::string metric_table_header();
std::string metric_table_row(const std::string& name, const MetricSet& m);

}  // namespace deepm::backtest
