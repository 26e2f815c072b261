#pragma once

#include <string>
#include <vector>

#include "deepm/market_data.hpp"

namespace deepm::baselines {

struct CovEstimate {
    int n = 0;
    std::vector<double> cov;  // [n*n], shrunk toward scaled identity, PSD
    double shrinkage = 0.0;   // optimal intensity actually applied
    double a(int i, int j) const { return cov[static_cast<size_t>(i) * static_cast<size_t>(n) + static_cast<size_t>(j)]; }
};

enum class BaselineKind {
    Passive,
    Tsmom,
    Macd,
    RiskManagedTsmom,
    RiskManagedMacd,
    MvoTsmom,
    MvoTpTsmom,
    MvoTpMacd,
    ErcTsmom,
};

std::string baseline_name(BaselineKind k);
BaselineKind baseline_from_string(const std::string& s);

struct BaselineConfig {
    BaselineKind kind = BaselineKind::Tsmom;
    double ridge = 1.0;        // lambda for plain MVO
    double kappa = 10.0;       // quadratic turnover anchor for MVO-TP
    double sigma_tgt = 0.10 / std::sqrt(252.0);  // daily target for vol scaling
    int cov_window = 252;
};

// sign of the past 252-day return; 0 on insufficient history or a flat year
double tsmom_signal(const data::PricePanel& panel, int asset, int day);

// mean over (8,24),(16,48),(32,96) of phi(normalized MACD), phi(x)=x e^{-x^2/4}/0.89
double macd_signal(const data::PricePanel& panel, const data::VolEstimate& vol, int asset, int day);
double macd_response(double x);

// Ledoit-Wolf shrinkage toward scaled identity from [T x n] observation rows.
CovEstimate ledoit_wolf_cov(const std::vector<double>& obs, int T, int n);

// p = sigma_tgt / sqrt(p~' S p~) * p~ with p~ = s/||s||_1; all-zero s -> zeros
std::vector<double> risk_managed_scale(const std::vector<double>& s, const CovEstimate& cov,
                                       double sigma_tgt);

// kappa = 0: p ~ (S + ridge I)^{-1} s; kappa > 0: p ~ (S + kappa I)^{-1}(s + kappa p_prev).
// Direction only; callers resolve leverage with risk_managed_scale.
std::vector<double> mvo_allocate(const std::vector<double>& s, const CovEstimate& cov,
                                 double ridge, double kappa, const std::vector<double>& p_prev);

// long-only equal-risk-contribution weights (cyclic coordinate descent),
// tolerance 1e-10 on the max risk-contribution spread; ||q||_1 = 1
std::vector<double> erc_weights(const CovEstimate& cov, double tol = 1e-10, int max_passes = 1000);

// full ERC baseline: solve q, then impose p = sign(s) .* q
std::vector<double> erc_allocate(const std::vector<double>& s, const CovEstimate& cov);

// Positions [N x D] for panel days [day0, day0+D) under the same execution
// contract as the learned policy. Causal: day t uses data <= t only.
std::vector<double> run_baseline(const BaselineConfig& cfg, const data::PricePanel& panel,
                                 const data::VolEstimate& vol, const std::vector<uint8_t>& exist,
                                 int day0, int days);

void save_signals(const std::vector<double>& positions, const data::PricePanel& panel, int day0,
                  int days, const std::string& path);

}  // namespace deepm::baselines
