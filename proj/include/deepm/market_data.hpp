#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deepm/common.hpp"

namespace deepm::data {

// Asset x date close-price grid with availability mask. The sole raw input of
// the whole pipeline: everything downstream is derived from close prices only.
//
// mask[i][t] = 1 where a real observation exists; interior gaps after the
// first observation keep a forward-filled close (so rolling windows stay
// defined) but are masked 0 and skipped by the estimators. In the expected
// forward-fill regime the mask is a contiguous suffix per asset.
struct PricePanel {
    std::vector<std::string> tickers;
    std::vector<std::string> dates;           // ISO-8601, strictly increasing
    std::vector<double> close;                // [n_assets * n_days]
    std::vector<uint8_t> mask;                // [n_assets * n_days]
    std::vector<int> close_rank;              // regional close ordering (cascading protocol)

    int n_assets() const { return static_cast<int>(tickers.size()); }
    int n_days() const { return static_cast<int>(dates.size()); }
    double px(int i, int t) const { return close[static_cast<size_t>(i) * dates.size() + static_cast<size_t>(t)]; }
    double& px(int i, int t) { return close[static_cast<size_t>(i) * dates.size() + static_cast<size_t>(t)]; }
    uint8_t m(int i, int t) const { return mask[static_cast<size_t>(i) * dates.size() + static_cast<size_t>(t)]; }
    uint8_t& m(int i, int t) { return mask[static_cast<size_t>(i) * dates.size() + static_cast<size_t>(t)]; }

    void validate() const;       // throws on invariant violations
    uint64_t content_hash() const;
};

// Ex-ante daily volatility from an EWMA of squared arithmetic returns.
struct VolEstimate {
    std::vector<double> sigma;   // [n_assets * n_days], floored at eps
    std::vector<uint8_t> valid;  // 0 until the asset has produced >= 1 return
    int n_assets = 0, n_days = 0;
    int span = 63;
    double eps = 1e-8;

    double sgm(int i, int t) const { return sigma[static_cast<size_t>(i) * static_cast<size_t>(n_days) + static_cast<size_t>(t)]; }
    uint8_t vld(int i, int t) const { return valid[static_cast<size_t>(i) * static_cast<size_t>(n_days) + static_cast<size_t>(t)]; }
};

enum class FeatureSubset { RawMomentum, SignalBased };

// Stationarized, MAD-clipped inputs; last channel is the existence indicator,
// which also folds in per-channel warm-up (features needing a window of W
// days are masked, not padded, for the first W dates).
struct FeaturePanel {
    std::vector<std::string> names;
    FeatureSubset subset = FeatureSubset::RawMomentum;
    int n_assets = 0, n_days = 0, n_features = 0;
    std::vector<double> values;  // [asset * day * feature]
    std::vector<uint8_t> exist;  // [asset * day]

    double at(int i, int t, int f) const {
        return values[(static_cast<size_t>(i) * static_cast<size_t>(n_days) + static_cast<size_t>(t)) * static_cast<size_t>(n_features) + static_cast<size_t>(f)];
    }
    double& at(int i, int t, int f) {
        return values[(static_cast<size_t>(i) * static_cast<size_t>(n_days) + static_cast<size_t>(t)) * static_cast<size_t>(n_features) + static_cast<size_t>(f)];
    }
    uint8_t ex(int i, int t) const { return exist[static_cast<size_t>(i) * static_cast<size_t>(n_days) + static_cast<size_t>(t)]; }
};

struct LeadLagPair {
    int leader = 0;
    int follower = 1;
    double coupling = 0.5;  // follower return at t gains coupling * leader shock at t-1
};

// Deterministic two-regime synthetic market. The hidden per-asset trend is a
// slow AR(1); a global Markov regime switches volatility between a calm and a
// crisis state; planted lead-lag pairs add a 1-day causal cross-asset link.
struct SynthSpec {
    int n_assets = 6;
    int n_days = 4000;
    uint64_t seed = 1;
    double trend_persistence = 0.97;
    double trend_vol = 0.0015;       // stationary std of the hidden drift
    double base_vol = 0.01;
    double crisis_enter_prob = 0.02;
    double crisis_exit_prob = 0.10;
    double crisis_vol_mult = 3.0;
    double follower_trend_scale = 1.0;   // scales the hidden drift of coupled followers
    double follower_vol_scale = 1.0;     // scales the idiosyncratic vol of coupled followers
    std::vector<LeadLagPair> pairs;      // default: (0->1),(2->3),... if empty
    std::vector<std::string> groups;     // default: pair-mates share a group
    std::vector<int> close_ranks;        // default: i % 3

    std::vector<LeadLagPair> effective_pairs() const;
    std::vector<std::string> effective_groups() const;
    std::vector<int> effective_ranks() const;
};

struct LoadReport {
    int rows_rejected = 0;       // non-positive prices
    std::vector<std::string> warnings;
};

// Reads delimited text with header `date,ticker,close`. Non-positive prices
// reject the row with a diagnostic; an unparseable date is a hard error.
PricePanel load_prices(const std::string& path, LoadReport* report = nullptr);
void save_prices(const PricePanel& panel, const std::string& path);

PricePanel synth_generate(const SynthSpec& spec);

VolEstimate estimate_vol(const PricePanel& panel, int span = 63, double eps = 1e-8);

// Causal rolling median/MAD clip to [m_t +- k*scale*MAD_t]. Degenerate MAD=0
// windows pass values through unchanged. Entries with valid=0 are skipped and
// left untouched.
std::vector<double> mad_clip(const std::vector<double>& series, int window = 252, double k = 5.0,
                             double scale = 1.48, const std::vector<uint8_t>* valid = nullptr);

FeaturePanel compute_features(const PricePanel& panel, const VolEstimate& vol,
                              FeatureSubset subset, int mad_window = 252, double mad_k = 5.0,
                              double mad_scale = 1.48);

// (fast EWMA - slow EWMA) of close over (sigma + eps), re-normalized by its
// own rolling 252-day sample std. Shared by the feature pipeline and the
// MACD trend baseline.
std::vector<double> macd_normalized(const PricePanel& panel, const VolEstimate& vol, int asset,
                                    int fast_span, int slow_span, int renorm_window = 252);

// Flat binary dump (row-major doubles) plus a sidecar JSON manifest carrying
// names, shape and the subset tag.
void save_features(const FeaturePanel& fp, const std::string& bin_path,
                   const std::string& manifest_path);
FeaturePanel load_features(const std::string& bin_path, const std::string& manifest_path);

}  // namespace deepm::data
