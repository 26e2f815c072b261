#pragma once

#include <optional>
#include <string>
#include <vector>

#include "deepm/backtest.hpp"
#include "deepm/macro_graph.hpp"
#include "deepm/market_data.hpp"
#include "deepm/objective.hpp"
#include "deepm/policy.hpp"

namespace deepm::train {

struct TrainConfig {
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    double grad_clip_norm = 1.0;
    int batch_size = 64;
    int microbatch = 8;
    int iterations = 1000;
    int patience = 50;       // evaluations without min_delta improvement
    double ema_alpha = 0.45;
    double min_delta = 0.001;
    int stop_burn_in = 20;   // iterations before the stop trigger arms
    int eval_every = 1;
    int seq_len = 84;
    int burn_in_train = 21;
    int burn_in_test = 63;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

    void validate() const;
};

struct EnsembleSpec {
    int n_seeds = 8;
    int top_k = 4;
};

struct DateRange {
    int begin = 0, end = 0;  // [begin, end) day indices
    int len() const { return end - begin; }
};

struct SplitBlock {
    DateRange train;  // excludes validation tail
    DateRange val;    // last val_frac of the raw train range, chronological
    DateRange test;
};

struct SplitPlan {
    std::vector<SplitBlock> blocks;
};

// Expanding five-year blocks: train on all prior history, validate on the
// final val_frac of it, test on the next block. Partial final test blocks
// shorter than min_test_days are dropped.
SplitPlan walk_forward_plan(int n_days, int block_years = 5, double val_frac = 0.1,
                            int days_per_year = 252, int min_test_days = 21);

// Non-overlapping after excluding burn-in: starts spaced seq_len - burn_in
// apart, windows fully inside [range_begin, range_end).
std::vector<int> make_sequences(int range_begin, int range_end, int seq_len, int burn_in);

// ---------------------------------------------------------------------------
// optimizer + early stopping
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<double> m, v;
    int64_t step = 0;
    int skipped = 0;  // non-finite gradient steps
};

struct StepInfo {
    double grad_norm = 0.0;
    double applied_norm = 0.0;
    bool skipped = false;
};

// Decoupled-weight-decay adaptive-moment update with global norm clipping.
StepInfo optimizer_step(ad::ParameterStore& store, AdamState& state, const TrainConfig& cfg);

class EmaEarlyStop {
public:
    explicit EmaEarlyStop(const TrainConfig& cfg)
        : alpha_(cfg.ema_alpha), min_delta_(cfg.min_delta), patience_(cfg.patience),
          stop_burn_in_(cfg.stop_burn_in) {}

    struct Decision {
        bool stop = false;
        bool improved = false;
        double smoothed = 0.0;
    };
    Decision observe(double raw_score, int iteration);

    double best_smoothed() const { return best_; }
    int best_eval() const { return best_eval_; }

private:
    double alpha_, min_delta_;
    int patience_, stop_burn_in_;
    bool has_ = false;
    double smoothed_ = 0.0;
    double best_ = -kInf;
    int best_eval_ = -1;
    int evals_ = 0;
    int since_improve_ = 0;
};

// ---------------------------------------------------------------------------
// dataset plumbing
// ---------------------------------------------------------------------------

struct Dataset {
    data::PricePanel panel;
    data::VolEstimate vol;
    data::FeaturePanel features;
    std::vector<graph::AssetMeta> universe;
    graph::MacroGraph macro;
    std::vector<double> cost;       // decimal c_i
    std::vector<double> y;          // [N*T] vol-scaled next-period return, 0 if undefined
    std::vector<double> inv_sigma;  // [N*T]
    int N = 0, T = 0;
    int first_active = 0;  // first day with any existing asset

    static Dataset build(data::PricePanel panel, std::vector<graph::AssetMeta> universe,
                         data::FeatureSubset subset, int vol_span = 63, double vol_eps = 1e-8);
    uint64_t content_hash() const { return panel.content_hash(); }
};

// SequenceModel over a set of window starts; per-sample dropout keys are
// hash(dropout_seed, local sequence index) so gradients are invariant to the
// microbatch split.
class PolicySequenceModel : public objective::SequenceModel {
public:
    PolicySequenceModel(policy::PolicyModel& model, const Dataset& ds, std::vector<int> starts,
                        int seq_len, int burn_in, double gamma, uint64_t dropout_seed);

    int total_sequences() const override { return static_cast<int>(starts_.size()); }
    int seq_len() const override { return L_; }
    ad::NodeId build_returns(ad::Tape& tape, const std::vector<int>& ids, bool train_mode) override;
    const std::vector<double>& loss_mask() const override { return loss_mask_; }

    policy::ForwardBatch make_batch(const std::vector<int>& ids, bool train_mode) const;
    policy::ReturnsInputs make_returns_inputs(const std::vector<int>& ids) const;

private:
    policy::PolicyModel& model_;
    const Dataset& ds_;
    std::vector<int> starts_;
    int L_, burn_in_;
    double gamma_;
    uint64_t dropout_seed_;
    std::vector<double> loss_mask_;
};

// Positions [N x range.len()] from sliding windows with test burn-in context;
// dropout disabled. Windows step by seq_len - burn_in.
std::vector<double> forward_positions(policy::PolicyModel& model, const Dataset& ds,
                                      DateRange range, int seq_len, int burn_in);

std::vector<double> average_positions(const std::vector<std::vector<double>>& member_positions);

// ---------------------------------------------------------------------------
// per-seed training and ensembling
// ---------------------------------------------------------------------------

struct TrainedSeed {
    uint64_t seed = 0;
    bool ok = false;
    std::string fail_reason;
    policy::PolicyModel model;  // best checkpoint by smoothed validation Sharpe
    double best_smoothed_val = -kInf;
    int best_iteration = -1;
    int iterations_run = 0;
    std::vector<double> val_history;
    std::string diagnostics;  // per-step objective diagnostics, delimited
};

// Runs the two-pass/AdamW loop with EMA early stopping. Validation metric is
// the annualized pooled net Sharpe over the validation range at the training
// gamma (no SoftMin term).
TrainedSeed train_seed(uint64_t seed, const Dataset& ds, DateRange train_range,
                       DateRange val_range, const policy::PolicyConfig& pcfg,
                       const objective::LossConfig& lcfg, const TrainConfig& tcfg);

// Ranks by smoothed validation Sharpe (ties: lower seed). Falls back to all
// successful seeds with a warning when fewer than top_k succeeded.
std::vector<size_t> ensemble_select(const std::vector<TrainedSeed>& seeds, int top_k,
                                    std::string* warning = nullptr);

struct EnsembleRun {
    std::vector<TrainedSeed> seeds;
    std::vector<size_t> selected;
    std::string warning;
};

// Trains n seeds (parallel across threads), selects the top K.
EnsembleRun train_ensemble(const Dataset& ds, DateRange train_range, DateRange val_range,
                           const policy::PolicyConfig& pcfg, const objective::LossConfig& lcfg,
                           const TrainConfig& tcfg, const EnsembleSpec& ens, uint64_t base_seed,
                           int jobs);

double validation_sharpe(policy::PolicyModel& model, const Dataset& ds, DateRange val_range,
                         const TrainConfig& tcfg, double gamma);

}  // namespace deepm::train
