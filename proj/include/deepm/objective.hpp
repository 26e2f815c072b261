#pragma once

#include <string>
#include <vector>

#include "deepm/tape.hpp"

namespace deepm::objective {

struct LossConfig {
    double tau = 0.2;            // SoftMin temperature
    double lambda = 0.1;         // SoftMin weight
    double gamma = 0.5;          // transaction-cost scaler used in training returns
    double annualization = 252.0;
    double eps_sigma = 1e-8;
    double eps_var = 1e-12;
    int burn_in = 21;            // steps excluded from loss (63 at test time)
    int groups = 1;              // G groups of K=B/G sequences; SoftMin runs within
                                 // each group and averages across groups
    void validate() const;
};

// Net returns per sequence per step plus the burn-in mask. Masked entries
// contribute to neither statistics nor gradients.
struct ReturnMatrix {
    int B = 0, L = 0;
    std::vector<double> R;          // [B*L]
    std::vector<double> loss_mask;  // [B*L] in {0,1}

    double at(int b, int t) const { return R[static_cast<size_t>(b) * static_cast<size_t>(L) + static_cast<size_t>(t)]; }
    double& at(int b, int t) { return R[static_cast<size_t>(b) * static_cast<size_t>(L) + static_cast<size_t>(t)]; }
    double mask_at(int b, int t) const { return loss_mask[static_cast<size_t>(b) * static_cast<size_t>(L) + static_cast<size_t>(t)]; }

    static ReturnMatrix zeros(int B, int L) {
        ReturnMatrix m;
        m.B = B;
        m.L = L;
        m.R.assign(static_cast<size_t>(B) * static_cast<size_t>(L), 0.0);
        m.loss_mask.assign(static_cast<size_t>(B) * static_cast<size_t>(L), 1.0);
        return m;
    }
};

// Pooled and per-sample sums with the derived moments. sigma uses the clamp
// sigma = sqrt(max(q - mu^2, eps_var)); when the clamp is active the gradient
// through the variance path is zero and the flag records it.
struct SufficientStats {
    double s1 = 0.0, s2 = 0.0;
    int64_t n = 0;
    std::vector<double> s1_b, s2_b;
    std::vector<int64_t> n_b;

    double mu = 0.0, q = 0.0, sigma = 0.0;
    bool clamped = false;
    std::vector<double> mu_b, q_b, sigma_b;
    std::vector<uint8_t> clamped_b;
    std::vector<double> sr_b;  // annualized per-sample Sharpe, Eq.-style sqrt(A) mu/(sigma+eps)

    static SufficientStats compute(const ReturnMatrix& rm, const LossConfig& cfg);
};

// Unannualized pooled Sharpe mu/(sigma + eps_sigma); requires >= 2 unmasked entries.
double pooled_sharpe(const ReturnMatrix& rm, const LossConfig& cfg);

// -tau * log( (1/B) sum_b exp(-v_b / tau) ), computed with a max shift.
double softmin(const std::vector<double>& values, double tau);

// L = -sqrt(A) mu/(sigma+eps) - lambda * (1/G) sum_g SoftMin_tau({SR_b : b in g})
double total_loss(const ReturnMatrix& rm, const LossConfig& cfg);

// Closed-form dL/dR with burn-in masking and clamp-aware variance paths.
std::vector<double> analytic_upstream_grad(const ReturnMatrix& rm, const LossConfig& cfg,
                                           const SufficientStats* precomputed = nullptr);

// Gibbs weights q*_b = exp(-SR_b/tau) / sum_j exp(-SR_j/tau) plus KL(Q*||uniform).
struct AdversarialWeights {
    std::vector<double> q;
    double kl = 0.0;
};
AdversarialWeights adversarial_weights(const std::vector<double>& sr, double tau);

// EVaR_alpha(Z) = inf_{lambda>0} lambda log E[e^{Z/lambda}] - lambda log(1-alpha),
// minimized by golden section on log(lambda) over [1e-4, 1e4].
double evar(const std::vector<double>& z, const std::vector<double>& probs, double alpha);

// C(p) = gamma * sum_{t>=1} || v_t . (p_t - p_{t-1}) ||_1 over a [T x N] path.
double turnover_cost(const std::vector<double>& path, const std::vector<double>& vols, int T,
                     int N, double gamma);

// ---------------------------------------------------------------------------
// Exact two-pass microbatching
// ---------------------------------------------------------------------------

// Anything that can forward a subset of its sequences into net returns on a
// tape. Per-sample forwards must be microbatch-independent (no batch-coupled
// layers, per-sample dropout keys); the substrate guarantees the rest.
class SequenceModel {
public:
    virtual ~SequenceModel() = default;
    virtual int total_sequences() const = 0;
    virtual int seq_len() const = 0;
    // Returns node of shape [ids.size() x seq_len].
    virtual ad::NodeId build_returns(ad::Tape& tape, const std::vector<int>& ids,
                                     bool train_mode) = 0;
    virtual const std::vector<double>& loss_mask() const = 0;  // [B_total * L]
};

struct StepDiagnostics {
    std::vector<double> sr_b;
    std::vector<double> q_star;   // flattened group-wise adversarial weights
    double kl = 0.0;              // KL(Q*||uniform), averaged over groups
    bool pooled_clamped = false;
    std::vector<uint8_t> clamped_b;
    std::string delimited() const;  // one header-free CSV line per window
};

struct TwoPassResult {
    SufficientStats stats;
    ReturnMatrix returns;
    double loss = 0.0;
    StepDiagnostics diag;
};

// Pass 1 forwards without recording and accumulates sufficient statistics;
// pass 2 replays each microbatch under the same per-sample seeds and injects
// the analytical upstream gradient. Gradients land in `store`. Microbatch
// composition must be identical across passes (hard error otherwise).
class TwoPassContext {
public:
    TwoPassContext(SequenceModel& model, const LossConfig& cfg) : model_(model), cfg_(cfg) {}
    void pass1(const std::vector<std::vector<int>>& microbatches);
    TwoPassResult pass2(ad::ParameterStore& store, const std::vector<std::vector<int>>& microbatches);

private:
    SequenceModel& model_;
    LossConfig cfg_;
    bool pass1_done_ = false;
    uint64_t composition_hash_ = 0;
    ReturnMatrix rm_;
};

TwoPassResult two_pass_step(SequenceModel& model, ad::ParameterStore& store,
                            const std::vector<std::vector<int>>& microbatches,
                            const LossConfig& cfg);

std::vector<std::vector<int>> split_microbatches(int total, int microbatch_size);

}  // namespace deepm::objective
