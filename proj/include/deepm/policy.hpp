#pragma once

#include <optional>
#include <string>
#include <vector>

#include "deepm/macro_graph.hpp"
#include "deepm/tape.hpp"

namespace deepm::policy {

enum class Protocol { DirectedDelay, Cascading };
enum class GraphMode { GAT, GCN, None };
enum class BlockOrder { CrossThenGraph, GraphThenCross };

struct PolicyConfig {
    int d_model = 64;
    int heads = 4;
    double dropout = 0.3;
    Protocol protocol = Protocol::DirectedDelay;
    GraphMode graph_mode = GraphMode::GAT;
    bool cross_attn = true;
    BlockOrder block_order = BlockOrder::CrossThenGraph;
    bool rezero = true;
    int n_assets = 0;
    int n_features = 7;  // includes the existence channel

    void validate() const;

    // Parameter count is a pure function of this config:
    //   N*d + (d+1)*d + d                        static context
    //   2*(d*F + F) + F*F + F + 2*F*d            V-VSN (FiLM, gate, value proj)
    //   8*d^2 + 4*d + 2*d^2 + 2*d                LSTM + state init
    //   (6*d^2 + 7*d) * n_adapters               ResSwiGLU adapters (d_ff = 2d)
    //   4*(d^2 + d)                              temporal MHA
    //   [4*(d^2 + d) + 2*d (+1 rezero)]          cross-sectional block, if on
    //   [3*d^2 + 2*d (+1)] GAT / [d^2 + 2*d (+1)] GCN
    //   d + 1                                    action head
    // with n_adapters = 2 + cross_on + graph_on.
    int64_t expected_param_count() const;
};

struct AdapterIds {
    int w1 = -1, b1 = -1, v = -1, bv = -1, w2 = -1, b2 = -1, ln_g = -1, ln_b = -1;
};
struct MhaIds {
    int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1, wo = -1, bo = -1;
};

struct PolicyParamIds {
    int embed = -1, w_s = -1, b_s = -1;
    int w_gamma = -1, b_gamma = -1, w_beta = -1, b_beta = -1, w_gate = -1, b_gate = -1;
    int u_conv = -1, b_conv = -1;
    int w_x = -1, w_h = -1, b_lstm = -1, w0 = -1, b0 = -1;
    AdapterIds ad_lstm, ad_temp, ad_cross, ad_gnn;
    MhaIds temp, cross;
    int cross_ln_g = -1, cross_ln_b = -1, alpha_cross = -1;
    int gat_q = -1, gat_k = -1, gat_w = -1, gnn_ln_g = -1, gnn_ln_b = -1, alpha_gnn = -1;
    int w_head = -1, b_head = -1;
};

struct PolicyModel {
    PolicyConfig config;
    ad::ParameterStore store;
    PolicyParamIds ids;

    static PolicyModel init(const PolicyConfig& config, uint64_t seed);
    int64_t parameter_count() const { return store.total_count(); }
};

// One microbatch of sequences presented to the network.
struct ForwardBatch {
    int B = 0, N = 0, L = 0, F = 0;
    ad::Tensor features;          // [B,N,L,F]
    ad::Tensor exist;             // [B,N,L] in {0,1}
    std::vector<double> cost;     // [N] c_i, decimal
    std::vector<int> close_rank;  // [N], cascading protocol ordering
    const graph::MacroGraph* macro = nullptr;  // required unless graph_mode == None
    std::vector<uint64_t> sample_keys;         // dropout seed per sequence
    bool train_mode = false;
};

// Diagnostics snapshot for tests and the verify suite.
struct ForwardCapture {
    ad::Tensor vsn_weights;      // [B,N,L,F] simplex over channels
    ad::Tensor cross_attention;  // [B*L*heads, N, N]
    ad::Tensor graph_attention;  // [B*L, N, N]
};

// Full pipeline: V-VSN -> LSTM -> temporal attention -> spatial blocks in the
// configured order -> tanh action head. Returns positions [B,N,L] in (-1,1),
// zero on masked assets.
ad::NodeId policy_forward(ad::Tape& tape, PolicyModel& model, const ForwardBatch& fb,
                          ForwardCapture* capture = nullptr);

// Net-return layer on the tape: R[b,t] = gross - gamma * linear turnover cost,
// with w_{t-1} = 0 at the sequence start (first-day entry fully charged).
struct ReturnsInputs {
    ad::Tensor y;          // [B,N,L] vol-scaled next-period return, 0 where invalid
    ad::Tensor inv_sigma;  // [B,N,L] 1/(sigma_hat + eps)
    ad::Tensor inv_live;   // [B,L] 1/N_t, 0 when no asset is live
    double gamma = 0.5;
};
ad::NodeId net_returns_node(ad::Tape& tape, ad::NodeId positions, const ForwardBatch& fb,
                            const ReturnsInputs& ri);

// Versioned binary checkpoint; round-trips bit-exactly.
void save_checkpoint(const PolicyModel& model, const std::string& path);
PolicyModel load_checkpoint(const std::string& path);

std::string protocol_to_string(Protocol p);
Protocol protocol_from_string(const std::string& s);
std::string graph_mode_to_string(GraphMode m);
GraphMode graph_mode_from_string(const std::string& s);
std::string block_order_to_string(BlockOrder b);
BlockOrder block_order_from_string(const std::string& s);

}  // namespace deepm::policy
