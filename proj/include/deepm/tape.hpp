#pragma once

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "deepm/tensor.hpp"

namespace deepm::ad {

using NodeId = int32_t;

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
};

// Flat registry of learnable tensors. Gradients accumulate across backward
// calls until zero_grads(); creation order is the canonical ordering used by
// optimizers and checkpoints.
class ParameterStore {
public:
    int add(const std::string& name, Tensor init) {
        params.push_back(Parameter{name, std::move(init), Tensor{}});
        Parameter& p = params.back();
        p.grad = Tensor(p.value.shape, 0.0);
        return static_cast<int>(params.size()) - 1;
    }
    size_t size() const { return params.size(); }
    Parameter& operator[](int i) { return params[static_cast<size_t>(i)]; }
    const Parameter& operator[](int i) const { return params[static_cast<size_t>(i)]; }

    void zero_grads() {
        for (auto& p : params) std::fill(p.grad.v.begin(), p.grad.v.end(), 0.0);
    }
    int64_t total_count() const {
        int64_t n = 0;
        for (const auto& p : params) n += p.value.numel();
        return n;
    }
    std::vector<double> flat_values() const;
    std::vector<double> flat_grads() const;
    void set_flat_values(const std::vector<double>& flat);
    void add_to_grads(const std::vector<double>& flat);

    std::vector<Parameter> params;
};

enum class OpKind {
    Input,
    Param,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    MatMul,
    Tanh,
    Sigmoid,
    SiLU,
    Abs,
    Softmax,
    LayerNorm,
    Dropout,
    Concat,
    Slice,
    ReduceSum,
    ReduceMean,
    ReduceAll,
    Permute,
    Reshape,
    TimeShift,
    Broadcast,
};

struct Node {
    OpKind kind;
    std::vector<NodeId> in;
    Tensor value;

    // op context (meaning depends on kind)
    int axis = 0;
    bool flag_a = false;  // MatMul: transpose lhs; reductions: keepdim
    bool flag_b = false;  // MatMul: transpose rhs
    int64_t start = 0, len = 0;
    double scalar = 0.0;
    double eps = 0.0;
    double rate = 0.0;
    std::array<int, 4> perm{0, 1, 2, 3};
    Shape in_shape;
    Tensor mask;      // Softmax: validity mask (broadcast over leading axes)
    Tensor bias;      // Softmax: additive logits bias (broadcast over leading axes)
    uint64_t lane = 0;
    std::vector<uint64_t> keys;  // Dropout: per-sample seeds along axis 0

    ParameterStore* store = nullptr;
    int param_id = -1;
};

// Deterministic single-threaded reverse-mode tape. Nodes are created in
// topological order; backward visits them in reverse exactly once. Multiple
// backward calls accumulate into the parameter store.
class Tape {
public:
    explicit Tape(bool check_finite = false) : check_finite_(check_finite) {}

    NodeId input(Tensor v);
    NodeId param(ParameterStore& store, int param_id);

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double c);
    NodeId add_bias(NodeId x, NodeId bias);
    NodeId matmul(NodeId a, NodeId b, bool ta = false, bool tb = false);
    NodeId tanh_(NodeId x);
    NodeId sigmoid_(NodeId x);
    NodeId silu(NodeId x);
    NodeId abs_(NodeId x);
    // softmax over the last axis; entries with mask 0 get probability exactly 0;
    // all-masked rows produce all-zero output. bias is added to logits first.
    NodeId softmax_masked(NodeId logits, Tensor valid_mask = Tensor{}, Tensor add_bias = Tensor{});
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps = 1e-8);
    NodeId dropout(NodeId x, double rate, uint64_t lane, std::vector<uint64_t> sample_keys);
    NodeId concat(const std::vector<NodeId>& xs, int axis);
    NodeId slice(NodeId x, int axis, int64_t start, int64_t len);
    NodeId reduce_sum(NodeId x, int axis, bool keepdim = false);
    NodeId reduce_mean(NodeId x, int axis, bool keepdim = false);
    NodeId reduce_sum_all(NodeId x);
    NodeId permute(NodeId x, std::array<int, 4> perm);
    NodeId reshape(NodeId x, Shape s);
    NodeId time_shift(NodeId x, int axis);
    NodeId broadcast(NodeId x, int axis, int64_t n);

    const Tensor& value(NodeId id) const {
        DEEPM_REQUIRE(id >= 0 && id < static_cast<NodeId>(nodes_.size()), "bad node id ", id);
        return nodes_[static_cast<size_t>(id)].value;
    }
    size_t num_nodes() const { return nodes_.size(); }

    // Injects `upstream` as dL/d(output) and accumulates parameter gradients.
    void backward(NodeId output, const Tensor& upstream);

    // Test hook: recomputes every non-leaf node from its inputs and returns the
    // max abs deviation from the cached activations (0 expected).
    double replay_max_dev();

private:
    NodeId push(Node n);
    void forward_eval(Node& n);
    void backward_node(size_t i, std::vector<Tensor>& adj, std::vector<char>& has);
    Tensor& adj_of(NodeId id, std::vector<Tensor>& adj, std::vector<char>& has);

    std::vector<Node> nodes_;
    bool check_finite_ = false;
};

// Compares reverse-mode gradients in `store` against central finite
// differences of `fn`. fn(true) must rebuild the graph, run backward and
// return the scalar value, leaving gradients accumulated in the store;
// fn(false) must return the value only. Relative error uses
// |a-n| / max(1, |a|, |n|).
struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_coord = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    bool pass(double tol) const { return max_rel_err < tol; }
};

GradCheckReport grad_check(const std::function<double(bool)>& fn, ParameterStore& store,
                           double step = 1e-5);

}  // namespace deepm::ad
