#include "deepm/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cstring>

namespace deepm::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

std::vector<double> ParameterStore::flat_values() const {
    std::vector<double> out;
    out.reserve(static_cast<size_t>(total_count()));
    for (const auto& p : params) out.insert(out.end(), p.value.v.begin(), p.value.v.end());
    return out;
}

std::vector<double> ParameterStore::flat_grads() const {
    std::vector<double> out;
    out.reserve(static_cast<size_t>(total_count()));
    for (const auto& p : params) out.insert(out.end(), p.grad.v.begin(), p.grad.v.end());
    return out;
}

void ParameterStore::set_flat_values(const std::vector<double>& flat) {
    DEEPM_REQUIRE(static_cast<int64_t>(flat.size()) == total_count(), "flat size mismatch");
    size_t k = 0;
    for (auto& p : params)
        for (double& x : p.value.v) x = flat[k++];
}

void ParameterStore::add_to_grads(const std::vector<double>& flat) {
    DEEPM_REQUIRE(static_cast<int64_t>(flat.size()) == total_count(), "flat size mismatch");
    size_t k = 0;
    for (auto& p : params)
        for (double& g : p.grad.v) g += flat[k++];
}

namespace {

// outer/inner decomposition around one axis
struct AxisView {
    int64_t outer, n, inner;
};
AxisView axis_view(const Shape& s, int axis) {
    DEEPM_REQUIRE(axis >= 0 && axis < s.ndim, "axis ", axis, " out of range for ", s.str());
    AxisView v{1, s.dim[axis], 1};
    for (int i = 0; i < axis; ++i) v.outer *= s.dim[i];
    for (int i = axis + 1; i < s.ndim; ++i) v.inner *= s.dim[i];
    return v;
}

uint64_t dropout_key(uint64_t sample_key, uint64_t lane, uint64_t elem) {
    return hash_combine(hash_combine(sample_key, lane), elem);
}

}  // namespace

NodeId Tape::push(Node n) {
    if (check_finite_ && n.kind != OpKind::Input) {
        DEEPM_REQUIRE(n.value.all_finite(), "non-finite value produced by op #",
                      static_cast<int>(n.kind));
    }
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
}

NodeId Tape::input(Tensor v) {
    Node n;
    n.kind = OpKind::Input;
    n.value = std::move(v);
    return push(std::move(n));
}

NodeId Tape::param(ParameterStore& store, int param_id) {
    DEEPM_REQUIRE(param_id >= 0 && param_id < static_cast<int>(store.size()), "bad param id");
    Node n;
    n.kind = OpKind::Param;
    n.value = store[param_id].value;  // snapshot at build time
    n.store = &store;
    n.param_id = param_id;
    return push(std::move(n));
}

void Tape::forward_eval(Node& n) {
    auto& N = nodes_;
    auto val = [&](NodeId id) -> const Tensor& { return N[static_cast<size_t>(id)].value; };

    switch (n.kind) {
        case OpKind::Input:
        case OpKind::Param:
            break;

        case OpKind::Add: {
            const Tensor &a = val(n.in[0]), &b = val(n.in[1]);
            DEEPM_REQUIRE(a.shape == b.shape, "add shape mismatch ", a.shape.str(), " vs ", b.shape.str());
            n.value = a;
            for (size_t i = 0; i < b.v.size(); ++i) n.value.v[i] += b.v[i];
            break;
        }
        case OpKind::Sub: {
            const Tensor &a = val(n.in[0]), &b = val(n.in[1]);
            DEEPM_REQUIRE(a.shape == b.shape, "sub shape mismatch ", a.shape.str(), " vs ", b.shape.str());
            n.value = a;
            for (size_t i = 0; i < b.v.size(); ++i) n.value.v[i] -= b.v[i];
            break;
        }
        case OpKind::Mul: {
            const Tensor &a = val(n.in[0]), &b = val(n.in[1]);
            DEEPM_REQUIRE(a.shape == b.shape, "mul shape mismatch ", a.shape.str(), " vs ", b.shape.str());
            n.value = a;
            for (size_t i = 0; i < b.v.size(); ++i) n.value.v[i] *= b.v[i];
            break;
        }
        case OpKind::Scale: {
            n.value = val(n.in[0]);
            for (double& x : n.value.v) x *= n.scalar;
            break;
        }
        case OpKind::AddBias: {
            const Tensor &x = val(n.in[0]), &b = val(n.in[1]);
            int64_t c = x.shape.dim[x.shape.ndim - 1];
            DEEPM_REQUIRE(b.numel() == c, "add_bias bias len ", b.numel(), " != last axis ", c);
            n.value = x;
            int64_t rows = x.numel() / c;
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < c; ++j) n.value.v[static_cast<size_t>(r * c + j)] += b.v[static_cast<size_t>(j)];
            break;
        }
        case OpKind::MatMul: {
            const Tensor &A = val(n.in[0]), &B = val(n.in[1]);
            DEEPM_REQUIRE(A.shape.ndim >= 2 && B.shape.ndim >= 2, "matmul needs rank>=2 operands");
            int64_t ar = A.shape.dim[A.shape.ndim - 2], ac = A.shape.dim[A.shape.ndim - 1];
            int64_t br = B.shape.dim[B.shape.ndim - 2], bc = B.shape.dim[B.shape.ndim - 1];
            int64_t M = n.flag_a ? ac : ar, K = n.flag_a ? ar : ac;
            int64_t K2 = n.flag_b ? bc : br, Nc = n.flag_b ? br : bc;
            DEEPM_REQUIRE(K == K2, "matmul inner dims ", K, " vs ", K2, " for ", A.shape.str(),
                          (n.flag_a ? "^T" : ""), " x ", B.shape.str(), (n.flag_b ? "^T" : ""));
            int64_t batch = A.numel() / (ar * ac);
            bool shared_b = (B.shape.ndim == 2);
            if (!shared_b) {
                DEEPM_REQUIRE(B.numel() / (br * bc) == batch, "matmul batch mismatch ",
                              A.shape.str(), " vs ", B.shape.str());
            }
            Shape out = A.shape;
            out.dim[out.ndim - 2] = M;
            out.dim[out.ndim - 1] = Nc;
            n.value = Tensor(out);
            for (int64_t s = 0; s < batch; ++s) {
                CMap a(A.data() + s * ar * ac, ar, ac);
                CMap b(B.data() + (shared_b ? 0 : s * br * bc), br, bc);
                MMap c(n.value.data() + s * M * Nc, M, Nc);
                if (!n.flag_a && !n.flag_b)
                    c.noalias() = a * b;
                else if (!n.flag_a && n.flag_b)
                    c.noalias() = a * b.transpose();
                else if (n.flag_a && !n.flag_b)
                    c.noalias() = a.transpose() * b;
                else
                    c.noalias() = a.transpose() * b.transpose();
            }
            break;
        }
        case OpKind::Tanh: {
            n.value = val(n.in[0]);
            for (double& x : n.value.v) x = std::tanh(x);
            break;
        }
        case OpKind::Sigmoid: {
            n.value = val(n.in[0]);
            for (double& x : n.value.v) x = 1.0 / (1.0 + std::exp(-x));
            break;
        }
        case OpKind::SiLU: {
            n.value = val(n.in[0]);
            for (double& x : n.value.v) x = x / (1.0 + std::exp(-x));
            break;
        }
        case OpKind::Abs: {
            n.value = val(n.in[0]);
            for (double& x : n.value.v) x = std::abs(x);
            break;
        }
        case OpKind::Softmax: {
            const Tensor& x = val(n.in[0]);
            int64_t c = x.shape.dim[x.shape.ndim - 1];
            int64_t rows = x.numel() / c;
            bool has_mask = n.mask.numel() > 0;
            bool has_bias = n.bias.numel() > 0;
            if (has_mask)
                DEEPM_REQUIRE(x.numel() % n.mask.numel() == 0 && n.mask.numel() % c == 0,
                              "softmax mask not broadcastable: ", n.mask.shape.str(), " over ", x.shape.str());
            if (has_bias)
                DEEPM_REQUIRE(x.numel() % n.bias.numel() == 0 && n.bias.numel() % c == 0,
                              "softmax bias not broadcastable: ", n.bias.shape.str(), " over ", x.shape.str());
            n.value = Tensor(x.shape);
            for (int64_t r = 0; r < rows; ++r) {
                const double* xr = x.data() + r * c;
                double* yr = n.value.data() + r * c;
                const double* mr = has_mask ? n.mask.data() + (r * c) % n.mask.numel() : nullptr;
                const double* br = has_bias ? n.bias.data() + (r * c) % n.bias.numel() : nullptr;
                double mx = kNegInf;
                for (int64_t j = 0; j < c; ++j) {
                    if (mr && mr[j] == 0.0) continue;
                    double l = xr[j] + (br ? br[j] : 0.0);
                    if (std::isfinite(l) && l > mx) mx = l;
                }
                if (mx == kNegInf) {  // all keys masked: output defined as all-zero row
                    for (int64_t j = 0; j < c; ++j) yr[j] = 0.0;
                    continue;
                }
                double sum = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    if (mr && mr[j] == 0.0) {
                        yr[j] = 0.0;
                        continue;
                    }
                    double l = xr[j] + (br ? br[j] : 0.0);
                    yr[j] = std::isfinite(l) ? std::exp(l - mx) : 0.0;
                    sum += yr[j];
                }
                for (int64_t j = 0; j < c; ++j) yr[j] /= sum;
            }
            break;
        }
        case OpKind::LayerNorm: {
            const Tensor &x = val(n.in[0]), &g = val(n.in[1]), &b = val(n.in[2]);
            int64_t c = x.shape.dim[x.shape.ndim - 1];
            DEEPM_REQUIRE(g.numel() == c && b.numel() == c, "layer_norm affine dims != ", c);
            int64_t rows = x.numel() / c;
            n.value = Tensor(x.shape);
            for (int64_t r = 0; r < rows; ++r) {
                const double* xr = x.data() + r * c;
                double* yr = n.value.data() + r * c;
                double mean = 0.0;
                for (int64_t j = 0; j < c; ++j) mean += xr[j];
                mean /= static_cast<double>(c);
                double var = 0.0;
                for (int64_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                var /= static_cast<double>(c);
                double inv = 1.0 / std::sqrt(var + n.eps);
                for (int64_t j = 0; j < c; ++j) yr[j] = (xr[j] - mean) * inv * g.v[static_cast<size_t>(j)] + b.v[static_cast<size_t>(j)];
            }
            break;
        }
        case OpKind::Dropout: {
            const Tensor& x = val(n.in[0]);
            DEEPM_REQUIRE(static_cast<int64_t>(n.keys.size()) == x.shape.dim[0],
                          "dropout needs one key per axis-0 slice");
            n.value = x;
            double keep = 1.0 - n.rate;
            int64_t per = x.numel() / x.shape.dim[0];
            for (int64_t s = 0; s < x.shape.dim[0]; ++s)
                for (int64_t e = 0; e < per; ++e) {
                    double u = hash_uniform(dropout_key(n.keys[static_cast<size_t>(s)], n.lane, static_cast<uint64_t>(e)));
                    n.value.v[static_cast<size_t>(s * per + e)] =
                        (u < keep) ? n.value.v[static_cast<size_t>(s * per + e)] / keep : 0.0;
                }
            break;
        }
        case OpKind::Concat: {
            const Tensor& first = val(n.in[0]);
            Shape out = first.shape;
            int64_t total = 0;
            for (NodeId id : n.in) {
                const Tensor& t = val(id);
                DEEPM_REQUIRE(t.shape.ndim == first.shape.ndim, "concat rank mismatch");
                for (int i = 0; i < out.ndim; ++i)
                    if (i != n.axis)
                        DEEPM_REQUIRE(t.shape.dim[i] == out.dim[i], "concat dim mismatch on axis ", i);
                total += t.shape.dim[n.axis];
            }
            out.dim[n.axis] = total;
            n.value = Tensor(out);
            AxisView ov = axis_view(out, n.axis);
            int64_t off = 0;
            for (NodeId id : n.in) {
                const Tensor& t = val(id);
                AxisView tv = axis_view(t.shape, n.axis);
                for (int64_t o = 0; o < tv.outer; ++o)
                    std::memcpy(n.value.data() + (o * ov.n + off) * ov.inner,
                                t.data() + o * tv.n * tv.inner,
                                static_cast<size_t>(tv.n * tv.inner) * sizeof(double));
                off += tv.n;
            }
            break;
        }
        case OpKind::Slice: {
            const Tensor& x = val(n.in[0]);
            AxisView xv = axis_view(x.shape, n.axis);
            DEEPM_REQUIRE(n.start >= 0 && n.start + n.len <= xv.n, "slice [", n.start, ",",
                          n.start + n.len, ") out of range ", xv.n);
            Shape out = x.shape;
            out.dim[n.axis] = n.len;
            n.value = Tensor(out);
            for (int64_t o = 0; o < xv.outer; ++o)
                std::memcpy(n.value.data() + o * n.len * xv.inner,
                            x.data() + (o * xv.n + n.start) * xv.inner,
                            static_cast<size_t>(n.len * xv.inner) * sizeof(double));
            break;
        }
        case OpKind::ReduceSum:
        case OpKind::ReduceMean: {
            const Tensor& x = val(n.in[0]);
            AxisView xv = axis_view(x.shape, n.axis);
            Shape out = x.shape;
            if (n.flag_a) {
                out.dim[n.axis] = 1;
            } else {
                Shape squeezed;
                squeezed.ndim = x.shape.ndim - 1;
                int k = 0;
                for (int i = 0; i < x.shape.ndim; ++i)
                    if (i != n.axis) squeezed.dim[k++] = x.shape.dim[i];
                if (squeezed.ndim == 0) {
                    squeezed.ndim = 1;
                    squeezed.dim[0] = 1;
                }
                out = squeezed;
            }
            n.value = Tensor(out);
            double inv = (n.kind == OpKind::ReduceMean) ? 1.0 / static_cast<double>(xv.n) : 1.0;
            for (int64_t o = 0; o < xv.outer; ++o)
                for (int64_t i = 0; i < xv.inner; ++i) {
                    double s = 0.0;
                    for (int64_t j = 0; j < xv.n; ++j) s += x.v[static_cast<size_t>((o * xv.n + j) * xv.inner + i)];
                    n.value.v[static_cast<size_t>(o * xv.inner + i)] = s * inv;
                }
            break;
        }
        case OpKind::ReduceAll: {
            const Tensor& x = val(n.in[0]);
            double s = 0.0;
            for (double xv : x.v) s += xv;
            n.value = Tensor::scalar(s);
            break;
        }
        case OpKind::Permute: {
            const Tensor& x = val(n.in[0]);
            int nd = x.shape.ndim;
            Shape out;
            out.ndim = nd;
            for (int i = 0; i < nd; ++i) out.dim[i] = x.shape.dim[n.perm[static_cast<size_t>(i)]];
            n.value = Tensor(out);
            std::array<int64_t, 4> xstride{1, 1, 1, 1};
            for (int i = nd - 2; i >= 0; --i) xstride[static_cast<size_t>(i)] = xstride[static_cast<size_t>(i + 1)] * x.shape.dim[i + 1];
            std::array<int64_t, 4> idx{0, 0, 0, 0};
            int64_t total = out.numel();
            for (int64_t f = 0; f < total; ++f) {
                int64_t rem = f;
                for (int i = nd - 1; i >= 0; --i) {
                    idx[static_cast<size_t>(i)] = rem % out.dim[i];
                    rem /= out.dim[i];
                }
                int64_t src = 0;
                for (int i = 0; i < nd; ++i) src += idx[static_cast<size_t>(i)] * xstride[static_cast<size_t>(n.perm[static_cast<size_t>(i)])];
                n.value.v[static_cast<size_t>(f)] = x.v[static_cast<size_t>(src)];
            }
            break;
        }
        case OpKind::Reshape: {
            const Tensor& x = val(n.in[0]);
            DEEPM_REQUIRE(n.in_shape.numel() == x.numel(), "reshape numel ", x.numel(), " -> ",
                          n.in_shape.str());
            n.value = x;
            n.value.shape = n.in_shape;
            break;
        }
        case OpKind::TimeShift: {
            const Tensor& x = val(n.in[0]);
            AxisView xv = axis_view(x.shape, n.axis);
            n.value = Tensor(x.shape);
            for (int64_t o = 0; o < xv.outer; ++o)
                for (int64_t t = 1; t < xv.n; ++t)
                    std::memcpy(n.value.data() + (o * xv.n + t) * xv.inner,
                                x.data() + (o * xv.n + t - 1) * xv.inner,
                                static_cast<size_t>(xv.inner) * sizeof(double));
            break;
        }
        case OpKind::Broadcast: {
            const Tensor& x = val(n.in[0]);
            DEEPM_REQUIRE(x.shape.dim[n.axis] == 1, "broadcast axis ", n.axis, " not singleton");
            AxisView xv = axis_view(x.shape, n.axis);
            Shape out = x.shape;
            out.dim[n.axis] = n.len;
            n.value = Tensor(out);
            for (int64_t o = 0; o < xv.outer; ++o)
                for (int64_t t = 0; t < n.len; ++t)
                    std::memcpy(n.value.data() + (o * n.len + t) * xv.inner,
                                x.data() + o * xv.inner, static_cast<size_t>(xv.inner) * sizeof(double));
            break;
        }
    }
}

#define DEEPM_UNARY(fn_name, kind_name)                 \
    NodeId Tape::fn_name(NodeId x) {                    \
        Node n;                                         \
        n.kind = OpKind::kind_name;                     \
        n.in = {x};                                     \
        forward_eval(n);                                \
        return push(std::move(n));                      \
    }

DEEPM_UNARY(tanh_, Tanh)
DEEPM_UNARY(sigmoid_, Sigmoid)
DEEPM_UNARY(silu, SiLU)
DEEPM_UNARY(abs_, Abs)
#undef DEEPM_UNARY

NodeId Tape::add(NodeId a, NodeId b) {
    Node n;
    n.kind = OpKind::Add;
    n.in = {a, b};
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::sub(NodeId a, NodeId b) {
    Node n;
    n.kind = OpKind::Sub;
    n.in = {a, b};
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::mul(NodeId a, NodeId b) {
    Node n;
    n.kind = OpKind::Mul;
    n.in = {a, b};
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::scale(NodeId a, double c) {
    Node n;
    n.kind = OpKind::Scale;
    n.in = {a};
    n.scalar = c;
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::add_bias(NodeId x, NodeId bias) {
    Node n;
    n.kind = OpKind::AddBias;
    n.in = {x, bias};
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::matmul(NodeId a, NodeId b, bool ta, bool tb) {
    Node n;
    n.kind = OpKind::MatMul;
    n.in = {a, b};
    n.flag_a = ta;
    n.flag_b = tb;
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::softmax_masked(NodeId logits, Tensor valid_mask, Tensor add_bias) {
    Node n;
    n.kind = OpKind::Softmax;
    n.in = {logits};
    n.mask = std::move(valid_mask);
    n.bias = std::move(add_bias);
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
    Node n;
    n.kind = OpKind::LayerNorm;
    n.in = {x, gain, bias};
    n.eps = eps;
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::dropout(NodeId x, double rate, uint64_t lane, std::vector<uint64_t> sample_keys) {
    DEEPM_REQUIRE(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0,1), got ", rate);
    Node n;
    n.kind = OpKind::Dropout;
    n.in = {x};
    n.rate = rate;
    n.lane = lane;
    n.keys = std::move(sample_keys);
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::concat(const std::vector<NodeId>& xs, int axis) {
    DEEPM_REQUIRE(!xs.empty(), "concat of nothing");
    Node n;
    n.kind = OpKind::Concat;
    n.in = xs;
    n.axis = axis;
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::slice(NodeId x, int axis, int64_t start, int64_t len) {
    Node n;
    n.kind = OpKind::Slice;
    n.in = {x};
    n.axis = axis;
    n.start = start;
    n.len = len;
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::reduce_sum(NodeId x, int axis, bool keepdim) {
    Node n;
    n.kind = OpKind::ReduceSum;
    n.in = {x};
    n.axis = axis;
    n.flag_a = keepdim;
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::reduce_mean(NodeId x, int axis, bool keepdim) {
    Node n;
    n.kind = OpKind::ReduceMean;
    n.in = {x};
    n.axis = axis;
    n.flag_a = keepdim;
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::reduce_sum_all(NodeId x) {
    Node n;
    n.kind = OpKind::ReduceAll;
    n.in = {x};
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::permute(NodeId x, std::array<int, 4> perm) {
    Node n;
    n.kind = OpKind::Permute;
    n.in = {x};
    n.perm = perm;
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::reshape(NodeId x, Shape s) {
    Node n;
    n.kind = OpKind::Reshape;
    n.in = {x};
    n.in_shape = s;
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::time_shift(NodeId x, int axis) {
    Node n;
    n.kind = OpKind::TimeShift;
    n.in = {x};
    n.axis = axis;
    forward_eval(n);
    return push(std::move(n));
}
NodeId Tape::broadcast(NodeId x, int axis, int64_t len) {
    Node n;
    n.kind = OpKind::Broadcast;
    n.in = {x};
    n.axis = axis;
    n.len = len;
    forward_eval(n);
    return push(std::move(n));
}

Tensor& Tape::adj_of(NodeId id, std::vector<Tensor>& adj, std::vector<char>& has) {
    size_t i = static_cast<size_t>(id);
    if (!has[i]) {
        adj[i] = Tensor(nodes_[i].value.shape, 0.0);
        has[i] = 1;
    }
    return adj[i];
}

void Tape::backward_node(size_t i, std::vector<Tensor>& adj, std::vector<char>& has) {
    Node& n = nodes_[i];
    const Tensor& dy = adj[i];
    auto val = [&](NodeId id) -> const Tensor& { return nodes_[static_cast<size_t>(id)].value; };

    switch (n.kind) {
        case OpKind::Input:
            break;
        case OpKind::Param: {
            Tensor& g = n.store->params[static_cast<size_t>(n.param_id)].grad;
            for (size_t k = 0; k < dy.v.size(); ++k) g.v[k] += dy.v[k];
            break;
        }
        case OpKind::Add: {
            for (int s = 0; s < 2; ++s) {
                Tensor& d = adj_of(n.in[static_cast<size_t>(s)], adj, has);
                for (size_t k = 0; k < dy.v.size(); ++k) d.v[k] += dy.v[k];
            }
            break;
        }
        case OpKind::Sub: {
            Tensor& da = adj_of(n.in[0], adj, has);
            Tensor& db = adj_of(n.in[1], adj, has);
            for (size_t k = 0; k < dy.v.size(); ++k) {
                da.v[k] += dy.v[k];
                db.v[k] -= dy.v[k];
            }
            break;
        }
        case OpKind::Mul: {
            const Tensor &a = val(n.in[0]), &b = val(n.in[1]);
            Tensor& da = adj_of(n.in[0], adj, has);
            Tensor& db = adj_of(n.in[1], adj, has);
            for (size_t k = 0; k < dy.v.size(); ++k) {
                da.v[k] += dy.v[k] * b.v[k];
                db.v[k] += dy.v[k] * a.v[k];
            }
            break;
        }
        case OpKind::Scale: {
            Tensor& da = adj_of(n.in[0], adj, has);
            for (size_t k = 0; k < dy.v.size(); ++k) da.v[k] += dy.v[k] * n.scalar;
            break;
        }
        case OpKind::AddBias: {
            Tensor& dx = adj_of(n.in[0], adj, has);
            Tensor& db = adj_of(n.in[1], adj, has);
            int64_t c = n.value.shape.dim[n.value.shape.ndim - 1];
            int64_t rows = n.value.numel() / c;
            for (size_t k = 0; k < dy.v.size(); ++k) dx.v[k] += dy.v[k];
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < c; ++j) db.v[static_cast<size_t>(j)] += dy.v[static_cast<size_t>(r * c + j)];
            break;
        }
        case OpKind::MatMul: {
            const Tensor &A = val(n.in[0]), &B = val(n.in[1]);
            int64_t ar = A.shape.dim[A.shape.ndim - 2], ac = A.shape.dim[A.shape.ndim - 1];
            int64_t br = B.shape.dim[B.shape.ndim - 2], bc = B.shape.dim[B.shape.ndim - 1];
            int64_t M = n.flag_a ? ac : ar, Nc = n.flag_b ? br : bc;
            int64_t batch = A.numel() / (ar * ac);
            bool shared_b = (B.shape.ndim == 2);
            Tensor& dA = adj_of(n.in[0], adj, has);
            Tensor& dB = adj_of(n.in[1], adj, has);
            for (int64_t s = 0; s < batch; ++s) {
                CMap a(A.data() + s * ar * ac, ar, ac);
                CMap b(B.data() + (shared_b ? 0 : s * br * bc), br, bc);
                CMap dc(dy.data() + s * M * Nc, M, Nc);
                MMap da(dA.data() + s * ar * ac, ar, ac);
                MMap db(dB.data() + (shared_b ? 0 : s * br * bc), br, bc);
                if (!n.flag_a) {
                    if (!n.flag_b)
                        da.noalias() += dc * b.transpose();
                    else
                        da.noalias() += dc * b;
                } else {
                    if (!n.flag_b)
                        da.noalias() += b * dc.transpose();
                    else
                        da.noalias() += b.transpose() * dc.transpose();
                }
                if (!n.flag_b) {
                    if (!n.flag_a)
                        db.noalias() += a.transpose() * dc;
                    else
                        db.noalias() += a * dc;
                } else {
                    if (!n.flag_a)
                        db.noalias() += dc.transpose() * a;
                    else
                        db.noalias() += dc.transpose() * a.transpose();
                }
            }
            break;
        }
        case OpKind::Tanh: {
            Tensor& dx = adj_of(n.in[0], adj, has);
            for (size_t k = 0; k < dy.v.size(); ++k) dx.v[k] += dy.v[k] * (1.0 - n.value.v[k] * n.value.v[k]);
            break;
        }
        case OpKind::Sigmoid: {
            Tensor& dx = adj_of(n.in[0], adj, has);
            for (size_t k = 0; k < dy.v.size(); ++k) dx.v[k] += dy.v[k] * n.value.v[k] * (1.0 - n.value.v[k]);
            break;
        }
        case OpKind::SiLU: {
            const Tensor& x = val(n.in[0]);
            Tensor& dx = adj_of(n.in[0], adj, has);
            for (size_t k = 0; k < dy.v.size(); ++k) {
                double s = 1.0 / (1.0 + std::exp(-x.v[k]));
                dx.v[k] += dy.v[k] * (s + x.v[k] * s * (1.0 - s));
            }
            break;
        }
        case OpKind::Abs: {
            const Tensor& x = val(n.in[0]);
            Tensor& dx = adj_of(n.in[0], adj, has);
            for (size_t k = 0; k < dy.v.size(); ++k) {
                double sgn = (x.v[k] > 0.0) ? 1.0 : (x.v[k] < 0.0 ? -1.0 : 0.0);
                dx.v[k] += dy.v[k] * sgn;
            }
            break;
        }
        case OpKind::Softmax: {
            Tensor& dx = adj_of(n.in[0], adj, has);
            int64_t c = n.value.shape.dim[n.value.shape.ndim - 1];
            int64_t rows = n.value.numel() / c;
            for (int64_t r = 0; r < rows; ++r) {
                const double* p = n.value.data() + r * c;
                const double* dyr = dy.data() + r * c;
                double* dxr = dx.data() + r * c;
                double dot = 0.0;
                for (int64_t j = 0; j < c; ++j) dot += p[j] * dyr[j];
                for (int64_t j = 0; j < c; ++j) dxr[j] += p[j] * (dyr[j] - dot);
            }
            break;
        }
        case OpKind::LayerNorm: {
            const Tensor &x = val(n.in[0]), &g = val(n.in[1]);
            Tensor& dx = adj_of(n.in[0], adj, has);
            Tensor& dg = adj_of(n.in[1], adj, has);
            Tensor& db = adj_of(n.in[2], adj, has);
            int64_t c = x.shape.dim[x.shape.ndim - 1];
            int64_t rows = x.numel() / c;
            std::vector<double> xhat(static_cast<size_t>(c));
            for (int64_t r = 0; r < rows; ++r) {
                const double* xr = x.data() + r * c;
                const double* dyr = dy.data() + r * c;
                double* dxr = dx.data() + r * c;
                double mean = 0.0;
                for (int64_t j = 0; j < c; ++j) mean += xr[j];
                mean /= static_cast<double>(c);
                double var = 0.0;
                for (int64_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                var /= static_cast<double>(c);
                double inv = 1.0 / std::sqrt(var + n.eps);
                double m1 = 0.0, m2 = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    xhat[static_cast<size_t>(j)] = (xr[j] - mean) * inv;
                    double dh = dyr[j] * g.v[static_cast<size_t>(j)];
                    m1 += dh;
                    m2 += dh * xhat[static_cast<size_t>(j)];
                    dg.v[static_cast<size_t>(j)] += dyr[j] * xhat[static_cast<size_t>(j)];
                    db.v[static_cast<size_t>(j)] += dyr[j];
                }
                m1 /= static_cast<double>(c);
                m2 /= static_cast<double>(c);
                for (int64_t j = 0; j < c; ++j) {
                    double dh = dyr[j] * g.v[static_cast<size_t>(j)];
                    dxr[j] += inv * (dh - m1 - xhat[static_cast<size_t>(j)] * m2);
                }
            }
            break;
        }
        case OpKind::Dropout: {
            Tensor& dx = adj_of(n.in[0], adj, has);
            double keep = 1.0 - n.rate;
            int64_t per = n.value.numel() / n.value.shape.dim[0];
            for (int64_t s = 0; s < n.value.shape.dim[0]; ++s)
                for (int64_t e = 0; e < per; ++e) {
                    double u = hash_uniform(dropout_key(n.keys[static_cast<size_t>(s)], n.lane, static_cast<uint64_t>(e)));
                    if (u < keep) dx.v[static_cast<size_t>(s * per + e)] += dy.v[static_cast<size_t>(s * per + e)] / keep;
                }
            break;
        }
        case OpKind::Concat: {
            AxisView ov = axis_view(n.value.shape, n.axis);
            int64_t off = 0;
            for (NodeId id : n.in) {
                const Tensor& t = val(id);
                Tensor& dt = adj_of(id, adj, has);
                AxisView tv = axis_view(t.shape, n.axis);
                for (int64_t o = 0; o < tv.outer; ++o) {
                    const double* src = dy.data() + (o * ov.n + off) * ov.inner;
                    double* dst = dt.data() + o * tv.n * tv.inner;
                    for (int64_t k = 0; k < tv.n * tv.inner; ++k) dst[k] += src[k];
                }
                off += tv.n;
            }
            break;
        }
        case OpKind::Slice: {
            const Tensor& x = val(n.in[0]);
            Tensor& dx = adj_of(n.in[0], adj, has);
            AxisView xv = axis_view(x.shape, n.axis);
            for (int64_t o = 0; o < xv.outer; ++o) {
                const double* src = dy.data() + o * n.len * xv.inner;
                double* dst = dx.data() + (o * xv.n + n.start) * xv.inner;
                for (int64_t k = 0; k < n.len * xv.inner; ++k) dst[k] += src[k];
            }
            break;
        }
        case OpKind::ReduceSum:
        case OpKind::ReduceMean: {
            const Tensor& x = val(n.in[0]);
            Tensor& dx = adj_of(n.in[0], adj, has);
            AxisView xv = axis_view(x.shape, n.axis);
            double inv = (n.kind == OpKind::ReduceMean) ? 1.0 / static_cast<double>(xv.n) : 1.0;
            for (int64_t o = 0; o < xv.outer; ++o)
                for (int64_t j = 0; j < xv.n; ++j)
                    for (int64_t i = 0; i < xv.inner; ++i)
                        dx.v[static_cast<size_t>((o * xv.n + j) * xv.inner + i)] +=
                            dy.v[static_cast<size_t>(o * xv.inner + i)] * inv;
            break;
        }
        case OpKind::ReduceAll: {
            Tensor& dx = adj_of(n.in[0], adj, has);
            for (double& d : dx.v) d += dy.v[0];
            break;
        }
        case OpKind::Permute: {
            const Tensor& x = val(n.in[0]);
            Tensor& dx = adj_of(n.in[0], adj, has);
            int nd = x.shape.ndim;
            std::array<int64_t, 4> xstride{1, 1, 1, 1};
            for (int i = nd - 2; i >= 0; --i) xstride[static_cast<size_t>(i)] = xstride[static_cast<size_t>(i + 1)] * x.shape.dim[i + 1];
            std::array<int64_t, 4> idx{0, 0, 0, 0};
            int64_t total = n.value.numel();
            for (int64_t f = 0; f < total; ++f) {
                int64_t rem = f;
                for (int i = nd - 1; i >= 0; --i) {
                    idx[static_cast<size_t>(i)] = rem % n.value.shape.dim[i];
                    rem /= n.value.shape.dim[i];
                }
                int64_t src = 0;
                for (int i = 0; i < nd; ++i) src += idx[static_cast<size_t>(i)] * xstride[static_cast<size_t>(n.perm[static_cast<size_t>(i)])];
                dx.v[static_cast<size_t>(src)] += dy.v[static_cast<size_t>(f)];
            }
            break;
        }
        case OpKind::Reshape: {
            Tensor& dx = adj_of(n.in[0], adj, has);
            for (size_t k = 0; k < dy.v.size(); ++k) dx.v[k] += dy.v[k];
            break;
        }
        case OpKind::TimeShift: {
            const Tensor& x = val(n.in[0]);
            Tensor& dx = adj_of(n.in[0], adj, has);
            AxisView xv = axis_view(x.shape, n.axis);
            for (int64_t o = 0; o < xv.outer; ++o)
                for (int64_t t = 1; t < xv.n; ++t) {
                    const double* src = dy.data() + (o * xv.n + t) * xv.inner;
                    double* dst = dx.data() + (o * xv.n + t - 1) * xv.inner;
                    for (int64_t k = 0; k < xv.inner; ++k) dst[k] += src[k];
                }
            break;
        }
        case OpKind::Broadcast: {
            const Tensor& x = val(n.in[0]);
            Tensor& dx = adj_of(n.in[0], adj, has);
            AxisView xv = axis_view(x.shape, n.axis);
            for (int64_t o = 0; o < xv.outer; ++o)
                for (int64_t t = 0; t < n.len; ++t) {
                    const double* src = dy.data() + (o * n.len + t) * xv.inner;
                    double* dst = dx.data() + o * xv.inner;
                    for (int64_t k = 0; k < xv.inner; ++k) dst[k] += src[k];
                }
            break;
        }
    }
}

void Tape::backward(NodeId output, const Tensor& upstream) {
    DEEPM_REQUIRE(!nodes_.empty(), "backward called before any forward op was recorded");
    DEEPM_REQUIRE(output >= 0 && output < static_cast<NodeId>(nodes_.size()), "bad output node ", output);
    const Tensor& out = nodes_[static_cast<size_t>(output)].value;
    DEEPM_REQUIRE(upstream.shape == out.shape, "upstream shape ", upstream.shape.str(),
                  " != output shape ", out.shape.str());

    std::vector<Tensor> adj(nodes_.size());
    std::vector<char> has(nodes_.size(), 0);
    adj[static_cast<size_t>(output)] = upstream;
    has[static_cast<size_t>(output)] = 1;

    for (int64_t i = output; i >= 0; --i) {
        if (!has[static_cast<size_t>(i)]) continue;
        backward_node(static_cast<size_t>(i), adj, has);
        if (nodes_[static_cast<size_t>(i)].kind != OpKind::Input &&
            nodes_[static_cast<size_t>(i)].kind != OpKind::Param) {
            adj[static_cast<size_t>(i)] = Tensor{};  // release as soon as consumed
        }
    }
}

double Tape::replay_max_dev() {
    double worst = 0.0;
    for (auto& n : nodes_) {
        if (n.kind == OpKind::Input || n.kind == OpKind::Param) continue;
        Tensor cached = n.value;
        forward_eval(n);
        worst = std::max(worst, max_abs_diff(cached, n.value));
    }
    return worst;
}

GradCheckReport grad_check(const std::function<double(bool)>& fn, ParameterStore& store,
                           double step) {
    store.zero_grads();
    fn(true);
    std::vector<double> analytic = store.flat_grads();

    GradCheckReport rep;
    size_t flat = 0;
    for (auto& p : store.params) {
        for (size_t k = 0; k < p.value.v.size(); ++k, ++flat) {
            double keep = p.value.v[k];
            p.value.v[k] = keep + step;
            double fp = fn(false);
            p.value.v[k] = keep - step;
            double fm = fn(false);
            p.value.v[k] = keep;
            double num = (fp - fm) / (2.0 * step);
            double a = analytic[flat];
            double rel = std::abs(a - num) / std::max({1.0, std::abs(a), std::abs(num)});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = p.name;
                rep.worst_coord = static_cast<int64_t>(k);
                rep.analytic = a;
                rep.numeric = num;
            }
        }
    }
    return rep;
}

}  // namespace deepm::ad
