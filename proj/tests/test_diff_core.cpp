#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>

#include "deepm/tape.hpp"

using namespace deepm;
using namespace deepm::ad;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
    Tensor t(s);
    for (double& x : t.v) x = scale * rng.normal();
    return t;
}

// FD-checks d(sum(w .* op(params)))/d(params) for an arbitrary subgraph.
GradCheckReport check_graph(const std::function<NodeId(Tape&, std::vector<NodeId>&)>& build,
                            std::vector<Tensor> inits, uint64_t seed, double step = 1e-5) {
    ParameterStore store;
    for (size_t i = 0; i < inits.size(); ++i)
        store.add("p" + std::to_string(i), std::move(inits[i]));

    Tensor weights;  // fixed random weights make the scalar loss sensitive everywhere
    auto fn = [&](bool with_grad) {
        Tape tape(true);
        std::vector<NodeId> ps;
        for (int i = 0; i < static_cast<int>(store.size()); ++i) ps.push_back(tape.param(store, i));
        NodeId out = build(tape, ps);
        if (weights.numel() == 0) {
            Rng wr(seed ^ 0x77);
            weights = random_tensor(tape.value(out).shape, wr);
        }
        NodeId w = tape.input(weights);
        NodeId loss = tape.reduce_sum_all(tape.mul(out, w));
        if (with_grad) tape.backward(loss, Tensor::scalar(1.0));
        return tape.value(loss).v[0];
    };
    return grad_check(fn, store, step);
}

}  // namespace

TEST_CASE("tanh forward/backward at zero") {
    ParameterStore store;
    int pid = store.add("x", Tensor::scalar(0.0));
    Tape tape;
    NodeId y = tape.tanh_(tape.param(store, pid));
    CHECK(tape.value(y).v[0] == 0.0);
    tape.backward(y, Tensor::scalar(1.0));
    CHECK(store[0].grad.v[0] == 1.0);
}

TEST_CASE("masked softmax: masked probability exactly zero, zero gradient") {
    ParameterStore store;
    int pid = store.add("logits", Tensor::from(Shape{1, 3}, {2.0, 5.0, -1.0}));
    Tape tape;
    Tensor mask = Tensor::from(Shape{1, 3}, {1.0, 0.0, 1.0});
    NodeId p = tape.softmax_masked(tape.param(store, pid), mask);
    const Tensor& pv = tape.value(p);
    CHECK(pv.v[1] == 0.0);
    CHECK(pv.v[0] + pv.v[2] == doctest::Approx(1.0).epsilon(1e-15));
    Tensor up(Shape{1, 3}, 1.0);
    tape.backward(p, up);
    CHECK(store[0].grad.v[1] == 0.0);
}

TEST_CASE("softmax all-masked row produces zeros") {
    Tape tape;
    NodeId x = tape.input(Tensor::from(Shape{2, 2}, {1.0, 2.0, 3.0, 4.0}));
    Tensor mask = Tensor::from(Shape{2, 2}, {0.0, 0.0, 1.0, 1.0});
    NodeId p = tape.softmax_masked(x, mask);
    CHECK(tape.value(p).v[0] == 0.0);
    CHECK(tape.value(p).v[1] == 0.0);
    CHECK(tape.value(p).v[2] + tape.value(p).v[3] == doctest::Approx(1.0));
}

TEST_CASE("layer-norm of constant vector is zero before affine; gradient finite") {
    ParameterStore store;
    int pid = store.add("x", Tensor::from(Shape{1, 4}, {3.0, 3.0, 3.0, 3.0}));
    Tape tape;
    NodeId g = tape.input(Tensor::from(Shape{4}, {1.0, 1.0, 1.0, 1.0}));
    NodeId b = tape.input(Tensor(Shape{4}, 0.0));
    NodeId y = tape.layer_norm(tape.param(store, pid), g, b);
    for (double v : tape.value(y).v) CHECK(v == 0.0);
    Tensor up(Shape{1, 4}, 1.0);
    tape.backward(y, up);
    for (double gv : store[0].grad.v) CHECK(std::isfinite(gv));

    // FD agreement away from the degenerate point
    Rng rng(11);
    auto rep = check_graph(
        [](Tape& t, std::vector<NodeId>& ps) { return t.layer_norm(ps[0], ps[1], ps[2]); },
        {random_tensor(Shape{3, 5}, rng), random_tensor(Shape{5}, rng), random_tensor(Shape{5}, rng)},
        42);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("backward with zero upstream yields zero gradients") {
    ParameterStore store;
    Rng rng(5);
    int pid = store.add("x", random_tensor(Shape{2, 3}, rng));
    Tape tape;
    NodeId y = tape.tanh_(tape.param(store, pid));
    tape.backward(y, Tensor(Shape{2, 3}, 0.0));
    for (double g : store[0].grad.v) CHECK(g == 0.0);
}

TEST_CASE("linear function gradient exact to machine precision") {
    Rng rng(7);
    Tensor w = random_tensor(Shape{4, 3}, rng);
    ParameterStore store;
    int pid = store.add("x", random_tensor(Shape{2, 4}, rng));
    auto fn = [&](bool with_grad) {
        Tape tape;
        NodeId y = tape.matmul(tape.param(store, pid), tape.input(w));
        NodeId loss = tape.reduce_sum_all(y);
        if (with_grad) tape.backward(loss, Tensor::scalar(1.0));
        return tape.value(loss).v[0];
    };
    auto rep = grad_check(fn, store);
    CHECK(rep.max_rel_err < 1e-9);
}

TEST_CASE("composite MLP analytic gradient matches finite differences < 1e-6") {
    Rng rng(13);
    auto rep = check_graph(
        [](Tape& t, std::vector<NodeId>& ps) {
            NodeId h = t.tanh_(t.add_bias(t.matmul(ps[0], ps[1]), ps[2]));
            NodeId h2 = t.silu(t.add_bias(t.matmul(h, ps[3]), ps[4]));
            return t.sigmoid_(t.matmul(h2, ps[5]));
        },
        {random_tensor(Shape{4, 5}, rng), random_tensor(Shape{5, 6}, rng),
         random_tensor(Shape{6}, rng), random_tensor(Shape{6, 6}, rng),
         random_tensor(Shape{6}, rng), random_tensor(Shape{6, 2}, rng)},
        99);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("matmul transpose flags against naive loops") {
    Rng rng(17);
    Tensor A = random_tensor(Shape{3, 4}, rng);
    Tensor B = random_tensor(Shape{4, 5}, rng);
    Tape tape;
    NodeId a = tape.input(A), b = tape.input(B);

    auto naive = [&](bool ta, bool tb) {
        int64_t M = ta ? A.shape[1] : A.shape[0];
        int64_t K = ta ? A.shape[0] : A.shape[1];
        int64_t Nc = tb ? B.shape[0] : B.shape[1];
        Tensor C(Shape{M, Nc});
        for (int64_t i = 0; i < M; ++i)
            for (int64_t j = 0; j < Nc; ++j) {
                double s = 0;
                for (int64_t k = 0; k < K; ++k)
                    s += (ta ? A.at(k, i) : A.at(i, k)) * (tb ? B.at(j, k) : B.at(k, j));
                C.at(i, j) = s;
            }
        return C;
    };
    CHECK(max_abs_diff(tape.value(tape.matmul(a, b)), naive(false, false)) < 1e-12);
    Tensor Bt = random_tensor(Shape{5, 4}, rng);
    NodeId bt = tape.input(Bt);
    {
        Tensor ref(Shape{3, 5});
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < 5; ++j) {
                double s = 0;
                for (int64_t k = 0; k < 4; ++k) s += A.at(i, k) * Bt.at(j, k);
                ref.at(i, j) = s;
            }
        CHECK(max_abs_diff(tape.value(tape.matmul(a, bt, false, true)), ref) < 1e-12);
    }
    // all four flag combinations against FD
    for (int ta = 0; ta < 2; ++ta)
        for (int tb = 0; tb < 2; ++tb) {
            Rng r2(100 + ta * 2 + tb);
            Shape sa = ta ? Shape{4, 3} : Shape{3, 4};
            Shape sb = tb ? Shape{5, 4} : Shape{4, 5};
            auto rep = check_graph(
                [ta, tb](Tape& t, std::vector<NodeId>& ps) {
                    return t.matmul(ps[0], ps[1], ta != 0, tb != 0);
                },
                {random_tensor(sa, r2), random_tensor(sb, r2)}, 55 + static_cast<uint64_t>(ta * 2 + tb));
            CHECK(rep.max_rel_err < 1e-6);
        }
}

TEST_CASE("per-primitive FD checks") {
    Rng rng(23);
    auto check = [&](const char* what, auto build, std::vector<Tensor> inits) {
        auto rep = check_graph(build, std::move(inits), fnv1a(what));
        INFO(what, " worst=", rep.max_rel_err);
        CHECK(rep.max_rel_err < 1e-6);
    };
    check("add", [](Tape& t, std::vector<NodeId>& p) { return t.add(p[0], p[1]); },
          {random_tensor(Shape{2, 3, 4}, rng), random_tensor(Shape{2, 3, 4}, rng)});
    check("sub", [](Tape& t, std::vector<NodeId>& p) { return t.sub(p[0], p[1]); },
          {random_tensor(Shape{2, 3, 4}, rng), random_tensor(Shape{2, 3, 4}, rng)});
    check("mul", [](Tape& t, std::vector<NodeId>& p) { return t.mul(p[0], p[1]); },
          {random_tensor(Shape{2, 3, 4}, rng), random_tensor(Shape{2, 3, 4}, rng)});
    check("scale", [](Tape& t, std::vector<NodeId>& p) { return t.scale(p[0], -2.5); },
          {random_tensor(Shape{2, 3}, rng)});
    check("add_bias", [](Tape& t, std::vector<NodeId>& p) { return t.add_bias(p[0], p[1]); },
          {random_tensor(Shape{2, 3, 4}, rng), random_tensor(Shape{4}, rng)});
    check("tanh", [](Tape& t, std::vector<NodeId>& p) { return t.tanh_(p[0]); },
          {random_tensor(Shape{3, 4}, rng)});
    check("sigmoid", [](Tape& t, std::vector<NodeId>& p) { return t.sigmoid_(p[0]); },
          {random_tensor(Shape{3, 4}, rng)});
    check("silu", [](Tape& t, std::vector<NodeId>& p) { return t.silu(p[0]); },
          {random_tensor(Shape{3, 4}, rng)});
    // keep |x| well away from the kink so central differences are valid
    {
        Tensor t0 = random_tensor(Shape{3, 4}, rng);
        for (double& x : t0.v) x += (x >= 0 ? 1.0 : -1.0);
        check("abs", [](Tape& t, std::vector<NodeId>& p) { return t.abs_(p[0]); }, {t0});
    }
    check("softmax", [](Tape& t, std::vector<NodeId>& p) { return t.softmax_masked(p[0]); },
          {random_tensor(Shape{3, 5}, rng)});
    {
        Tensor mask(Shape{3, 5}, 1.0);
        mask.v[2] = 0.0;
        mask.v[8] = 0.0;
        check("softmax_masked",
              [mask](Tape& t, std::vector<NodeId>& p) { return t.softmax_masked(p[0], mask); },
              {random_tensor(Shape{3, 5}, rng)});
        Tensor bias(Shape{5}, 0.0);
        bias.v[1] = -1.5;
        bias.v[3] = 0.7;
        check("softmax_bias",
              [bias](Tape& t, std::vector<NodeId>& p) { return t.softmax_masked(p[0], Tensor{}, bias); },
              {random_tensor(Shape{3, 5}, rng)});
    }
    check("dropout",
          [](Tape& t, std::vector<NodeId>& p) {
              return t.dropout(p[0], 0.4, 3, std::vector<uint64_t>{10, 11});
          },
          {random_tensor(Shape{2, 3, 4}, rng)});
    check("concat",
          [](Tape& t, std::vector<NodeId>& p) { return t.concat({p[0], p[1]}, 1); },
          {random_tensor(Shape{2, 3, 4}, rng), random_tensor(Shape{2, 2, 4}, rng)});
    check("slice", [](Tape& t, std::vector<NodeId>& p) { return t.slice(p[0], 2, 1, 2); },
          {random_tensor(Shape{2, 3, 4}, rng)});
    check("reduce_sum", [](Tape& t, std::vector<NodeId>& p) { return t.reduce_sum(p[0], 1); },
          {random_tensor(Shape{2, 3, 4}, rng)});
    check("reduce_mean", [](Tape& t, std::vector<NodeId>& p) { return t.reduce_mean(p[0], 2, true); },
          {random_tensor(Shape{2, 3, 4}, rng)});
    check("permute",
          [](Tape& t, std::vector<NodeId>& p) { return t.permute(p[0], {2, 0, 1, 3}); },
          {random_tensor(Shape{2, 3, 4, 2}, rng)});
    check("reshape", [](Tape& t, std::vector<NodeId>& p) { return t.reshape(p[0], Shape{6, 4}); },
          {random_tensor(Shape{2, 3, 4}, rng)});
    check("time_shift", [](Tape& t, std::vector<NodeId>& p) { return t.time_shift(p[0], 1); },
          {random_tensor(Shape{2, 5, 3}, rng)});
    check("broadcast", [](Tape& t, std::vector<NodeId>& p) { return t.broadcast(p[0], 1, 4); },
          {random_tensor(Shape{2, 1, 3}, rng)});
}

TEST_CASE("property: 100 random composed graphs match finite differences") {
    for (uint64_t g = 0; g < 100; ++g) {
        Rng rng(1000 + g);
        const Shape s{2, 3, 4};
        int n_params = 2 + rng.uniform_int(2);
        std::vector<Tensor> inits;
        for (int i = 0; i < n_params; ++i) inits.push_back(random_tensor(s, rng, 0.7));
        inits.push_back(random_tensor(Shape{4, 4}, rng, 0.5));  // shared weight
        inits.push_back(random_tensor(Shape{4}, rng, 0.5));     // bias / affine
        inits.push_back(random_tensor(Shape{4}, rng, 0.2));
        int depth = 3 + rng.uniform_int(4);
        std::vector<int> ops;
        for (int d = 0; d < depth; ++d) ops.push_back(rng.uniform_int(11));
        uint64_t graph_seed = 5000 + g;

        auto rep = check_graph(
            [&, ops, n_params](Tape& t, std::vector<NodeId>& p) {
                std::vector<NodeId> pool(p.begin(), p.begin() + n_params);
                NodeId w = p[static_cast<size_t>(n_params)];
                NodeId b = p[static_cast<size_t>(n_params) + 1];
                NodeId g2 = p[static_cast<size_t>(n_params) + 2];
                Rng pick(graph_seed);
                NodeId cur = pool[0];
                for (int op : ops) {
                    NodeId other = pool[static_cast<size_t>(pick.uniform_int(static_cast<int>(pool.size())))];
                    switch (op) {
                        case 0: cur = t.add(cur, other); break;
                        case 1: cur = t.sub(cur, other); break;
                        case 2: cur = t.mul(cur, other); break;
                        case 3: cur = t.tanh_(cur); break;
                        case 4: cur = t.silu(cur); break;
                        case 5: cur = t.matmul(cur, w); break;
                        case 6: cur = t.softmax_masked(cur); break;
                        case 7: cur = t.layer_norm(cur, g2, b); break;
                        case 8: cur = t.add_bias(cur, b); break;
                        case 9: cur = t.time_shift(cur, 1); break;
                        case 10:
                            cur = t.dropout(cur, 0.3, static_cast<uint64_t>(op),
                                            std::vector<uint64_t>{graph_seed, graph_seed + 1});
                            break;
                    }
                    pool.push_back(cur);
                }
                return cur;
            },
            inits, graph_seed);
        INFO("graph ", g, " worst ", rep.max_rel_err, " at ", rep.worst_param);
        CHECK(rep.max_rel_err < 1e-6);
    }
}

TEST_CASE("linearity of injection to 1e-12") {
    Rng rng(31);
    ParameterStore store;
    store.add("w1", random_tensor(Shape{4, 5}, rng));
    store.add("w2", random_tensor(Shape{5, 3}, rng));
    Tensor x = random_tensor(Shape{2, 4}, rng);
    Tensor g1 = random_tensor(Shape{2, 3}, rng);
    Tensor g2 = random_tensor(Shape{2, 3}, rng);
    double a = 1.7, b = -0.4;

    auto run = [&](const Tensor& up) {
        store.zero_grads();
        Tape tape;
        NodeId y = tape.tanh_(tape.matmul(tape.tanh_(tape.matmul(tape.input(x), tape.param(store, 0))),
                                          tape.param(store, 1)));
        tape.backward(y, up);
        return store.flat_grads();
    };
    auto ga = run(g1);
    auto gb = run(g2);
    Tensor mix = g1;
    for (size_t i = 0; i < mix.v.size(); ++i) mix.v[i] = a * g1.v[i] + b * g2.v[i];
    auto gm = run(mix);
    for (size_t i = 0; i < gm.size(); ++i) CHECK(std::abs(gm[i] - (a * ga[i] + b * gb[i])) < 1e-12);
}

TEST_CASE("gradient accumulation across backward calls sums") {
    ParameterStore store;
    store.add("x", Tensor::scalar(0.3));
    Tape tape;
    NodeId y = tape.tanh_(tape.param(store, 0));
    tape.backward(y, Tensor::scalar(1.0));
    double g1 = store[0].grad.v[0];
    tape.backward(y, Tensor::scalar(1.0));
    CHECK(store[0].grad.v[0] == doctest::Approx(2.0 * g1).epsilon(1e-15));
}

TEST_CASE("dropout determinism: fixed seed bit-identical, differing seed flagged") {
    Rng rng(41);
    Tensor x = random_tensor(Shape{2, 6}, rng);
    auto eval = [&](uint64_t key) {
        Tape tape;
        NodeId y = tape.dropout(tape.input(x), 0.5, 7, std::vector<uint64_t>{key, key + 1});
        return tape.value(y);
    };
    CHECK(bitwise_equal(eval(123), eval(123)));
    CHECK(!bitwise_equal(eval(123), eval(321)));
}

TEST_CASE("replay of the tape reproduces forward values bit-identically") {
    Rng rng(43);
    ParameterStore store;
    store.add("w", random_tensor(Shape{4, 4}, rng));
    Tape tape;
    NodeId x = tape.input(random_tensor(Shape{3, 4}, rng));
    NodeId h = tape.silu(tape.matmul(x, tape.param(store, 0)));
    NodeId d = tape.dropout(h, 0.25, 1, std::vector<uint64_t>{1, 2, 3});
    tape.softmax_masked(d);
    CHECK(tape.replay_max_dev() == 0.0);
}

TEST_CASE("errors: backward before forward, shape mismatch names the op") {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(0, Tensor::scalar(1.0)), Error);
    Tape t2;
    NodeId a = t2.input(Tensor(Shape{2, 3}, 1.0));
    NodeId b = t2.input(Tensor(Shape{3, 2}, 1.0));
    try {
        t2.add(a, b);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("add") != std::string::npos);
    }
    try {
        t2.matmul(a, a);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    }
}
