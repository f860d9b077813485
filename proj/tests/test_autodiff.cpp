#include "doctest.h"

#include <cmath>
#include <vector>

#include "factlab/graph.hpp"
#include "factlab/rng.hpp"
#include "gradcheck.hpp"

using namespace factlab;
using testing::gradcheck;
using testing::ScalarFn;

namespace {

template <typename T>
Tensor<T> rand_tensor(Shape shape, double lo, double hi, uint64_t seed) {
    Tensor<T> t(std::move(shape));
    Rng rng(seed);
    for (auto& v : t.data) v = T(rng.uniform(lo, hi));
    return t;
}

// reduce an arbitrary-shape node to a scalar through fixed random weights so
// every output coordinate influences the checked function
template <typename T>
typename Graph<T>::Id weighted_sum(Graph<T>& g, typename Graph<T>::Id x, uint64_t wseed) {
    Tensor<T> w(g.val(x).shape);
    Rng rng(wseed);
    for (auto& v : w.data) v = T(rng.uniform(0.5, 1.5));
    return g.reduce_sum(g.mul(x, g.constant(w)));
}

// runs a gradcheck over several randomized instances for both precisions,
// FD reference evaluated through the double replica of the same builder
#define CHECK_GRADS_BOTH(make_fn, make_inputs)                                              \
    do {                                                                                    \
        for (uint64_t inst = 0; inst < 8; ++inst) {                                         \
            {                                                                               \
                auto r = gradcheck<float>(make_fn<float>(inst), make_fn<double>(inst),      \
                                          make_inputs<float>(inst), 1e-4, 1e-3, 900 + inst); \
                CAPTURE(inst);                                                              \
                CHECK_MESSAGE(r.ok, "float rel err ", r.max_rel_err);                       \
            }                                                                               \
            {                                                                               \
                auto r = gradcheck<double>(make_fn<double>(inst), make_fn<double>(inst),    \
                                           make_inputs<double>(inst), 1e-4, 1e-7, 900 + inst); \
                CAPTURE(inst);                                                              \
                CHECK_MESSAGE(r.ok, "double rel err ", r.max_rel_err);                      \
            }                                                                               \
        }                                                                                   \
    } while (0)

} // namespace

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("square function value and gradient") {
    Graph<double> g;
    auto x = g.leaf(Tensor<double>::scalar(3.0), true);
    auto y = g.mul(x, x);
    auto [v, grads] = eval_with_gradients(g, y, {x});
    CHECK(v == doctest::Approx(9.0));
    CHECK(grads[0][0] == doctest::Approx(6.0));
}

TEST_CASE("softmax cross-entropy of uniform logits is log(n_classes)") {
    Graph<double> g;
    auto z = g.leaf(Tensor<double>({1, 4}), true); // zeros = uniform
    auto logp = g.log_softmax(z);
    auto picked = g.gather_last(logp, {2}, 1);
    auto loss = g.scale(g.reduce_sum(picked), -1.0);
    g.backward(loss);
    CHECK(g.val(loss)[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("softmax values, temperature, and row normalization") {
    Graph<double> g;
    auto z = g.constant(Tensor<double>({2, 2}, {0.0, 0.0, 1.0, 0.0}));
    auto y1 = g.softmax(z, 1.0);
    CHECK(g.val(y1)[0] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(g.val(y1)[1] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(g.val(y1)[2] == doctest::Approx(0.731059).epsilon(1e-6));
    CHECK(g.val(y1)[3] == doctest::Approx(0.268941).epsilon(1e-6));
    auto y2 = g.softmax(z, 0.5);
    CHECK(g.val(y2)[2] == doctest::Approx(0.880797).epsilon(1e-6));
    CHECK(g.val(y2)[3] == doctest::Approx(0.119203).epsilon(1e-6));

    CHECK_THROWS_AS((void)g.softmax(z, 0.0), std::invalid_argument);
    CHECK_THROWS_AS((void)g.softmax(z, -1.0), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        Graph<double> g;
        Tensor<double> z({3, 5});
        for (auto& v : z.data) v = rng.uniform(-8.0, 8.0);
        Tensor<double> shifted = z;
        const double c = rng.uniform(-100.0, 100.0);
        for (int64_t r = 0; r < 3; ++r)
            for (int64_t k = 0; k < 5; ++k) shifted[r * 5 + k] += c;
        auto a = g.softmax(g.constant(z), 1.3);
        auto b = g.softmax(g.constant(shifted), 1.3);
        for (int64_t r = 0; r < 3; ++r) {
            double sum = 0;
            for (int64_t k = 0; k < 5; ++k) sum += g.val(a)[r * 5 + k];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
        for (int64_t i = 0; i < 15; ++i)
            CHECK(g.val(a)[i] == doctest::Approx(g.val(b)[i]).epsilon(1e-9));
    }
}

TEST_CASE("non-finite forward values are an error state") {
    Graph<float> g;
    auto x = g.leaf(Tensor<float>({2}, {100.0f, 0.0f}), false);
    CHECK_THROWS_AS((void)g.exp_op(x), std::runtime_error); // exp(100) overflows float
    Graph<float> g2;
    auto z = g2.leaf(Tensor<float>({2}, {-1.0f, 1.0f}), false);
    CHECK_THROWS_AS((void)g2.log_op(z), std::runtime_error); // log of a negative
}

TEST_CASE("backward requires a scalar target and runs once") {
    Graph<double> g;
    auto x = g.leaf(rand_tensor<double>({2, 3}, -1, 1, 5), true);
    auto y = g.scale(x, 2.0);
    CHECK_THROWS_AS(g.backward(y), std::invalid_argument);
    auto s = g.reduce_sum(y);
    g.backward(s);
    CHECK_THROWS_AS(g.backward(s), std::logic_error);
    for (int64_t i = 0; i < 6; ++i) CHECK(g.grad(x)[i] == doctest::Approx(2.0));
}

// ---- per-primitive gradient checks ----

template <typename T>
ScalarFn<T> fn_add_same(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto a = g.leaf(in[0], go != nullptr);
        auto b = g.leaf(in[1], go != nullptr);
        auto s = weighted_sum(g, g.add(a, b), 50 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(a), g.grad(b)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_two_same(uint64_t inst) {
    return {rand_tensor<T>({3, 4}, -1.5, 1.5, 10 + inst), rand_tensor<T>({3, 4}, -1.5, 1.5, 20 + inst)};
}
TEST_CASE("grad: add (same shape)") { CHECK_GRADS_BOTH(fn_add_same, in_two_same); }

template <typename T>
ScalarFn<T> fn_add_bias(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto a = g.leaf(in[0], go != nullptr);
        auto b = g.leaf(in[1], go != nullptr);
        auto s = weighted_sum(g, g.add(a, b), 51 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(a), g.grad(b)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_mat_bias(uint64_t inst) {
    return {rand_tensor<T>({5, 3}, -1.5, 1.5, 11 + inst), rand_tensor<T>({3}, -1.5, 1.5, 21 + inst)};
}
TEST_CASE("grad: add (trailing-vector bias broadcast)") { CHECK_GRADS_BOTH(fn_add_bias, in_mat_bias); }

template <typename T>
ScalarFn<T> fn_sub(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto a = g.leaf(in[0], go != nullptr);
        auto b = g.leaf(in[1], go != nullptr);
        auto s = weighted_sum(g, g.sub(a, b), 52 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(a), g.grad(b)};
        }
        return g.val(s)[0];
    };
}
TEST_CASE("grad: sub") { CHECK_GRADS_BOTH(fn_sub, in_two_same); }

template <typename T>
ScalarFn<T> fn_mul(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto a = g.leaf(in[0], go != nullptr);
        auto b = g.leaf(in[1], go != nullptr);
        auto s = weighted_sum(g, g.mul(a, b), 53 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(a), g.grad(b)};
        }
        return g.val(s)[0];
    };
}
TEST_CASE("grad: mul (hadamard)") { CHECK_GRADS_BOTH(fn_mul, in_two_same); }

template <typename T>
ScalarFn<T> fn_scale_addc(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto a = g.leaf(in[0], go != nullptr);
        auto s = weighted_sum(g, g.add_const(g.scale(a, T(0.7)), T(0.3)), 54 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(a)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_one_mat(uint64_t inst) {
    return {rand_tensor<T>({4, 4}, -1.5, 1.5, 12 + inst)};
}
TEST_CASE("grad: scale and add_const") { CHECK_GRADS_BOTH(fn_scale_addc, in_one_mat); }

template <typename T>
ScalarFn<T> fn_reshape(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto a = g.leaf(in[0], go != nullptr);
        auto s = weighted_sum(g, g.reshape(a, {2, 8}), 55 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(a)};
        }
        return g.val(s)[0];
    };
}
TEST_CASE("grad: reshape") { CHECK_GRADS_BOTH(fn_reshape, in_one_mat); }

template <typename T>
ScalarFn<T> fn_matmul(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto a = g.leaf(in[0], go != nullptr);
        auto b = g.leaf(in[1], go != nullptr);
        auto s = weighted_sum(g, g.matmul(a, b), 56 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(a), g.grad(b)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_matmul(uint64_t inst) {
    return {rand_tensor<T>({3, 5}, -1.0, 1.0, 13 + inst), rand_tensor<T>({5, 4}, -1.0, 1.0, 23 + inst)};
}
TEST_CASE("grad: matmul") { CHECK_GRADS_BOTH(fn_matmul, in_matmul); }

template <typename T>
ScalarFn<T> fn_bmm(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto a = g.leaf(in[0], go != nullptr);
        auto b = g.leaf(in[1], go != nullptr);
        auto s = weighted_sum(g, g.bmm(a, b, false), 57 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(a), g.grad(b)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_bmm(uint64_t inst) {
    return {rand_tensor<T>({2, 3, 4}, -1.0, 1.0, 14 + inst), rand_tensor<T>({2, 4, 3}, -1.0, 1.0, 24 + inst)};
}
TEST_CASE("grad: bmm") { CHECK_GRADS_BOTH(fn_bmm, in_bmm); }

template <typename T>
ScalarFn<T> fn_bmm_tb(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto a = g.leaf(in[0], go != nullptr);
        auto b = g.leaf(in[1], go != nullptr);
        auto s = weighted_sum(g, g.bmm(a, b, true), 58 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(a), g.grad(b)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_bmm_tb(uint64_t inst) {
    return {rand_tensor<T>({2, 3, 4}, -1.0, 1.0, 15 + inst), rand_tensor<T>({2, 5, 4}, -1.0, 1.0, 25 + inst)};
}
TEST_CASE("grad: bmm transposed-b") { CHECK_GRADS_BOTH(fn_bmm_tb, in_bmm_tb); }

template <typename T>
ScalarFn<T> fn_heads(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto a = g.leaf(in[0], go != nullptr);
        auto split = g.split_heads(a, 2, 3, 2); // B=2,T=3,H=2 on [6,4]
        auto merged = g.merge_heads(split, 2, 3, 2);
        auto s = weighted_sum(g, merged, 59 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(a)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_heads(uint64_t inst) {
    return {rand_tensor<T>({6, 4}, -1.0, 1.0, 16 + inst)};
}
TEST_CASE("grad: split/merge heads round trip") {
    CHECK_GRADS_BOTH(fn_heads, in_heads);
    // merging a split is the identity
    Graph<double> g;
    auto x = g.leaf(rand_tensor<double>({6, 4}, -1, 1, 99), false);
    auto y = g.merge_heads(g.split_heads(x, 2, 3, 2), 2, 3, 2);
    for (int64_t i = 0; i < 24; ++i) CHECK(g.val(y)[i] == g.val(x)[i]);
}

template <typename T>
ScalarFn<T> fn_layer_norm(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto x = g.leaf(in[0], go != nullptr);
        auto gamma = g.leaf(in[1], go != nullptr);
        auto beta = g.leaf(in[2], go != nullptr);
        auto s = weighted_sum(g, g.layer_norm(x, gamma, beta, T(1e-5)), 60 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(x), g.grad(gamma), g.grad(beta)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_layer_norm(uint64_t inst) {
    return {rand_tensor<T>({4, 6}, -2.0, 2.0, 17 + inst), rand_tensor<T>({6}, 0.5, 1.5, 27 + inst),
            rand_tensor<T>({6}, -0.5, 0.5, 37 + inst)};
}
TEST_CASE("grad: layer_norm") { CHECK_GRADS_BOTH(fn_layer_norm, in_layer_norm); }

template <typename T>
ScalarFn<T> fn_softmax(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto x = g.leaf(in[0], go != nullptr);
        auto s = weighted_sum(g, g.softmax(x, T(0.7)), 61 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(x)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_rows(uint64_t inst) {
    return {rand_tensor<T>({3, 6}, -2.0, 2.0, 18 + inst)};
}
TEST_CASE("grad: softmax with temperature") { CHECK_GRADS_BOTH(fn_softmax, in_rows); }

template <typename T>
ScalarFn<T> fn_log_softmax(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto x = g.leaf(in[0], go != nullptr);
        auto s = weighted_sum(g, g.log_softmax(x), 62 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(x)};
        }
        return g.val(s)[0];
    };
}
TEST_CASE("grad: log_softmax") { CHECK_GRADS_BOTH(fn_log_softmax, in_rows); }

template <typename T>
ScalarFn<T> fn_causal_softmax(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto x = g.leaf(in[0], go != nullptr);
        auto s = weighted_sum(g, g.causal_softmax(x), 63 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(x)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_scores(uint64_t inst) {
    return {rand_tensor<T>({2, 4, 4}, -2.0, 2.0, 19 + inst)};
}
TEST_CASE("grad: causal_softmax") {
    CHECK_GRADS_BOTH(fn_causal_softmax, in_scores);
    // masked cells are exact zeros and rows sum to one
    Graph<double> g;
    auto x = g.leaf(rand_tensor<double>({1, 3, 3}, -2, 2, 77), false);
    auto y = g.causal_softmax(x);
    CHECK(g.val(y)[0 * 3 + 1] == 0.0);
    CHECK(g.val(y)[0 * 3 + 2] == 0.0);
    CHECK(g.val(y)[1 * 3 + 2] == 0.0);
    for (int64_t i = 0; i < 3; ++i) {
        double sum = 0;
        for (int64_t j = 0; j < 3; ++j) sum += g.val(y)[i * 3 + j];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

template <typename T>
ScalarFn<T> fn_silu(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto x = g.leaf(in[0], go != nullptr);
        auto s = weighted_sum(g, g.silu(x), 64 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(x)};
        }
        return g.val(s)[0];
    };
}
TEST_CASE("grad: silu") { CHECK_GRADS_BOTH(fn_silu, in_one_mat); }

template <typename T>
ScalarFn<T> fn_log(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto x = g.leaf(in[0], go != nullptr);
        auto s = weighted_sum(g, g.log_op(x), 65 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(x)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_positive(uint64_t inst) {
    return {rand_tensor<T>({3, 4}, 0.4, 2.5, 28 + inst)};
}
TEST_CASE("grad: log") { CHECK_GRADS_BOTH(fn_log, in_positive); }

template <typename T>
ScalarFn<T> fn_exp(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto x = g.leaf(in[0], go != nullptr);
        auto s = weighted_sum(g, g.exp_op(x), 66 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(x)};
        }
        return g.val(s)[0];
    };
}
TEST_CASE("grad: exp") { CHECK_GRADS_BOTH(fn_exp, in_one_mat); }

template <typename T>
ScalarFn<T> fn_gather_rows(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto table = g.leaf(in[0], go != nullptr);
        auto y = g.gather_rows(table, {1, 3, 1, 0}); // repeated row exercises accumulation
        auto s = weighted_sum(g, y, 67 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(table)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_table(uint64_t inst) {
    return {rand_tensor<T>({4, 5}, -1.0, 1.0, 29 + inst)};
}
TEST_CASE("grad: gather_rows (embedding lookup)") { CHECK_GRADS_BOTH(fn_gather_rows, in_table); }

template <typename T>
ScalarFn<T> fn_gather_last(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto x = g.leaf(in[0], go != nullptr);
        auto y = g.gather_last(x, {0, 2, 2, 4, 1, 1}, 2); // 3 rows, k=2, with duplicates
        auto s = weighted_sum(g, y, 68 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(x)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_rows5(uint64_t inst) {
    return {rand_tensor<T>({3, 5}, -1.0, 1.0, 30 + inst)};
}
TEST_CASE("grad: gather_last (take-along columns)") { CHECK_GRADS_BOTH(fn_gather_last, in_rows5); }

template <typename T>
ScalarFn<T> fn_reduce_sum(uint64_t) {
    return [](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto x = g.leaf(in[0], go != nullptr);
        auto s = g.reduce_sum(x);
        if (go) {
            g.backward(s);
            *go = {g.grad(x)};
        }
        return g.val(s)[0];
    };
}
TEST_CASE("grad: reduce_sum") { CHECK_GRADS_BOTH(fn_reduce_sum, in_one_mat); }

// a randomized composite graph, the kind eval_with_gradients sees in practice
template <typename T>
ScalarFn<T> fn_composite(uint64_t inst) {
    return [inst](const std::vector<Tensor<T>>& in, std::vector<Tensor<T>>* go) {
        Graph<T> g;
        auto a = g.leaf(in[0], go != nullptr);
        auto b = g.leaf(in[1], go != nullptr);
        auto w = g.leaf(in[2], go != nullptr);
        auto h = g.silu(g.matmul(g.add(a, b), w));
        auto p = g.log_softmax(h);
        auto s = weighted_sum(g, p, 69 + inst);
        if (go) {
            g.backward(s);
            *go = {g.grad(a), g.grad(b), g.grad(w)};
        }
        return g.val(s)[0];
    };
}
template <typename T>
std::vector<Tensor<T>> in_composite(uint64_t inst) {
    return {rand_tensor<T>({3, 4}, -1.0, 1.0, 31 + inst), rand_tensor<T>({3, 4}, -1.0, 1.0, 41 + inst),
            rand_tensor<T>({4, 5}, -1.0, 1.0, 51 + inst)};
}
TEST_CASE("grad: composite multi-op graph") { CHECK_GRADS_BOTH(fn_composite, in_composite); }

TEST_CASE("repeated evaluation is bit-identical") {
    auto run = [] {
        Graph<float> g;
        auto a = g.leaf(rand_tensor<float>({8, 8}, -1, 1, 4242), true);
        auto b = g.leaf(rand_tensor<float>({8, 8}, -1, 1, 4343), true);
        auto s = g.reduce_sum(g.softmax(g.matmul(a, b), 0.9f));
        g.backward(s);
        return std::make_pair(g.val(s)[0], g.grad(a).data);
    };
    auto [v1, g1] = run();
    auto [v2, g2] = run();
    CHECK(v1 == v2);
    CHECK(g1 == g2);
}

TEST_SUITE_END();
