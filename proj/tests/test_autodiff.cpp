#include <doctest.h>

#include <cmath>

#include "saml/error.hpp"
#include "saml/tape.hpp"
#include "testutil.hpp"

using namespace saml;
using test::fd_rel_error;
using test::random_tensor;
using test::weighted_sum;

TEST_CASE("sum of a leaf gives all-ones gradient") {
    SeededRng rng(1);
    Parameter x("x", random_tensor(rng, 3, 4));
    Tape t;
    Value loss = t.sum(t.param(x));
    t.backward(loss);
    for (int64_t i = 0; i < x.grad.numel(); ++i) {
        CHECK(x.grad[i] == 1.0f);
    }
}

TEST_CASE("matmul gradient matches finite differences") {
    SeededRng rng(2);
    Parameter a("a", random_tensor(rng, 4, 5));
    Parameter b("b", random_tensor(rng, 5, 3));
    auto loss_fn = [&]() {
        Tape t;
        return static_cast<double>(t.value(t.sum(t.matmul(t.param(a), t.param(b)))).at(0, 0));
    };
    Tape t;
    Value loss = t.sum(t.matmul(t.param(a), t.param(b)));
    t.backward(loss);
    CHECK(fd_rel_error(a, a.grad, loss_fn) <= 1e-3);
    CHECK(fd_rel_error(b, b.grad, loss_fn) <= 1e-3);
}

TEST_CASE("frozen parameters keep zero gradients") {
    SeededRng rng(3);
    Parameter a("a", random_tensor(rng, 3, 3), /*trainable=*/false);
    Parameter b("b", random_tensor(rng, 3, 3));
    Tape t;
    Value loss = t.sum(t.matmul(t.param(a), t.param(b)));
    t.backward(loss);
    for (int64_t i = 0; i < a.grad.numel(); ++i) {
        CHECK(a.grad[i] == 0.0f);
    }
    double norm = 0.0;
    for (int64_t i = 0; i < b.grad.numel(); ++i) {
        norm += std::abs(b.grad[i]);
    }
    CHECK(norm > 0.0);
}

TEST_CASE("backward twice on one tape is an error") {
    Parameter x("x", Tensor::full(1, 1, 2.0f));
    Tape t;
    Value loss = t.sum(t.param(x));
    t.backward(loss);
    CHECK_THROWS_AS(t.backward(loss), Error);
}

TEST_CASE("backward rejects non-scalar losses") {
    Parameter x("x", Tensor::full(2, 2, 1.0f));
    Tape t;
    Value v = t.param(x);
    CHECK_THROWS_AS(t.backward(v), ShapeError);
}

TEST_CASE("cross entropy limits and oracle") {
    SUBCASE("confident correct prediction drives the loss to zero") {
        Tensor logits(1, 5);
        logits.at(0, 2) = 1e6f;
        Tape t;
        Value loss = t.cross_entropy(t.constant(logits), {2});
        CHECK(t.value(loss).at(0, 0) <= 1e-4);
    }
    SUBCASE("uniform logits give ln C") {
        const int c = 7;
        Tape t;
        Value loss = t.cross_entropy(t.constant(Tensor(3, c)), {0, 3, 6});
        CHECK(t.value(loss).at(0, 0) == doctest::Approx(std::log(static_cast<double>(c))).epsilon(1e-6));
    }
    SUBCASE("random case matches an extended-precision oracle") {
        SeededRng rng(4);
        Tensor logits = random_tensor(rng, 4, 7, 2.0f);
        std::vector<int> targets = {1, 0, 6, 3};
        Tape t;
        Value loss = t.cross_entropy(t.constant(logits), targets);
        long double total = 0.0L;
        for (int i = 0; i < 4; ++i) {
            long double denom = 0.0L;
            for (int j = 0; j < 7; ++j) {
                denom += std::exp(static_cast<long double>(logits.at(i, j)));
            }
            total -= std::log(std::exp(static_cast<long double>(logits.at(i, targets[i]))) / denom);
        }
        CHECK(std::abs(t.value(loss).at(0, 0) - static_cast<double>(total / 4)) <= 1e-6);
    }
    SUBCASE("out-of-range target is an index error") {
        Tape t;
        Value logits = t.constant(Tensor(2, 3));
        CHECK_THROWS_AS(t.cross_entropy(logits, {0, 3}), IndexError);
    }
}

// One finite-difference scenario per differentiable op, 20 seeded trials each.
TEST_CASE("per-op gradients match finite differences over seeded trials") {
    for (uint64_t trial = 0; trial < 20; ++trial) {
        SeededRng rng(1000 + trial);
        const int m = 3 + static_cast<int>(trial % 3);
        const int n = 4 + static_cast<int>(trial % 2) * 2;

        SUBCASE("") {} // keep doctest quiet about empty case
        {
            // matmul_nt
            Parameter a("a", random_tensor(rng, m, n));
            Parameter w("w", random_tensor(rng, 5, n));
            auto fn = [&]() {
                Tape t;
                return static_cast<double>(
                    t.value(weighted_sum(t, t.matmul_nt(t.param(a), t.param(w)), SeededRng(trial))).at(0, 0));
            };
            Tape t;
            Value loss = weighted_sum(t, t.matmul_nt(t.param(a), t.param(w)), SeededRng(trial));
            t.backward(loss);
            CHECK(fd_rel_error(a, a.grad, fn) <= 1e-3);
            CHECK(fd_rel_error(w, w.grad, fn) <= 1e-3);
        }
        {
            // add, scale, add_row
            Parameter a("a", random_tensor(rng, m, n));
            Parameter b("b", random_tensor(rng, m, n));
            Parameter r("r", random_tensor(rng, 1, n));
            auto build = [&](Tape & t) {
                Value v = t.add_row(t.add(t.param(a), t.scale(t.param(b), 1.7f)), t.param(r));
                return weighted_sum(t, v, SeededRng(trial + 50));
            };
            auto fn = [&]() {
                Tape t;
                return static_cast<double>(t.value(build(t)).at(0, 0));
            };
            Tape t;
            t.backward(build(t));
            CHECK(fd_rel_error(a, a.grad, fn) <= 1e-3);
            CHECK(fd_rel_error(b, b.grad, fn) <= 1e-3);
            CHECK(fd_rel_error(r, r.grad, fn) <= 1e-3);
        }
        {
            // gelu + layer_norm
            Parameter a("a", random_tensor(rng, m, n));
            Parameter gamma("gamma", random_tensor(rng, 1, n, 0.5f));
            Parameter beta("beta", random_tensor(rng, 1, n, 0.5f));
            auto build = [&](Tape & t) {
                Value v = t.layer_norm(t.gelu(t.param(a)), t.param(gamma), t.param(beta));
                return weighted_sum(t, v, SeededRng(trial + 100));
            };
            auto fn = [&]() {
                Tape t;
                return static_cast<double>(t.value(build(t)).at(0, 0));
            };
            Tape t;
            t.backward(build(t));
            CHECK(fd_rel_error(a, a.grad, fn) <= 1e-3);
            CHECK(fd_rel_error(gamma, gamma.grad, fn) <= 1e-3);
            CHECK(fd_rel_error(beta, beta.grad, fn) <= 1e-3);
        }
        {
            // softmax_rows + gate_scale
            Parameter logits("logits", random_tensor(rng, m, 4));
            Parameter val("val", random_tensor(rng, m, n));
            auto build = [&](Tape & t) {
                Value gates = t.softmax_rows(t.param(logits));
                Value v = t.add(t.gate_scale(t.param(val), gates, 1), t.gate_scale(t.param(val), gates, 3));
                return weighted_sum(t, v, SeededRng(trial + 150));
            };
            auto fn = [&]() {
                Tape t;
                return static_cast<double>(t.value(build(t)).at(0, 0));
            };
            Tape t;
            t.backward(build(t));
            CHECK(fd_rel_error(logits, logits.grad, fn) <= 1e-3);
            CHECK(fd_rel_error(val, val.grad, fn) <= 1e-3);
        }
        {
            // fused attention
            const int len = 5, d = 8, heads = 2;
            Parameter q("q", random_tensor(rng, len, d));
            Parameter k("k", random_tensor(rng, len, d));
            Parameter v("v", random_tensor(rng, len, d));
            auto build = [&](Tape & t) {
                return weighted_sum(t, t.attention(t.param(q), t.param(k), t.param(v), heads),
                                    SeededRng(trial + 200));
            };
            auto fn = [&]() {
                Tape t;
                return static_cast<double>(t.value(build(t)).at(0, 0));
            };
            Tape t;
            t.backward(build(t));
            // full-gradient check: per-matrix norms sit at the FP32 rounding
            // noise floor for this composite
            CHECK(test::fd_rel_error_params({&q, &k, &v}, fn) <= 1e-3);
        }
        {
            // slice_rows + concat_rows + mean_rows
            Parameter a("a", random_tensor(rng, 6, n));
            auto build = [&](Tape & t) {
                Value x = t.param(a);
                Value top = t.mean_rows(t.slice_rows(x, 0, 3));
                Value bot = t.mean_rows(t.slice_rows(x, 3, 3));
                return weighted_sum(t, t.concat_rows({top, bot}), SeededRng(trial + 250));
            };
            auto fn = [&]() {
                Tape t;
                return static_cast<double>(t.value(build(t)).at(0, 0));
            };
            Tape t;
            t.backward(build(t));
            CHECK(fd_rel_error(a, a.grad, fn) <= 1e-3);
        }
        {
            // embedding + cross_entropy
            Parameter table("table", random_tensor(rng, 7, n));
            const std::vector<int> ids = {0, 3, 6, 3};
            const std::vector<int> targets = {1, 0, 2, 2};
            Parameter w("w", random_tensor(rng, 3, n));
            auto build = [&](Tape & t) {
                Value emb = t.embedding(t.param(table), ids);
                Value logits = t.matmul_nt(emb, t.param(w));
                return t.scale(t.cross_entropy(logits, targets), 4.0f);
            };
            auto fn = [&]() {
                Tape t;
                return static_cast<double>(t.value(build(t)).at(0, 0));
            };
            Tape t;
            t.backward(build(t));
            CHECK(fd_rel_error(table, table.grad, fn) <= 1e-3);
            CHECK(fd_rel_error(w, w.grad, fn) <= 1e-3);
        }
    }
}
