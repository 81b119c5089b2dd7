#include <doctest.h>

#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "saml/adapters.hpp"
#include "saml/error.hpp"
#include "saml/optim.hpp"
#include "testutil.hpp"

using namespace saml;
using test::fd_rel_error;
using test::random_tensor;
using test::weighted_sum;

namespace {

SamlLayer random_layer(SeededRng & rng, int d, int k, int n, int r, float b_std = 0.5f) {
    SamlLayer l = SamlLayer::init("layer", random_tensor(rng, d, k), n, r, static_cast<float>(r), rng);
    rng.fill_normal(l.router->w_g.value, 0.5f);
    for (auto & e : l.experts) {
        rng.fill_normal(e.a.value, 0.5f);
        rng.fill_normal(e.b.value, b_std);
    }
    return l;
}

// Router that puts essentially all gate mass on one expert for inputs
// whose first coordinate is positive.
void force_collapse(SamlLayer & l, int dominant) {
    l.router->w_g.value.fill(0.0f);
    for (int i = 0; i < l.n_experts(); ++i) {
        l.router->w_g.value.at(i, 0) = i == dominant ? 15.0f : -15.0f;
    }
}

Tensor positive_first_inputs(SeededRng & rng, int rows, int k) {
    Tensor x = random_tensor(rng, rows, k);
    for (int i = 0; i < rows; ++i) {
        x.at(i, 0) = 1.0f + static_cast<float>(rng.next_double());
    }
    return x;
}

Tensor layer_output(SamlLayer & l, const Tensor & x) {
    Tape t;
    return t.value(l.forward(t, t.constant(x)));
}

} // namespace

TEST_CASE("lora forward") {
    SeededRng rng(1);
    const int d = 6, k = 5, r = 2;
    Tensor w0 = random_tensor(rng, d, k);
    Tensor x = random_tensor(rng, 3, k);

    SUBCASE("zero B means the delta vanishes") {
        LoraModule m = LoraModule::init("m", d, k, r, static_cast<float>(r), rng);
        Tape t;
        Value out = lora_forward(t, m, w0, t.constant(x));
        CHECK(max_abs_diff(t.value(out), matmul_nt(x, w0)) == 0.0);
    }
    SUBCASE("full rank with alpha = r adds exactly BA") {
        LoraModule m = LoraModule::init("m", k, k, k, static_cast<float>(k), rng);
        rng.fill_normal(m.b.value, 0.5f);
        m.a.value = Tensor::identity(k);
        Tensor w0s = random_tensor(rng, k, k);
        Tape t;
        Value out = lora_forward(t, m, w0s, t.constant(x));
        const Tensor expect = matmul_nt(x, add(w0s, m.b.value)); // BA = B when A = I
        CHECK(max_abs_diff(t.value(out), expect) <= 1e-6);
    }
    SUBCASE("random case matches the dense-delta oracle") {
        for (uint64_t trial = 0; trial < 10; ++trial) {
            SeededRng trng(100 + trial);
            LoraModule m = LoraModule::init("m", d, k, r, 1.5f, trng);
            trng.fill_normal(m.b.value, 0.7f);
            Tensor xt = random_tensor(trng, 4, k);
            Tape t;
            Value out = lora_forward(t, m, w0, t.constant(xt));
            const Tensor dense = add(w0, m.materialize_delta());
            CHECK(max_abs_diff(t.value(out), matmul_nt(xt, dense)) <= 1e-6);
        }
    }
    SUBCASE("shape mismatch is rejected") {
        LoraModule m = LoraModule::init("m", d, k, r, 1.0f, rng);
        Tape t;
        Value xv = t.constant(x);
        CHECK_THROWS_AS((void)lora_forward(t, m, Tensor(3, 3), xv), ShapeError);
    }
}

TEST_CASE("router gates") {
    SeededRng rng(2);
    const int n = 4, k = 6;
    SUBCASE("zero weights give uniform gates") {
        Router r = Router::init("r", n, k);
        Tensor g = route_plain(r, random_tensor(rng, 5, k));
        for (int64_t i = 0; i < g.numel(); ++i) {
            CHECK(g[i] == doctest::Approx(0.25));
        }
    }
    SUBCASE("a dominant logit row saturates its gate") {
        Router r = Router::init("r", 3, k);
        for (int j = 0; j < k; ++j) {
            r.w_g.value.at(1, j) = 1000.0f;
            r.w_g.value.at(0, j) = -1000.0f;
            r.w_g.value.at(2, j) = -1000.0f;
        }
        Tensor x = Tensor::full(1, k, 1.0f);
        Tensor g = route_plain(r, x);
        CHECK(g.at(0, 1) == doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("n=3 random case matches an extended-precision oracle") {
        Router r = Router::init("r", 3, k);
        rng.fill_normal(r.w_g.value, 1.0f);
        Tensor x = random_tensor(rng, 1, k);
        Tensor g = route_plain(r, x);
        long double denom = 0.0L;
        long double logits[3];
        for (int i = 0; i < 3; ++i) {
            long double acc = 0.0L;
            for (int j = 0; j < k; ++j) {
                acc += static_cast<long double>(r.w_g.value.at(i, j)) * x.at(0, j);
            }
            logits[i] = acc;
        }
        for (int i = 0; i < 3; ++i) {
            denom += std::exp(logits[i]);
        }
        for (int i = 0; i < 3; ++i) {
            CHECK(std::abs(g.at(0, i) - static_cast<double>(std::exp(logits[i]) / denom)) <= 1e-6);
        }
    }
    SUBCASE("gate simplex holds for 100 seeded inputs") {
        Router r = Router::init("r", n, k);
        rng.fill_normal(r.w_g.value, 2.0f);
        Tensor x = random_tensor(rng, 100, k);
        Tensor g = route_plain(r, x);
        for (int i = 0; i < 100; ++i) {
            double sum = 0.0;
            for (int j = 0; j < n; ++j) {
                CHECK(g.at(i, j) >= 0.0f);
                sum += g.at(i, j);
            }
            CHECK(std::abs(sum - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("saml forward agrees with its references") {
    SUBCASE("one expert reduces to plain lora bit-for-bit") {
        SeededRng rng(3);
        SamlLayer l = random_layer(rng, 8, 6, 1, 2);
        Tensor x = random_tensor(rng, 5, 6);
        Tape t1;
        const Tensor a = t1.value(saml_forward(t1, l, t1.constant(x)));
        Tape t2;
        const Tensor b = t2.value(lora_forward(t2, l.experts[0], l.base.fp32, t2.constant(x)));
        CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0);
    }
    SUBCASE("identical experts make the gates irrelevant") {
        SeededRng rng(4);
        SamlLayer l = random_layer(rng, 8, 6, 4, 2);
        for (int i = 1; i < 4; ++i) {
            l.experts[i].a.value = l.experts[0].a.value;
            l.experts[i].b.value = l.experts[0].b.value;
        }
        Tensor x = random_tensor(rng, 5, 6);
        const Tensor a = layer_output(l, x);
        Tape t2;
        const Tensor b = t2.value(lora_forward(t2, l.experts[0], l.base.fp32, t2.constant(x)));
        CHECK(max_abs_diff(a, b) <= 1e-5);
    }
    SUBCASE("mixing identity against the double-sum expansion, 50 seeds") {
        for (uint64_t trial = 0; trial < 50; ++trial) {
            SeededRng rng(500 + trial);
            const int n = trial % 3 == 0 ? 2 : (trial % 3 == 1 ? 4 : 10);
            SamlLayer l = random_layer(rng, 7, 9, n, 2);
            Tensor x = random_tensor(rng, 4, 9);
            CHECK(max_abs_diff(layer_output(l, x), saml_forward_reference(l, x)) <= 1e-5);
        }
    }
    SUBCASE("the shared-mixing rule differs from the per-expert mixture") {
        double best = 0.0;
        for (uint64_t trial = 0; trial < 20 && best <= 1e-3; ++trial) {
            SeededRng rng(900 + trial);
            SamlLayer l = random_layer(rng, 6, 6, 2, 2);
            Tensor x = random_tensor(rng, 3, 6);
            best = std::max(best, max_abs_diff(layer_output(l, x), per_expert_mixture(l, x)));
        }
        CHECK(best > 1e-3);
    }
    SUBCASE("pruned layers refuse the full-mode entry point") {
        SeededRng rng(5);
        SamlLayer l = random_layer(rng, 6, 6, 3, 2);
        RoutingStats stats = collect_routing_stats(l, random_tensor(rng, 8, 6));
        SamlLayer pruned = prune_layer(l, PruneMode::collapse_prune, stats).layer;
        Tape t;
        Value xv = t.constant(random_tensor(rng, 2, 6));
        CHECK_THROWS_AS((void)saml_forward(t, pruned, xv), ValidationError);
    }
}

TEST_CASE("saml gradients match finite differences") {
    for (uint64_t trial = 0; trial < 5; ++trial) {
        SeededRng rng(40 + trial);
        SamlLayer l = random_layer(rng, 6, 5, 3, 2, /*b_std=*/1.0f);
        Tensor x = random_tensor(rng, 4, 5);
        auto build = [&](Tape & t) {
            return weighted_sum(t, saml_forward(t, l, t.constant(x)), SeededRng(trial));
        };
        auto fn = [&]() {
            Tape t;
            return static_cast<double>(t.value(build(t)).at(0, 0));
        };
        Tape t;
        t.backward(build(t));
        CHECK(test::fd_rel_error_params(l.parameters(), fn) <= 1e-3);
    }
}

TEST_CASE("training a saml layer never touches the frozen base") {
    SeededRng rng(6);
    SamlLayer l = random_layer(rng, 6, 5, 3, 2);
    const Tensor base_before = l.base.fp32;
    Optimizer opt(OptimConfig{});
    for (int step = 0; step < 20; ++step) {
        Tape t;
        Tensor x = random_tensor(rng, 4, 5);
        Value loss = weighted_sum(t, saml_forward(t, l, t.constant(x)), SeededRng(step));
        t.backward(loss);
        opt.step(l.parameters());
    }
    CHECK(std::memcmp(base_before.data(), l.base.fp32.data(),
                      sizeof(float) * base_before.numel()) == 0);
}

TEST_CASE("routing stats") {
    SeededRng rng(7);
    const int n = 4, k = 6;
    SUBCASE("a constant point mass is fully collapsed") {
        SamlLayer l = random_layer(rng, 5, k, n, 2);
        force_collapse(l, 2);
        Tensor x = positive_first_inputs(rng, 50, k);
        RoutingStats s = collect_routing_stats(l, x);
        CHECK(s.dominant_expert == 2);
        CHECK(s.top1_fraction == 1.0f);
        CHECK(s.mean_entropy <= 1e-6f);
        CHECK(s.mean_gate[2] >= 0.999f);
    }
    SUBCASE("zero router weights give uniform stats") {
        SamlLayer l = random_layer(rng, 5, k, n, 2);
        l.router->w_g.value.fill(0.0f);
        RoutingStats s = collect_routing_stats(l, random_tensor(rng, 25, k));
        for (float g : s.mean_gate) {
            CHECK(g == doctest::Approx(1.0 / n));
        }
        CHECK(s.mean_entropy == doctest::Approx(std::log(static_cast<double>(n))).epsilon(1e-5));
    }
    SUBCASE("stats match an independent recomputation on 100 inputs") {
        SamlLayer l = random_layer(rng, 5, k, n, 2);
        Tensor x = random_tensor(rng, 100, k);
        RoutingStats s = collect_routing_stats(l, x);
        const Tensor gates = route_plain(*l.router, x);
        std::vector<double> mean(n, 0.0);
        double entropy = 0.0;
        for (int i = 0; i < 100; ++i) {
            for (int j = 0; j < n; ++j) {
                mean[j] += gates.at(i, j) / 100.0;
                if (gates.at(i, j) > 0) {
                    entropy -= gates.at(i, j) * std::log(gates.at(i, j)) / 100.0;
                }
            }
        }
        int dom = 0;
        for (int j = 1; j < n; ++j) {
            if (mean[j] > mean[dom]) dom = j;
        }
        int hits = 0;
        for (int i = 0; i < 100; ++i) {
            int arg = 0;
            for (int j = 1; j < n; ++j) {
                if (gates.at(i, j) > gates.at(i, arg)) arg = j;
            }
            hits += arg == dom;
        }
        CHECK(s.dominant_expert == dom);
        CHECK(s.top1_fraction == doctest::Approx(hits / 100.0));
        CHECK(s.mean_entropy == doctest::Approx(entropy).epsilon(1e-4));
        for (int j = 0; j < n; ++j) {
            CHECK(s.mean_gate[j] == doctest::Approx(mean[j]).epsilon(1e-4));
        }
        double total = 0.0;
        for (float g : s.mean_gate) {
            total += g;
        }
        CHECK(std::abs(total - 1.0) <= 1e-5);
    }
    SUBCASE("empty calibration set is rejected") {
        SamlLayer l = random_layer(rng, 5, k, n, 2);
        CHECK_THROWS_AS(collect_routing_stats(l, Tensor(0, k)), ValidationError);
    }
}

TEST_CASE("collapse detection thresholds") {
    RoutingStats s;
    s.mean_gate = {0.995f, 0.003f, 0.002f};
    s.dominant_expert = 0;
    CHECK(detect_collapse(s) == LayerHealth::collapsed);
    s.mean_gate = {0.93f, 0.05f, 0.02f};
    CHECK(detect_collapse(s) == LayerHealth::imbalanced);
    s.mean_gate = std::vector<float>(10, 0.1f);
    s.dominant_expert = 3;
    CHECK(detect_collapse(s) == LayerHealth::healthy);
    s.mean_gate = {0.5f, 0.5f};
    s.dominant_expert = 0;
    CHECK_THROWS_AS(detect_collapse(s, 1.5f, 0.9f), ValidationError);
    CHECK_THROWS_AS(detect_collapse(s, 0.99f, 0.0f), ValidationError);
}

TEST_CASE("pruning a collapsed layer is lossless") {
    SeededRng rng(8);
    const int d = 7, k = 6, n = 4, r = 2;
    SamlLayer l = random_layer(rng, d, k, n, r);
    force_collapse(l, 1);
    Tensor calib = positive_first_inputs(rng, 30, k);
    RoutingStats stats = collect_routing_stats(l, calib);
    CHECK(stats.mean_gate[1] >= 1.0f - 1e-9f);
    const Tensor full_out = layer_output(l, calib);

    SUBCASE("collapse_prune matches the full forward") {
        LayerPruneResult res = prune_layer(l, PruneMode::collapse_prune, stats);
        CHECK(res.layer.mode == SamlMode::collapsed_single_lora);
        CHECK(!res.layer.router.has_value());
        CHECK(res.layer.n_experts() == 1);
        CHECK(max_abs_diff(layer_output(res.layer, calib), full_out) <= 1e-5);
        CHECK(res.params_removed == static_cast<int64_t>(n - 1) * (r * k + d * r) + n * k);
    }
    SUBCASE("top1 with router matches on the constructed collapse") {
        LayerPruneResult res = prune_layer(l, PruneMode::top1_with_router, stats);
        CHECK(res.layer.mode == SamlMode::top1_with_router);
        CHECK(res.layer.router.has_value());
        CHECK(res.layer.dominant_expert == 1);
        CHECK(max_abs_diff(layer_output(res.layer, calib), full_out) <= 1e-5);
        CHECK(res.params_removed == static_cast<int64_t>(n - 1) * (r * k + d * r));
    }
    SUBCASE("double pruning is rejected") {
        LayerPruneResult res = prune_layer(l, PruneMode::collapse_prune, stats);
        CHECK_THROWS_AS(prune_layer(res.layer, PruneMode::collapse_prune, stats), ValidationError);
    }
}

TEST_CASE("dropping the router from a healthy layer changes outputs") {
    double best = 0.0;
    for (uint64_t trial = 0; trial < 10 && best <= 1e-2; ++trial) {
        SeededRng rng(80 + trial);
        SamlLayer l = random_layer(rng, 7, 6, 4, 2);
        Tensor calib = random_tensor(rng, 30, 6);
        RoutingStats stats = collect_routing_stats(l, calib);
        if (detect_collapse(stats) != LayerHealth::healthy) {
            continue;
        }
        const Tensor full_out = layer_output(l, calib);
        SamlLayer pruned = prune_layer(l, PruneMode::top1_no_router, stats).layer;
        CHECK(pruned.mode == SamlMode::collapsed_single_lora);
        best = std::max(best, max_abs_diff(layer_output(pruned, calib), full_out));
    }
    CHECK(best > 1e-2);
}

TEST_CASE("top1_with_router applies the squared dominant gate") {
    SeededRng rng(9);
    const int k = 6;
    SamlLayer l = random_layer(rng, 5, k, 3, 2);
    Tensor calib = random_tensor(rng, 20, k);
    RoutingStats stats = collect_routing_stats(l, calib);
    SamlLayer pruned = prune_layer(l, PruneMode::top1_with_router, stats).layer;
    const int dom = stats.dominant_expert;
    const Tensor gates = route_plain(*l.router, calib);
    const Tensor out = layer_output(pruned, calib);
    // manual expectation: base + (alpha/r) g_d^2 B_d A_d x
    Tensor expect = matmul_nt(calib, l.base.fp32);
    Tensor u = matmul_nt(calib, l.experts[dom].a.value);
    Tensor y = matmul_nt(u, l.experts[dom].b.value);
    const float s = l.alpha() / l.rank();
    for (int i = 0; i < expect.rows(); ++i) {
        const float g = gates.at(i, dom);
        for (int j = 0; j < expect.cols(); ++j) {
            expect.at(i, j) += s * g * g * y.at(i, j);
        }
    }
    CHECK(max_abs_diff(out, expect) <= 1e-5);

    SUBCASE("renormalized variant fixes the gate at one") {
        SamlLayer renorm = pruned;
        renorm.top1_renormalize = true;
        Tape t2;
        const Tensor out2 = t2.value(lora_forward(t2, renorm.experts[0], renorm.base.fp32, t2.constant(calib)));
        CHECK(max_abs_diff(layer_output(renorm, calib), out2) == 0.0);
    }
}

TEST_CASE("experts initialized from donor loras") {
    SeededRng rng(10);
    const int d = 6, k = 5, r = 2;
    SUBCASE("zero-B donors give a zero delta") {
        std::vector<LoraModule> donors;
        for (int i = 0; i < 3; ++i) {
            donors.push_back(LoraModule::init(fmt::format("donor{}", i), d, k, r, 2.0f, rng));
        }
        auto experts = init_experts_from_loras(donors);
        SamlLayer l;
        l.name = "layer";
        l.base.fp32 = random_tensor(rng, d, k);
        l.experts = std::move(experts);
        l.router = Router::init("layer", 3, k);
        Tensor x = random_tensor(rng, 4, k);
        CHECK(max_abs_diff(layer_output(l, x), matmul_nt(x, l.base.fp32)) == 0.0);
    }
    SUBCASE("experts are deep copies") {
        std::vector<LoraModule> donors;
        donors.push_back(LoraModule::init("donor0", d, k, r, 2.0f, rng));
        donors.push_back(LoraModule::init("donor1", d, k, r, 2.0f, rng));
        auto experts = init_experts_from_loras(donors);
        const Tensor donor_a = donors[0].a.value;
        experts[0].a.value.fill(99.0f);
        CHECK(max_abs_diff(donors[0].a.value, donor_a) == 0.0);
    }
    SUBCASE("shape-incompatible donors are rejected") {
        std::vector<LoraModule> donors;
        donors.push_back(LoraModule::init("donor0", d, k, r, 2.0f, rng));
        donors.push_back(LoraModule::init("donor1", d, k + 1, r, 2.0f, rng));
        CHECK_THROWS_AS(init_experts_from_loras(donors), ShapeError);
    }
}
