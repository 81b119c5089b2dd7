#include <doctest.h>

#include <cmath>
#include <cstring>

#include "saml/error.hpp"
#include "saml/model.hpp"
#include "saml/optim.hpp"
#include "saml/quant.hpp"
#include "testutil.hpp"

using namespace saml;
using test::random_tensor;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.d_model = 16;
    cfg.n_heads = 4;
    cfg.n_blocks = 2;
    cfg.ff_hidden = 24;
    cfg.n_experts = 3;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 2.0f;
    cfg.block_size = 16;
    cfg.seed = 11;
    return cfg;
}

TokenBatch random_tokens(SeededRng & rng, int batch, int len, int vocab) {
    TokenBatch tb;
    tb.batch = batch;
    tb.len = len;
    for (int i = 0; i < batch * len; ++i) {
        tb.ids.push_back(rng.uniform_int(vocab));
    }
    return tb;
}

Tensor logits_of(TinyTransformer & m, const TokenBatch & tb) {
    Tape t;
    return t.value(m.forward(t, tb));
}

} // namespace

TEST_CASE("build produces the right shapes and placement") {
    ModelConfig cfg;
    cfg.vocab_size = 20;
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.n_blocks = 2;
    cfg.ff_hidden = 96;
    cfg.seed = 5;
    TinyTransformer m = TinyTransformer::build(cfg);
    SeededRng rng(3);
    TokenBatch tb = random_tokens(rng, 8, 8, cfg.vocab_size);
    Tensor logits = logits_of(m, tb);
    CHECK(logits.rows() == 8);
    CHECK(logits.cols() == cfg.vocab_size);
    CHECK(logits.all_finite());
    CHECK(m.count_saml_layers() == cfg.n_blocks * 4);
    CHECK(m.count_ff_loras() == cfg.n_blocks * 2);
}

TEST_CASE("same seed builds bit-identical models") {
    ModelConfig cfg = small_config();
    TinyTransformer a = TinyTransformer::build(cfg);
    TinyTransformer b = TinyTransformer::build(cfg);
    auto ba = a.tensor_bindings();
    auto bb = b.tensor_bindings();
    REQUIRE(ba.size() == bb.size());
    for (size_t i = 0; i < ba.size(); ++i) {
        CHECK(ba[i].name == bb[i].name);
        const Tensor & ta = ba[i].base != nullptr ? ba[i].base->fp32 : ba[i].param->value;
        const Tensor & tb = bb[i].base != nullptr ? bb[i].base->fp32 : bb[i].param->value;
        REQUIRE(ta.same_shape(tb));
        CHECK(std::memcmp(ta.data(), tb.data(), sizeof(float) * ta.numel()) == 0);
    }
}

TEST_CASE("invalid configs name the offending field") {
    ModelConfig cfg = small_config();
    cfg.d_model = 30; // not divisible by 4 heads
    CHECK_THROWS_WITH_AS(TinyTransformer::build(cfg), doctest::Contains("d_model"), ConfigError);
    cfg = small_config();
    cfg.vocab_size = 0;
    CHECK_THROWS_WITH_AS(TinyTransformer::build(cfg), doctest::Contains("vocab_size"), ConfigError);
    cfg = small_config();
    cfg.n_experts = -1;
    CHECK_THROWS_WITH_AS(TinyTransformer::build(cfg), doctest::Contains("n_experts"), ConfigError);
}

TEST_CASE("zero-delta adapters leave the base function untouched") {
    ModelConfig cfg = small_config();
    TinyTransformer m = TinyTransformer::build(cfg);
    SeededRng rng(7);
    TokenBatch tb = random_tokens(rng, 4, 6, cfg.vocab_size);
    const Tensor before = logits_of(m, tb);

    SUBCASE("scrambling A with B still zero changes nothing") {
        for (Parameter * p : m.expert_params()) {
            if (p->name.ends_with(".a")) {
                rng.fill_normal(p->value, 5.0f);
            }
        }
        const Tensor after = logits_of(m, tb);
        CHECK(std::memcmp(before.data(), after.data(), sizeof(float) * before.numel()) == 0);
    }
    SUBCASE("an adapter-free twin computes the same logits") {
        ModelConfig plain = cfg;
        plain.saml_targets = {false, false, false, false};
        TinyTransformer mp = TinyTransformer::build(plain);
        const Tensor other = logits_of(mp, tb);
        CHECK(std::memcmp(before.data(), other.data(), sizeof(float) * before.numel()) == 0);
        CHECK(mp.count_saml_layers() == 0);
    }
}

TEST_CASE("permuting the batch permutes logits rows identically") {
    ModelConfig cfg = small_config();
    TinyTransformer m = TinyTransformer::build(cfg);
    SeededRng rng(9);
    // make adapters nonzero so every path participates
    for (Parameter * p : m.trainable_params()) {
        rng.fill_normal(p->value, 0.3f);
    }
    std::vector<std::vector<int>> seqs;
    for (int i = 0; i < 5; ++i) {
        std::vector<int> s;
        for (int t = 0; t < 6; ++t) {
            s.push_back(rng.uniform_int(cfg.vocab_size));
        }
        seqs.push_back(s);
    }
    const Tensor orig = logits_of(m, TokenBatch::of(seqs));
    std::vector<std::vector<int>> perm = {seqs[3], seqs[0], seqs[4], seqs[2], seqs[1]};
    const Tensor permuted = logits_of(m, TokenBatch::of(perm));
    const int map[5] = {3, 0, 4, 2, 1};
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < cfg.vocab_size; ++j) {
            CHECK(permuted.at(i, j) == orig.at(map[i], j));
        }
    }
}

TEST_CASE("out-of-range tokens are rejected") {
    TinyTransformer m = TinyTransformer::build(small_config());
    TokenBatch tb;
    tb.batch = 1;
    tb.len = 3;
    tb.ids = {0, 5, 12};
    Tape t;
    CHECK_THROWS_AS((void)m.forward(t, tb), IndexError);
}

TEST_CASE("quantize_base compresses and keeps the model runnable") {
    ModelConfig cfg = small_config();
    cfg.d_model = 64; // weight tensors divisible by the block size
    cfg.ff_hidden = 128;
    cfg.vocab_size = 32;
    cfg.block_size = 64;
    TinyTransformer m = TinyTransformer::build(cfg);

    // per-tensor rmse oracle, relative to each tensor's own spread
    auto check_tensor = [&](const Tensor & w) {
        QuantizedTensor q = quantize_blockwise(w, cfg.block_size, CodebookId::nf4);
        double mean = 0.0;
        for (int64_t i = 0; i < w.numel(); ++i) {
            mean += w[i];
        }
        mean /= w.numel();
        double var = 0.0;
        for (int64_t i = 0; i < w.numel(); ++i) {
            var += (w[i] - mean) * (w[i] - mean);
        }
        const double stddev = std::sqrt(var / w.numel());
        CHECK(measure(q, w).rmse <= 0.095 * stddev * 1.05);
    };
    check_tensor(m.embedding.fp32);
    check_tensor(m.blocks[0]->q.saml.base.fp32);
    check_tensor(m.blocks[0]->ff1.w.fp32);

    m.quantize_base();
    CHECK(m.base_quantized());
    const CompressionSummary s = m.measure_compression();
    CHECK(s.bits_per_weight == 4.5f);
    CHECK(s.payload_ratio >= 6.8);
    CHECK(s.payload_ratio <= 7.2);

    SeededRng rng(13);
    TokenBatch tb = random_tokens(rng, 3, 5, cfg.vocab_size);
    CHECK(logits_of(m, tb).all_finite());

    CHECK_THROWS_AS(m.quantize_base(), ValidationError);
}

TEST_CASE("quantized and fp32 logits differ by a bounded amount") {
    ModelConfig cfg = small_config();
    cfg.d_model = 64;
    cfg.ff_hidden = 128;
    cfg.vocab_size = 32;
    cfg.block_size = 64;
    TinyTransformer fp = TinyTransformer::build(cfg);
    TinyTransformer q = fp.clone();
    q.quantize_base();
    SeededRng rng(17);
    TokenBatch tb = random_tokens(rng, 6, 8, cfg.vocab_size);
    const Tensor lf = logits_of(fp, tb);
    const Tensor lq = logits_of(q, tb);
    const double diff = max_abs_diff(lf, lq);
    CHECK(diff > 0.0);
    CHECK(diff < 5.0); // measured ~0.5 at this scale; bound is generous
}

TEST_CASE("parameter accounting") {
    SUBCASE("desk-scale default keeps the trainable fraction under 0.15") {
        TinyTransformer m = TinyTransformer::build(ModelConfig{});
        const ParamCounts c = m.count_params();
        CHECK(c.trainable_fraction < 0.15);
        CHECK(c.trainable == c.by_component.at("router") + c.by_component.at("expert") +
                                 c.by_component.at("ff_lora"));
    }
    SUBCASE("counts match hand arithmetic on a small config") {
        ModelConfig cfg = small_config();
        TinyTransformer m = TinyTransformer::build(cfg);
        const ParamCounts c = m.count_params();
        const int64_t d = cfg.d_model, v = cfg.vocab_size, f = cfg.ff_hidden;
        const int64_t n = cfg.n_experts, r = cfg.lora_rank, blocks = cfg.n_blocks;
        const int64_t expert = blocks * 4 * n * (r * d + d * r);
        const int64_t router = blocks * 4 * n * d;
        const int64_t ff_lora = blocks * (r * d + f * r + r * f + d * r);
        const int64_t base = v * d + blocks * 4 * d * d + blocks * 2 * d * f + v * d;
        const int64_t ln = blocks * 4 * d + 2 * d;
        const int64_t bias = blocks * (4 * d + f + d) + v;
        CHECK(c.by_component.at("expert") == expert);
        CHECK(c.by_component.at("router") == router);
        CHECK(c.by_component.at("ff_lora") == ff_lora);
        CHECK(c.trainable == expert + router + ff_lora);
        CHECK(c.total == base + ln + bias + expert + router + ff_lora);
    }
    SUBCASE("freezing everything zeroes the trainable count") {
        TinyTransformer m = TinyTransformer::build(small_config());
        for (Parameter * p : m.trainable_params()) {
            p->trainable = false;
        }
        CHECK(m.count_params().trainable == 0);
    }
    SUBCASE("a routerless single-lora model matches hand arithmetic") {
        ModelConfig cfg = small_config();
        cfg.n_experts = 1;
        TinyTransformer m = TinyTransformer::build(cfg);
        SeededRng rng(71);
        TokenBatch calib;
        calib.batch = 4;
        calib.len = 5;
        for (int i = 0; i < 20; ++i) {
            calib.ids.push_back(rng.uniform_int(cfg.vocab_size));
        }
        m.prune(PruneMode::collapse_prune, PruneThresholds{}, calib); // n=1 is always collapsed
        const ParamCounts c = m.count_params();
        const int64_t d = cfg.d_model, f = cfg.ff_hidden, r = cfg.lora_rank;
        const int64_t attn_lora = cfg.n_blocks * 4 * (r * d + d * r);
        const int64_t ff_lora = cfg.n_blocks * (r * d + f * r + r * f + d * r);
        CHECK(c.by_component.count("router") == 0);
        CHECK(c.trainable == attn_lora + ff_lora);
    }
}

TEST_CASE("model-level pruning applies the policy per layer") {
    ModelConfig cfg = small_config();
    TinyTransformer m = TinyTransformer::build(cfg);
    SeededRng rng(23);
    for (Parameter * p : m.trainable_params()) {
        rng.fill_normal(p->value, 0.4f);
    }
    // collapse exactly one layer's router
    SamlLayer * first = nullptr;
    m.for_each_saml([&](SamlLayer & l) {
        if (first == nullptr) {
            first = &l;
        }
    });
    first->router->w_g.value.fill(0.0f);
    for (int i = 0; i < first->n_experts(); ++i) {
        for (int j = 0; j < cfg.d_model; ++j) {
            first->router->w_g.value.at(i, j) = i == 2 ? 30.0f : -30.0f;
        }
    }

    TokenBatch calib = random_tokens(rng, 8, 6, cfg.vocab_size);
    SUBCASE("collapse mode prunes only collapsed layers") {
        // the constructed router is a point mass whenever sum(x) > 0, which
        // holds for most but not necessarily all inputs; accept either
        // collapsed or imbalanced for the rigged layer
        TinyTransformer mm = m.clone();
        const int64_t before = mm.count_params().total;
        PruneReport rep = mm.prune(PruneMode::collapse_prune, PruneThresholds{}, calib);
        const int64_t after = mm.count_params().total;
        CHECK(before - after == rep.params_removed);
        for (const auto & [layer, mode] : rep.mode_applied) {
            const bool was_collapsed =
                std::find(rep.layers_collapsed.begin(), rep.layers_collapsed.end(), layer) !=
                rep.layers_collapsed.end();
            CHECK(mode == (was_collapsed ? "collapsed_single_lora" : "full"));
        }
    }
    SUBCASE("top1 mode applies everywhere and counts removed params exactly") {
        TinyTransformer mm = m.clone();
        const int64_t before = mm.count_params().total;
        PruneReport rep = mm.prune(PruneMode::top1_no_router, PruneThresholds{}, calib);
        const int64_t after = mm.count_params().total;
        CHECK(before - after == rep.params_removed);
        const int64_t d = cfg.d_model, r = cfg.lora_rank, n = cfg.n_experts;
        const int64_t per_layer = (n - 1) * (r * d + d * r) + n * d;
        CHECK(rep.params_removed == per_layer * cfg.n_blocks * 4);
        mm.for_each_saml([&](SamlLayer & l) {
            CHECK(l.mode == SamlMode::collapsed_single_lora);
        });
    }
}
