#include "saml/model.hpp"

#include <cmath>
#include <functional>

#include <fmt/format.h>

#include "saml/error.hpp"

namespace saml {

void ModelConfig::validate() const {
    auto positive = [](int v, const char * field) {
        if (v < 1) {
            throw ConfigError(fmt::format("model config: {} must be positive, got {}", field, v));
        }
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(n_blocks, "n_blocks");
    positive(ff_hidden, "ff_hidden");
    positive(n_experts, "n_experts");
    positive(lora_rank, "lora_rank");
    positive(block_size, "block_size");
    if (d_model % n_heads != 0) {
        throw ConfigError(fmt::format("model config: d_model {} not divisible by n_heads {}", d_model, n_heads));
    }
    if (lora_rank > d_model) {
        throw ConfigError(fmt::format("model config: lora_rank {} exceeds d_model {}", lora_rank, d_model));
    }
    if (!(lora_alpha > 0.0f)) {
        throw ConfigError(fmt::format("model config: lora_alpha must be positive, got {}", lora_alpha));
    }
}

TokenBatch TokenBatch::of(const std::vector<std::vector<int>> & seqs) {
    TokenBatch tb;
    tb.batch = static_cast<int>(seqs.size());
    tb.len = seqs.empty() ? 0 : static_cast<int>(seqs[0].size());
    tb.ids.reserve(static_cast<size_t>(tb.batch) * tb.len);
    for (const auto & s : seqs) {
        if (static_cast<int>(s.size()) != tb.len) {
            throw ShapeError("token batch: ragged sequence lengths");
        }
        tb.ids.insert(tb.ids.end(), s.begin(), s.end());
    }
    return tb;
}

Value AttnProjection::forward(Tape & t, Value x, RoutingObserver * obs) {
    Value out;
    if (is_saml) {
        RoutingStatsAccumulator * acc = obs != nullptr ? obs->slot(saml.name) : nullptr;
        out = saml.forward(t, x, acc);
    } else {
        out = t.matmul_nt(x, t.constant(plain.fp32));
    }
    return t.add_row(out, t.param(bias));
}

Value FeedForwardLinear::forward(Tape & t, Value x) {
    Value base = t.matmul_nt(x, t.constant(w.fp32));
    Value out = t.add(base, lora.forward_delta(t, x));
    return t.add_row(out, t.param(bias));
}

namespace {

Tensor normal_init(SeededRng rng, int rows, int cols, float stddev) {
    Tensor t(rows, cols);
    rng.fill_normal(t, stddev);
    return t;
}

AttnProjection make_projection(const ModelConfig & cfg, const std::string & name, bool is_saml,
                               const SeededRng & root) {
    AttnProjection p;
    p.name = name;
    p.is_saml = is_saml;
    const float std = 1.0f / std::sqrt(static_cast<float>(cfg.d_model));
    Tensor w = normal_init(root.fork(name + ".base"), cfg.d_model, cfg.d_model, std);
    if (is_saml) {
        SeededRng r = root.fork(name + ".experts");
        p.saml = SamlLayer::init(name, std::move(w), cfg.n_experts, cfg.lora_rank, cfg.lora_alpha, r);
    } else {
        p.plain.fp32 = std::move(w);
    }
    p.bias = Parameter(name + ".bias", Tensor::zeros(1, cfg.d_model), false);
    return p;
}

FeedForwardLinear make_ff(const ModelConfig & cfg, const std::string & name, int out_dim, int in_dim,
                          const SeededRng & root) {
    FeedForwardLinear f;
    f.name = name;
    const float std = 1.0f / std::sqrt(static_cast<float>(in_dim));
    f.w.fp32 = normal_init(root.fork(name + ".weight"), out_dim, in_dim, std);
    f.bias = Parameter(name + ".bias", Tensor::zeros(1, out_dim), false);
    SeededRng r = root.fork(name + ".lora");
    f.lora = LoraModule::init(name + ".lora", out_dim, in_dim, cfg.lora_rank, cfg.lora_alpha, r);
    return f;
}

Parameter ln_param(const std::string & name, int n, float value) {
    return Parameter(name, Tensor::full(1, n, value), false);
}

} // namespace

TinyTransformer TinyTransformer::build(const ModelConfig & cfg) {
    return build_skeleton(cfg, {});
}

TinyTransformer TinyTransformer::build_skeleton(
    const ModelConfig & cfg, const std::map<std::string, std::pair<SamlMode, int>> & modes) {
    cfg.validate();
    TinyTransformer m;
    m.cfg_ = cfg;
    const SeededRng root(cfg.seed);

    m.embedding.fp32 = normal_init(root.fork("embedding"), cfg.vocab_size, cfg.d_model, 1.0f);

    for (int bi = 0; bi < cfg.n_blocks; ++bi) {
        auto blk = std::make_unique<TransformerBlock>();
        const std::string prefix = fmt::format("block{}.", bi);
        blk->ln1_gamma = ln_param(prefix + "ln1.gamma", cfg.d_model, 1.0f);
        blk->ln1_beta = ln_param(prefix + "ln1.beta", cfg.d_model, 0.0f);
        blk->ln2_gamma = ln_param(prefix + "ln2.gamma", cfg.d_model, 1.0f);
        blk->ln2_beta = ln_param(prefix + "ln2.beta", cfg.d_model, 0.0f);
        const char * proj_names[4] = {"q", "k", "v", "o"};
        AttnProjection * projs[4] = {&blk->q, &blk->k, &blk->v, &blk->o};
        for (int pi = 0; pi < 4; ++pi) {
            *projs[pi] = make_projection(cfg, prefix + "attn." + proj_names[pi], cfg.saml_targets[pi], root);
            if (projs[pi]->is_saml) {
                auto it = modes.find(projs[pi]->name);
                if (it != modes.end() && it->second.first != SamlMode::full) {
                    // restore the pruned shape: one expert, router only for top1
                    SamlLayer & l = projs[pi]->saml;
                    l.experts.resize(1);
                    l.experts[0] = l.experts[0].clone(l.name + ".expert0");
                    l.mode = it->second.first;
                    l.dominant_expert = it->second.second;
                    if (l.mode == SamlMode::collapsed_single_lora) {
                        l.router.reset();
                    }
                }
            }
        }
        blk->ff1 = make_ff(cfg, prefix + "ff1", cfg.ff_hidden, cfg.d_model, root);
        blk->ff2 = make_ff(cfg, prefix + "ff2", cfg.d_model, cfg.ff_hidden, root);
        m.blocks.push_back(std::move(blk));
    }

    m.lnf_gamma = ln_param("ln_f.gamma", cfg.d_model, 1.0f);
    m.lnf_beta = ln_param("ln_f.beta", cfg.d_model, 0.0f);
    m.head_w.fp32 = normal_init(root.fork("head.weight"), cfg.vocab_size, cfg.d_model,
                                1.0f / std::sqrt(static_cast<float>(cfg.d_model)));
    m.head_bias = Parameter("head.bias", Tensor::zeros(1, cfg.vocab_size), false);
    return m;
}

TinyTransformer TinyTransformer::clone() const {
    TinyTransformer m;
    m.cfg_ = cfg_;
    m.meta = meta;
    m.embedding = embedding;
    m.blocks.reserve(blocks.size());
    for (const auto & b : blocks) {
        m.blocks.push_back(std::make_unique<TransformerBlock>(*b));
    }
    m.lnf_gamma = lnf_gamma;
    m.lnf_beta = lnf_beta;
    m.head_w = head_w;
    m.head_bias = head_bias;
    m.quantized_adapters = quantized_adapters;
    return m;
}

Value TinyTransformer::forward(Tape & t, const TokenBatch & tokens, RoutingObserver * obs) {
    if (tokens.batch < 1 || tokens.len < 1) {
        throw ShapeError("forward: empty token batch");
    }
    for (int id : tokens.ids) {
        if (id < 0 || id >= cfg_.vocab_size) {
            throw IndexError(fmt::format("forward: token id {} out of range [0,{})", id, cfg_.vocab_size));
        }
    }
    Value x = t.embedding(t.constant(embedding.fp32), tokens.ids);
    for (auto & blk : blocks) {
        Value h = t.layer_norm(x, t.param(blk->ln1_gamma), t.param(blk->ln1_beta));
        Value q = blk->q.forward(t, h, obs);
        Value k = blk->k.forward(t, h, obs);
        Value v = blk->v.forward(t, h, obs);
        std::vector<Value> ctx;
        ctx.reserve(tokens.batch);
        for (int b = 0; b < tokens.batch; ++b) {
            Value qb = t.slice_rows(q, b * tokens.len, tokens.len);
            Value kb = t.slice_rows(k, b * tokens.len, tokens.len);
            Value vb = t.slice_rows(v, b * tokens.len, tokens.len);
            ctx.push_back(t.attention(qb, kb, vb, cfg_.n_heads));
        }
        Value c = tokens.batch == 1 ? ctx[0] : t.concat_rows(ctx);
        Value o = blk->o.forward(t, c, obs);
        x = t.add(x, o);

        Value h2 = t.layer_norm(x, t.param(blk->ln2_gamma), t.param(blk->ln2_beta));
        Value f = blk->ff2.forward(t, t.gelu(blk->ff1.forward(t, h2)));
        x = t.add(x, f);
    }
    x = t.layer_norm(x, t.param(lnf_gamma), t.param(lnf_beta));
    std::vector<Value> pooled;
    pooled.reserve(tokens.batch);
    for (int b = 0; b < tokens.batch; ++b) {
        pooled.push_back(t.mean_rows(t.slice_rows(x, b * tokens.len, tokens.len)));
    }
    Value p = tokens.batch == 1 ? pooled[0] : t.concat_rows(pooled);
    return t.add_row(t.matmul_nt(p, t.constant(head_w.fp32)), t.param(head_bias));
}

Tensor TinyTransformer::pooled_features(const TokenBatch & tokens) {
    // forward minus the classifier head
    Tape t;
    Value x = t.embedding(t.constant(embedding.fp32), tokens.ids);
    for (auto & blk : blocks) {
        Value h = t.layer_norm(x, t.param(blk->ln1_gamma), t.param(blk->ln1_beta));
        Value q = blk->q.forward(t, h, nullptr);
        Value k = blk->k.forward(t, h, nullptr);
        Value v = blk->v.forward(t, h, nullptr);
        std::vector<Value> ctx;
        for (int b = 0; b < tokens.batch; ++b) {
            Value qb = t.slice_rows(q, b * tokens.len, tokens.len);
            Value kb = t.slice_rows(k, b * tokens.len, tokens.len);
            Value vb = t.slice_rows(v, b * tokens.len, tokens.len);
            ctx.push_back(t.attention(qb, kb, vb, cfg_.n_heads));
        }
        Value c = tokens.batch == 1 ? ctx[0] : t.concat_rows(ctx);
        Value o = blk->o.forward(t, c, nullptr);
        x = t.add(x, o);
        Value h2 = t.layer_norm(x, t.param(blk->ln2_gamma), t.param(blk->ln2_beta));
        Value f = blk->ff2.forward(t, t.gelu(blk->ff1.forward(t, h2)));
        x = t.add(x, f);
    }
    x = t.layer_norm(x, t.param(lnf_gamma), t.param(lnf_beta));
    std::vector<Value> pooled;
    for (int b = 0; b < tokens.batch; ++b) {
        pooled.push_back(t.mean_rows(t.slice_rows(x, b * tokens.len, tokens.len)));
    }
    Value p = tokens.batch == 1 ? pooled[0] : t.concat_rows(pooled);
    return t.value(p);
}

bool TinyTransformer::base_quantized() const {
    return embedding.quantized();
}

void TinyTransformer::quantize_base() {
    if (base_quantized()) {
        throw ValidationError("quantize_base: base weights are already quantized");
    }
    double sq_err = 0.0;
    int64_t n = 0;
    int64_t fp32_bytes = 0, q_bytes = 0;
    auto quantize_one = [&](BaseWeight & w) {
        const Tensor original = w.fp32;
        w.quantize(cfg_.block_size, CodebookId::nf4);
        for (int64_t i = 0; i < original.numel(); ++i) {
            const double d = static_cast<double>(w.fp32[i]) - original[i];
            sq_err += d * d;
        }
        n += original.numel();
        fp32_bytes += original.numel() * 4;
        q_bytes += w.q->payload_bytes();
    };
    quantize_one(embedding);
    for (auto & blk : blocks) {
        for (AttnProjection * p : {&blk->q, &blk->k, &blk->v, &blk->o}) {
            quantize_one(p->base());
        }
        quantize_one(blk->ff1.w);
        quantize_one(blk->ff2.w);
    }
    quantize_one(head_w);

    CompressionSummary s;
    s.bits_per_weight = 4.0f + 32.0f / cfg_.block_size;
    s.payload_ratio = static_cast<double>(fp32_bytes) / static_cast<double>(q_bytes);
    s.rmse = std::sqrt(sq_err / static_cast<double>(n));
    meta.compression = s;
}

void TinyTransformer::quantize_adapters() {
    if (meta.adapters_quantized) {
        throw ValidationError("quantize_adapters: adapters are already quantized");
    }
    for (Parameter * p : trainable_params()) {
        QuantizedTensor q = quantize_blockwise(p->value, cfg_.block_size, CodebookId::nf4);
        p->value = dequantize(q);
        p->trainable = false;
        quantized_adapters.emplace(p->name, std::move(q));
    }
    meta.adapters_quantized = true;
}

ParamCounts TinyTransformer::count_params() const {
    ParamCounts c;
    auto * self = const_cast<TinyTransformer *>(this);
    auto add = [&](const std::string & component, int64_t n, bool trainable) {
        c.by_component[component] += n;
        c.total += n;
        if (trainable) {
            c.trainable += n;
        }
    };
    add("embedding", embedding.fp32.numel(), false);
    for (auto & blk : self->blocks) {
        for (AttnProjection * p : {&blk->q, &blk->k, &blk->v, &blk->o}) {
            add("attention_base", p->base().fp32.numel(), false);
            add("bias", p->bias.value.numel(), p->bias.trainable);
            if (p->is_saml) {
                if (p->saml.router.has_value()) {
                    Parameter & wg = p->saml.router->w_g;
                    add("router", wg.value.numel(), wg.trainable);
                }
                for (auto & e : p->saml.experts) {
                    add("expert", e.param_count(), e.a.trainable);
                }
            }
        }
        for (FeedForwardLinear * f : {&blk->ff1, &blk->ff2}) {
            add("ff_base", f->w.fp32.numel(), false);
            add("bias", f->bias.value.numel(), f->bias.trainable);
            add("ff_lora", f->lora.param_count(), f->lora.a.trainable);
        }
        add("layer_norm",
            blk->ln1_gamma.value.numel() + blk->ln1_beta.value.numel() +
            blk->ln2_gamma.value.numel() + blk->ln2_beta.value.numel(),
            false);
    }
    add("layer_norm", lnf_gamma.value.numel() + lnf_beta.value.numel(), false);
    add("head", head_w.fp32.numel(), false);
    add("bias", head_bias.value.numel(), head_bias.trainable);
    c.trainable_fraction = c.total > 0 ? static_cast<double>(c.trainable) / c.total : 0.0;
    return c;
}

CompressionSummary TinyTransformer::measure_compression() const {
    if (!base_quantized() || !meta.compression.has_value()) {
        throw ValidationError("measure_compression: base is not quantized");
    }
    return *meta.compression;
}

std::vector<Parameter *> TinyTransformer::trainable_params() {
    std::vector<Parameter *> out = expert_params();
    for (Parameter * p : router_params()) {
        out.push_back(p);
    }
    return out;
}

std::vector<Parameter *> TinyTransformer::expert_params() {
    std::vector<Parameter *> out;
    for (auto & blk : blocks) {
        for (AttnProjection * p : {&blk->q, &blk->k, &blk->v, &blk->o}) {
            if (p->is_saml) {
                for (Parameter * e : p->saml.expert_parameters()) {
                    out.push_back(e);
                }
            }
        }
        out.push_back(&blk->ff1.lora.a);
        out.push_back(&blk->ff1.lora.b);
        out.push_back(&blk->ff2.lora.a);
        out.push_back(&blk->ff2.lora.b);
    }
    return out;
}

std::vector<Parameter *> TinyTransformer::router_params() {
    std::vector<Parameter *> out;
    for (auto & blk : blocks) {
        for (AttnProjection * p : {&blk->q, &blk->k, &blk->v, &blk->o}) {
            if (p->is_saml) {
                for (Parameter * r : p->saml.router_parameters()) {
                    out.push_back(r);
                }
            }
        }
    }
    return out;
}

void TinyTransformer::for_each_saml(const std::function<void(SamlLayer &)> & fn) {
    for (auto & blk : blocks) {
        for (AttnProjection * p : {&blk->q, &blk->k, &blk->v, &blk->o}) {
            if (p->is_saml) {
                fn(p->saml);
            }
        }
    }
}

int TinyTransformer::count_saml_layers() const {
    int n = 0;
    const_cast<TinyTransformer *>(this)->for_each_saml([&](SamlLayer &) { ++n; });
    return n;
}

int TinyTransformer::count_ff_loras() const {
    return static_cast<int>(blocks.size()) * 2;
}

PruneReport TinyTransformer::prune(PruneMode mode, PruneThresholds th, const TokenBatch & calibration) {
    RoutingObserver obs;
    {
        Tape t;
        forward(t, calibration, &obs);
    }
    PruneReport report;
    for_each_saml([&](SamlLayer & layer) {
        auto it = obs.layers.find(layer.name);
        if (it == obs.layers.end() || it->second.empty()) {
            throw ValidationError(fmt::format("prune: no routing stats for layer {}", layer.name));
        }
        const RoutingStats stats = it->second.finish();
        const LayerHealth health = detect_collapse(stats, th.collapse, th.imbalance);
        if (health == LayerHealth::collapsed) {
            report.layers_collapsed.push_back(layer.name);
        } else if (health == LayerHealth::imbalanced) {
            report.layers_imbalanced.push_back(layer.name);
        }
        const bool apply = mode == PruneMode::collapse_prune ? health == LayerHealth::collapsed : true;
        if (apply) {
            LayerPruneResult res = prune_layer(layer, mode, stats);
            report.params_removed += res.params_removed;
            report.mode_applied.emplace_back(layer.name, saml_mode_name(res.layer.mode));
            layer = std::move(res.layer);
        } else {
            report.mode_applied.emplace_back(layer.name, "full");
        }
    });
    return report;
}

std::vector<TinyTransformer::Binding> TinyTransformer::tensor_bindings() {
    std::vector<Binding> out;
    auto base = [&](const std::string & name, BaseWeight & w) {
        out.push_back({name, &w, nullptr});
    };
    auto param = [&](Parameter & p) {
        out.push_back({p.name, nullptr, &p});
    };
    base("embedding", embedding);
    for (auto & blk : blocks) {
        param(blk->ln1_gamma);
        param(blk->ln1_beta);
        for (AttnProjection * p : {&blk->q, &blk->k, &blk->v, &blk->o}) {
            base(p->name + ".base", p->base());
            param(p->bias);
            if (p->is_saml) {
                if (p->saml.router.has_value()) {
                    param(p->saml.router->w_g);
                }
                for (auto & e : p->saml.experts) {
                    param(e.a);
                    param(e.b);
                }
            }
        }
        param(blk->ln2_gamma);
        param(blk->ln2_beta);
        for (FeedForwardLinear * f : {&blk->ff1, &blk->ff2}) {
            base(f->name + ".weight", f->w);
            param(f->bias);
            param(f->lora.a);
            param(f->lora.b);
        }
    }
    param(lnf_gamma);
    param(lnf_beta);
    base("head.weight", head_w);
    param(head_bias);
    return out;
}

} // namespace saml
