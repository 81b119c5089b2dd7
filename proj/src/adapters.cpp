#include "saml/adapters.hpp"

#include <cmath>

#include <fmt/format.h>

#include "saml/error.hpp"

namespace saml {

LoraModule LoraModule::init(const std::string & name, int d, int k, int r, float alpha, SeededRng & rng) {
    if (r < 1 || r > std::min(d, k)) {
        throw ConfigError(fmt::format("lora rank {} outside [1, min({}, {})]", r, d, k));
    }
    LoraModule m;
    Tensor a(r, k);
    rng.fill_normal(a, 0.02f);
    m.a = Parameter(name + ".a", std::move(a));
    m.b = Parameter(name + ".b", Tensor::zeros(d, r));
    m.alpha = alpha;
    return m;
}

LoraModule LoraModule::clone(const std::string & name) const {
    LoraModule m;
    m.a = Parameter(name + ".a", a.value, a.trainable);
    m.b = Parameter(name + ".b", b.value, b.trainable);
    m.alpha = alpha;
    return m;
}

Value LoraModule::forward_delta(Tape & t, Value x) const {
    auto * self = const_cast<LoraModule *>(this);
    Value u = t.matmul_nt(x, t.param(self->a));
    Value y = t.matmul_nt(u, t.param(self->b));
    return t.scale(y, delta_scale());
}

Tensor LoraModule::materialize_delta() const {
    return scaled(matmul(b.value, a.value), delta_scale());
}

Value lora_forward(Tape & t, LoraModule & m, const Tensor & w0, Value x) {
    if (w0.rows() != m.out_dim() || w0.cols() != m.in_dim()) {
        throw ShapeError(fmt::format("lora_forward: base {} vs lora [{}x{}] rank {}",
                                     w0.shape_str(), m.out_dim(), m.in_dim(), m.rank()));
    }
    Value base = t.matmul_nt(x, t.constant(w0));
    return t.add(base, m.forward_delta(t, x));
}

Router Router::init(const std::string & name, int n, int k) {
    Router r;
    r.w_g = Parameter(name + ".router", Tensor::zeros(n, k));
    return r;
}

Value route(Tape & t, Router & r, Value x) {
    return t.softmax_rows(t.matmul_nt(x, t.param(r.w_g)));
}

Tensor route_plain(const Router & r, const Tensor & x) {
    return softmax_rows_plain(matmul_nt(x, r.w_g.value));
}

void BaseWeight::quantize(int block_size, CodebookId codebook) {
    if (quantized()) {
        throw ValidationError("base weight is already quantized");
    }
    q = quantize_blockwise(fp32, block_size, codebook);
    fp32 = dequantize(*q);
}

const char * saml_mode_name(SamlMode m) {
    switch (m) {
        case SamlMode::full: return "full";
        case SamlMode::collapsed_single_lora: return "collapsed_single_lora";
        case SamlMode::top1_with_router: return "top1_with_router";
    }
    return "?";
}

SamlMode saml_mode_from_name(const std::string & s) {
    if (s == "full") return SamlMode::full;
    if (s == "collapsed_single_lora") return SamlMode::collapsed_single_lora;
    if (s == "top1_with_router") return SamlMode::top1_with_router;
    throw FormatError(fmt::format("unknown saml mode '{}'", s));
}

SamlLayer SamlLayer::init(const std::string & name, Tensor base_w, int n_experts,
                          int rank, float alpha, SeededRng & rng) {
    if (n_experts < 1) {
        throw ConfigError(fmt::format("saml layer needs at least one expert, got {}", n_experts));
    }
    SamlLayer l;
    l.name = name;
    const int d = base_w.rows();
    const int k = base_w.cols();
    l.base.fp32 = std::move(base_w);
    l.experts.reserve(n_experts);
    for (int i = 0; i < n_experts; ++i) {
        l.experts.push_back(LoraModule::init(fmt::format("{}.expert{}", name, i), d, k, rank, alpha, rng));
    }
    l.router = Router::init(name, n_experts, k);
    return l;
}

Value SamlLayer::forward(Tape & t, Value x, RoutingStatsAccumulator * obs) {
    if (t.value(x).cols() != in_dim()) {
        throw ShapeError(fmt::format("saml layer {}: input {} vs weight [{}x{}]",
                                     name, t.value(x).shape_str(), out_dim(), in_dim()));
    }
    Value base = t.matmul_nt(x, t.constant(this->base.fp32));
    const float s = alpha() / rank();

    switch (mode) {
        case SamlMode::full: {
            Value gates = route(t, *router, x);
            if (obs != nullptr) {
                obs->add_gates(t.value(gates));
            }
            // mixed A: sum_i g_i (x A_i^T), then mixed B the same way
            Value u;
            for (int i = 0; i < n_experts(); ++i) {
                Value ui = t.gate_scale(t.matmul_nt(x, t.param(experts[i].a)), gates, i);
                u = i == 0 ? ui : t.add(u, ui);
            }
            Value y;
            for (int i = 0; i < n_experts(); ++i) {
                Value yi = t.gate_scale(t.matmul_nt(u, t.param(experts[i].b)), gates, i);
                y = i == 0 ? yi : t.add(y, yi);
            }
            return t.add(base, t.scale(y, s));
        }
        case SamlMode::collapsed_single_lora: {
            return t.add(base, experts[0].forward_delta(t, x));
        }
        case SamlMode::top1_with_router: {
            Value gates = route(t, *router, x);
            if (obs != nullptr) {
                obs->add_gates(t.value(gates));
            }
            if (top1_renormalize) {
                return t.add(base, experts[0].forward_delta(t, x));
            }
            // the dominant expert keeps its original n-way gate, applied on
            // both factors: g_d^2 * B_d A_d x
            Value u = t.gate_scale(t.matmul_nt(x, t.param(experts[0].a)), gates, dominant_expert);
            Value y = t.gate_scale(t.matmul_nt(u, t.param(experts[0].b)), gates, dominant_expert);
            return t.add(base, t.scale(y, s));
        }
    }
    throw Error("unreachable saml mode");
}

int64_t SamlLayer::param_count() const {
    int64_t n = 0;
    for (const auto & e : experts) {
        n += e.param_count();
    }
    if (router.has_value()) {
        n += router->w_g.value.numel();
    }
    return n;
}

std::vector<Parameter *> SamlLayer::parameters() {
    std::vector<Parameter *> out = expert_parameters();
    for (Parameter * p : router_parameters()) {
        out.push_back(p);
    }
    return out;
}

std::vector<Parameter *> SamlLayer::router_parameters() {
    std::vector<Parameter *> out;
    if (router.has_value()) {
        out.push_back(&router->w_g);
    }
    return out;
}

std::vector<Parameter *> SamlLayer::expert_parameters() {
    std::vector<Parameter *> out;
    for (auto & e : experts) {
        out.push_back(&e.a);
        out.push_back(&e.b);
    }
    return out;
}

Value saml_forward(Tape & t, SamlLayer & layer, Value x, RoutingStatsAccumulator * obs) {
    if (layer.mode != SamlMode::full) {
        throw ValidationError(fmt::format("saml_forward: layer {} is in mode {}, expected full",
                                          layer.name, saml_mode_name(layer.mode)));
    }
    return layer.forward(t, x, obs);
}

Tensor saml_forward_reference(const SamlLayer & layer, const Tensor & x) {
    if (layer.mode != SamlMode::full) {
        throw ValidationError("saml_forward_reference: layer must be in full mode");
    }
    const Tensor gates = route_plain(*layer.router, x);
    Tensor out = matmul_nt(x, layer.base.fp32);
    const int n = layer.n_experts();
    const float s = layer.alpha() / layer.rank();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            // B_i (A_j x) per token, weighted by g_i g_j
            Tensor u = matmul_nt(x, layer.experts[j].a.value);
            Tensor y = matmul_nt(u, layer.experts[i].b.value);
            for (int r = 0; r < x.rows(); ++r) {
                const float w = s * gates.at(r, i) * gates.at(r, j);
                for (int c = 0; c < out.cols(); ++c) {
                    out.at(r, c) += w * y.at(r, c);
                }
            }
        }
    }
    return out;
}

Tensor per_expert_mixture(const SamlLayer & layer, const Tensor & x) {
    const Tensor gates = route_plain(*layer.router, x);
    Tensor out = matmul_nt(x, layer.base.fp32);
    const float s = layer.alpha() / layer.rank();
    for (int i = 0; i < layer.n_experts(); ++i) {
        Tensor u = matmul_nt(x, layer.experts[i].a.value);
        Tensor y = matmul_nt(u, layer.experts[i].b.value);
        for (int r = 0; r < x.rows(); ++r) {
            const float w = s * gates.at(r, i);
            for (int c = 0; c < out.cols(); ++c) {
                out.at(r, c) += w * y.at(r, c);
            }
        }
    }
    return out;
}

void RoutingStatsAccumulator::add_gates(const Tensor & gates) {
    if (gate_sum_.empty()) {
        gate_sum_.assign(gates.cols(), 0.0);
        argmax_count_.assign(gates.cols(), 0);
    } else if (static_cast<int>(gate_sum_.size()) != gates.cols()) {
        throw ShapeError(fmt::format("routing stats: expected {} experts, got {}",
                                     gate_sum_.size(), gates.cols()));
    }
    for (int i = 0; i < gates.rows(); ++i) {
        int arg = 0;
        double entropy = 0.0;
        for (int j = 0; j < gates.cols(); ++j) {
            const double gv = gates.at(i, j);
            gate_sum_[j] += gv;
            if (gv > gates.at(i, arg)) {
                arg = j;
            }
            if (gv > 0.0) {
                entropy -= gv * std::log(gv);
            }
        }
        argmax_count_[arg] += 1;
        entropy_sum_ += entropy;
        n_ += 1;
    }
}

RoutingStats RoutingStatsAccumulator::finish() const {
    if (n_ == 0) {
        throw ValidationError("routing stats: empty calibration set");
    }
    RoutingStats s;
    s.n_inputs = n_;
    s.mean_gate.resize(gate_sum_.size());
    int dom = 0;
    for (size_t j = 0; j < gate_sum_.size(); ++j) {
        s.mean_gate[j] = static_cast<float>(gate_sum_[j] / n_);
        if (s.mean_gate[j] > s.mean_gate[dom]) {
            dom = static_cast<int>(j);
        }
    }
    s.dominant_expert = dom;
    s.top1_fraction = static_cast<float>(argmax_count_[dom]) / n_;
    s.mean_entropy = static_cast<float>(entropy_sum_ / n_);
    return s;
}

RoutingStats collect_routing_stats(SamlLayer & layer, const Tensor & calibration_inputs) {
    if (calibration_inputs.rows() < 1) {
        throw ValidationError("collect_routing_stats: empty calibration set");
    }
    if (!layer.router.has_value()) {
        throw ValidationError(fmt::format("collect_routing_stats: layer {} has no router", layer.name));
    }
    RoutingStatsAccumulator acc;
    acc.add_gates(route_plain(*layer.router, calibration_inputs));
    return acc.finish();
}

const char * layer_health_name(LayerHealth h) {
    switch (h) {
        case LayerHealth::collapsed: return "collapsed";
        case LayerHealth::imbalanced: return "imbalanced";
        case LayerHealth::healthy: return "healthy";
    }
    return "?";
}

LayerHealth detect_collapse(const RoutingStats & stats, float collapse_threshold, float imbalance_threshold) {
    for (float th : {collapse_threshold, imbalance_threshold}) {
        if (!(th > 0.0f && th <= 1.0f)) {
            throw ValidationError(fmt::format("detect_collapse: threshold {} outside (0,1]", th));
        }
    }
    const float dom = stats.mean_gate.at(stats.dominant_expert);
    if (dom >= collapse_threshold) {
        return LayerHealth::collapsed;
    }
    if (dom >= imbalance_threshold) {
        return LayerHealth::imbalanced;
    }
    return LayerHealth::healthy;
}

const char * prune_mode_name(PruneMode m) {
    switch (m) {
        case PruneMode::collapse_prune: return "collapse_prune";
        case PruneMode::top1_with_router: return "top1_with_router";
        case PruneMode::top1_no_router: return "top1_no_router";
    }
    return "?";
}

PruneMode prune_mode_from_name(const std::string & s) {
    if (s == "collapse" || s == "collapse_prune") return PruneMode::collapse_prune;
    if (s == "top1-router" || s == "top1_with_router") return PruneMode::top1_with_router;
    if (s == "top1" || s == "top1_no_router") return PruneMode::top1_no_router;
    throw ConfigError(fmt::format("unknown prune mode '{}'", s));
}

LayerPruneResult prune_layer(const SamlLayer & layer, PruneMode mode, const RoutingStats & stats) {
    if (layer.pruned()) {
        throw ValidationError(fmt::format("prune_layer: layer {} is already pruned ({})",
                                          layer.name, saml_mode_name(layer.mode)));
    }
    if (static_cast<int>(stats.mean_gate.size()) != layer.n_experts()) {
        throw ShapeError(fmt::format("prune_layer: stats cover {} experts, layer has {}",
                                     stats.mean_gate.size(), layer.n_experts()));
    }
    const int dom = stats.dominant_expert;
    const int64_t before = layer.param_count();

    LayerPruneResult res;
    res.layer.name = layer.name;
    res.layer.base = layer.base;
    res.layer.top1_renormalize = layer.top1_renormalize;
    res.layer.experts.push_back(layer.experts[dom].clone(fmt::format("{}.expert0", layer.name)));
    res.layer.dominant_expert = dom;
    switch (mode) {
        case PruneMode::collapse_prune:
        case PruneMode::top1_no_router:
            res.layer.mode = SamlMode::collapsed_single_lora;
            break;
        case PruneMode::top1_with_router:
            res.layer.mode = SamlMode::top1_with_router;
            res.layer.router = layer.router;
            break;
    }
    res.params_removed = before - res.layer.param_count();
    return res;
}

std::vector<LoraModule> init_experts_from_loras(const std::vector<LoraModule> & donors) {
    if (donors.empty()) {
        throw ValidationError("init_experts_from_loras: no donors");
    }
    for (size_t i = 1; i < donors.size(); ++i) {
        if (donors[i].in_dim() != donors[0].in_dim() || donors[i].out_dim() != donors[0].out_dim() ||
            donors[i].rank() != donors[0].rank()) {
            throw ShapeError(fmt::format(
                "init_experts_from_loras: donor {} is [{}x{}] rank {}, donor 0 is [{}x{}] rank {}",
                i, donors[i].out_dim(), donors[i].in_dim(), donors[i].rank(),
                donors[0].out_dim(), donors[0].in_dim(), donors[0].rank()));
        }
    }
    std::vector<LoraModule> experts;
    experts.reserve(donors.size());
    for (size_t i = 0; i < donors.size(); ++i) {
        experts.push_back(donors[i].clone(fmt::format("expert{}", i)));
    }
    return experts;
}

} // namespace saml
