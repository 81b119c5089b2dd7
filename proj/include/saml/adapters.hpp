#pragma once

#include <optional>
#include <string>
#include <vector>

#include "saml/quant.hpp"
#include "saml/rng.hpp"
#include "saml/tape.hpp"

namespace saml {

/// Low-rank delta for a frozen [d x k] weight. The contribution to the
/// forward pass is (alpha / r) * B * A * x.
struct LoraModule {
    Parameter a; // [r x k]
    Parameter b; // [d x r]
    float alpha = 0.0f;

    int rank() const { return a.value.rows(); }
    int in_dim() const { return a.value.cols(); }
    int out_dim() const { return b.value.rows(); }
    float delta_scale() const { return alpha / rank(); }
    int64_t param_count() const { return a.value.numel() + b.value.numel(); }

    // Standard zero-delta start: a ~ N(0, 0.02^2), b = 0.
    static LoraModule init(const std::string & name, int d, int k, int r, float alpha, SeededRng & rng);
    LoraModule clone(const std::string & name) const;

    // name + (alpha / r) * (x A^T) B^T added on top of `base`
    Value forward_delta(Tape & t, Value x) const;

    // Dense delta matrix (alpha / r) * B * A, for oracle-style checks.
    Tensor materialize_delta() const;
};

// x is a row vector (or a matrix of row vectors); returns x W0^T + delta.
Value lora_forward(Tape & t, LoraModule & m, const Tensor & w0, Value x);

struct Router {
    Parameter w_g; // [n x k]
    int n_experts() const { return w_g.value.rows(); }

    static Router init(const std::string & name, int n, int k);
};

// softmax(x W_g^T), one gate row per input row.
Value route(Tape & t, Router & r, Value x);
Tensor route_plain(const Router & r, const Tensor & x);

/// Frozen base weight, kept in FP32 with an optional packed 4-bit form.
/// When quantized, `fp32` holds the dequantized cache used for compute.
struct BaseWeight {
    Tensor fp32;
    std::optional<QuantizedTensor> q;

    bool quantized() const { return q.has_value(); }
    void quantize(int block_size, CodebookId codebook);
    int rows() const { return fp32.rows(); }
    int cols() const { return fp32.cols(); }
};

enum class SamlMode {
    full,
    collapsed_single_lora,
    top1_with_router,
};

const char * saml_mode_name(SamlMode m);
SamlMode saml_mode_from_name(const std::string & s);

/// Records gate matrices observed during forward passes.
class RoutingStatsAccumulator;

/// Frozen base weight plus a router and n LoRA experts mixed by soft
/// routing: h = W0 x + (alpha/r) (sum_i g_i B_i)(sum_i g_i A_i) x.
struct SamlLayer {
    std::string name;
    BaseWeight base; // [d x k]
    std::vector<LoraModule> experts;
    std::optional<Router> router;
    SamlMode mode = SamlMode::full;
    int dominant_expert = -1;     // kept expert in top1 modes
    bool top1_renormalize = false; // true: surviving gate fixed at 1

    int in_dim() const { return base.cols(); }
    int out_dim() const { return base.rows(); }
    int n_experts() const { return static_cast<int>(experts.size()); }
    float alpha() const { return experts.at(0).alpha; }
    int rank() const { return experts.at(0).rank(); }
    bool pruned() const { return mode != SamlMode::full; }

    static SamlLayer init(const std::string & name, Tensor base_w, int n_experts,
                          int rank, float alpha, SeededRng & rng);

    // Differentiable forward for the current mode; x rows are token features.
    Value forward(Tape & t, Value x, RoutingStatsAccumulator * obs = nullptr);

    int64_t param_count() const; // routers + experts, excluding the base
    std::vector<Parameter *> parameters();
    std::vector<Parameter *> router_parameters();
    std::vector<Parameter *> expert_parameters();
};

// Full-mode forward; throws on a pruned layer.
Value saml_forward(Tape & t, SamlLayer & layer, Value x, RoutingStatsAccumulator * obs = nullptr);

// The multiply-before-add expansion sum_i sum_j g_i g_j B_i (A_j x),
// computed without the tape. Slow; used as an equivalence oracle.
Tensor saml_forward_reference(const SamlLayer & layer, const Tensor & x);

// Per-expert mixture sum_i g_i B_i A_i x, which the mixing rule above
// does NOT equal in general.
Tensor per_expert_mixture(const SamlLayer & layer, const Tensor & x);

struct RoutingStats {
    std::vector<float> mean_gate;
    float mean_entropy = 0.0f;
    float top1_fraction = 0.0f;
    int dominant_expert = -1;
    int64_t n_inputs = 0;
};

class RoutingStatsAccumulator {
public:
    void add_gates(const Tensor & gates); // [T x n]
    RoutingStats finish() const;
    bool empty() const { return n_ == 0; }

private:
    std::vector<double> gate_sum_;
    std::vector<int64_t> argmax_count_;
    double entropy_sum_ = 0.0;
    int64_t n_ = 0;
};

RoutingStats collect_routing_stats(SamlLayer & layer, const Tensor & calibration_inputs);

enum class LayerHealth { collapsed, imbalanced, healthy };

const char * layer_health_name(LayerHealth h);

LayerHealth detect_collapse(const RoutingStats & stats,
                            float collapse_threshold = 0.99f,
                            float imbalance_threshold = 0.90f);

enum class PruneMode {
    collapse_prune,    // drop non-dominant experts and the router, gate = 1
    top1_with_router,  // keep the dominant expert and the full router
    top1_no_router,    // keep the dominant expert only, gate = 1
};

const char * prune_mode_name(PruneMode m);
PruneMode prune_mode_from_name(const std::string & s);

struct LayerPruneResult {
    SamlLayer layer;
    int64_t params_removed = 0;
};

LayerPruneResult prune_layer(const SamlLayer & layer, PruneMode mode, const RoutingStats & stats);

// Deep copies; training the result never aliases donor storage.
std::vector<LoraModule> init_experts_from_loras(const std::vector<LoraModule> & donors);

} // namespace saml
