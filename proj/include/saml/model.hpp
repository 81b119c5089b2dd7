#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "saml/adapters.hpp"
#include "saml/optim.hpp"

namespace saml {

struct ModelConfig {
    int vocab_size = 32;
    int d_model = 64;
    int n_heads = 4;
    int n_blocks = 2;
    int ff_hidden = 128;
    int n_experts = 4;
    int lora_rank = 2;
    float lora_alpha = 2.0f; // defaults to the rank (scale factor 1)
    std::array<bool, 4> saml_targets{true, true, true, true}; // q, k, v, o
    int block_size = 64;
    uint64_t seed = 42;

    void validate() const; // names each offending field
};

/// Integer token ids laid out row-major, one sequence per row.
struct TokenBatch {
    int batch = 0;
    int len = 0;
    std::vector<int> ids;

    int id(int b, int t) const { return ids[static_cast<size_t>(b) * len + t]; }
    static TokenBatch of(const std::vector<std::vector<int>> & seqs);
};

struct RoutingObserver {
    std::map<std::string, RoutingStatsAccumulator> layers;
    RoutingStatsAccumulator * slot(const std::string & name) { return &layers[name]; }
};

/// One attention projection: a SAML layer, or a plain frozen linear when
/// the projection is not in saml_targets.
struct AttnProjection {
    std::string name;
    bool is_saml = false;
    SamlLayer saml;
    BaseWeight plain;
    Parameter bias;

    Value forward(Tape & t, Value x, RoutingObserver * obs);
    BaseWeight & base() { return is_saml ? saml.base : plain; }
};

struct FeedForwardLinear {
    std::string name;
    BaseWeight w;
    Parameter bias;
    LoraModule lora;

    Value forward(Tape & t, Value x);
};

struct TransformerBlock {
    Parameter ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    AttnProjection q, k, v, o;
    FeedForwardLinear ff1, ff2;
};

struct ParamCounts {
    int64_t total = 0;
    int64_t trainable = 0;
    double trainable_fraction = 0.0;
    std::map<std::string, int64_t> by_component;
};

struct CompressionSummary {
    float bits_per_weight = 0.0f;
    double payload_ratio = 0.0; // fp32 bytes / quantized bytes, weight tensors only
    double rmse = 0.0;          // across all quantized weight tensors
};

struct ModelMeta {
    std::string stage = "init"; // init | stage1 | stage2 | stage3
    int speaker_id = -1;
    std::vector<int> pretrain_speakers;
    bool adapters_quantized = false;
    std::optional<CompressionSummary> compression;
};

struct PruneThresholds {
    float collapse = 0.99f;
    float imbalance = 0.90f;
};

struct PruneReport {
    std::vector<std::string> layers_collapsed;
    std::vector<std::string> layers_imbalanced;
    int64_t params_removed = 0;
    std::vector<std::pair<std::string, std::string>> mode_applied;
};

/// Encoder-classifier: token embedding, n_blocks of self-attention with
/// SAML projections plus feed-forward with single LoRA modules, then a
/// mean-pooled frozen classifier head. One label per sequence.
class TinyTransformer {
public:
    static TinyTransformer build(const ModelConfig & cfg);

    TinyTransformer clone() const;

    // logits [batch x vocab]
    Value forward(Tape & t, const TokenBatch & tokens, RoutingObserver * obs = nullptr);

    // Pooled pre-head features, one row per sequence. Runs its own tape.
    Tensor pooled_features(const TokenBatch & tokens);

    void quantize_base();     // NF4 on embeddings, attention/FF bases, head
    void quantize_adapters(); // NF4 on routers and expert/LoRA tensors, freezes them
    bool base_quantized() const;

    ParamCounts count_params() const;
    CompressionSummary measure_compression() const; // requires quantized base

    std::vector<Parameter *> trainable_params(); // routers + experts + FF LoRAs
    std::vector<Parameter *> expert_params();    // experts + FF LoRAs
    std::vector<Parameter *> router_params();

    void for_each_saml(const std::function<void(SamlLayer &)> & fn);
    int count_saml_layers() const;
    int count_ff_loras() const;

    // Applies the pruning policy using routing stats gathered on the
    // calibration batch. collapse_prune touches only collapsed layers;
    // the top1 modes apply to every routed layer.
    PruneReport prune(PruneMode mode, PruneThresholds th, const TokenBatch & calibration);

    // Deterministic name -> tensor table used by the checkpoint format.
    struct Binding {
        std::string name;
        BaseWeight * base = nullptr;
        Parameter * param = nullptr;
    };
    std::vector<Binding> tensor_bindings();

    const ModelConfig & config() const { return cfg_; }
    ModelMeta meta;

    BaseWeight embedding;
    std::vector<std::unique_ptr<TransformerBlock>> blocks;
    Parameter lnf_gamma, lnf_beta;
    BaseWeight head_w;
    Parameter head_bias;
    std::map<std::string, QuantizedTensor> quantized_adapters;

    // Rebuilds the layer skeleton for a checkpoint being loaded: expert
    // counts and router presence follow the recorded per-layer modes.
    static TinyTransformer build_skeleton(const ModelConfig & cfg,
                                          const std::map<std::string, std::pair<SamlMode, int>> & modes);

private:
    ModelConfig cfg_;
};

} // namespace saml
