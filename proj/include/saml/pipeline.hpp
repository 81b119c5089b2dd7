#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "saml/checkpoint.hpp"
#include "saml/corpus.hpp"
#include "saml/model.hpp"

namespace saml {

struct TrainConfig {
    int steps = 1200;
    int batch_size = 16;
    OptimConfig optim;
    int interleave_period = 1; // batches between router/expert alternation
    int eval_every = 100;
    bool allow_fp32_base = false;

    void validate() const;
};

/// Line-delimited JSON metrics, one record per event. Records carry no
/// wall-clock fields, so identical runs produce identical files.
class MetricsSink {
public:
    MetricsSink() = default;
    explicit MetricsSink(const std::string & path);

    void record(const nlohmann::json & event);
    bool active() const { return out_ != nullptr; }

private:
    std::shared_ptr<std::ofstream> out_;
};

struct SpeakerMetrics {
    int speaker_id = -1;
    double cross_entropy = 0.0;
    double token_error_rate = 0.0;
    int n_utterances = 0;
};

struct LayerRouting {
    std::string layer;
    RoutingStats stats;
};

struct EvalReport {
    std::vector<SpeakerMetrics> per_speaker;
    double mean_cross_entropy = 0.0;   // arithmetic mean over speakers
    double mean_token_error_rate = 0.0;
    std::vector<LayerRouting> routing;
    ParamCounts params;
    uint64_t seed = 0;

    nlohmann::json to_json() const;
};

// Observer invoked after backward and before the optimizer step.
using TrainObserver = std::function<void(int step, const std::string & phase, TinyTransformer & m)>;

/// Stage 1: block-wise NF4 quantization of the base weights plus the
/// compression record; tags the model "stage1".
CompressionSummary stage1(TinyTransformer & m);

/// Stage 2: joint interleaved training of routers and experts on the
/// pretraining speakers. Keeps the best-dev parameters.
void stage2_pretrain(TinyTransformer & m, const SyntheticCorpus & corpus,
                     const std::vector<int> & speakers, const TrainConfig & cfg,
                     MetricsSink * sink = nullptr, const TrainObserver & observer = {});

/// Stage 3: adaptation on a single held-out speaker's train split.
void stage3_adapt(TinyTransformer & m, const SyntheticCorpus & corpus, int speaker,
                  const TrainConfig & cfg, MetricsSink * sink = nullptr);

EvalReport evaluate(TinyTransformer & m, const SyntheticCorpus & corpus, Split split,
                    const std::vector<int> & speakers);

struct SweepRow {
    int n_experts = 0;
    double dev_cross_entropy = 0.0;
    double dev_token_error_rate = 0.0;
    int64_t trainable_params = 0;
};

/// One full stage-1 + stage-2 run per expert count, identical seeds.
std::vector<SweepRow> sweep_experts(const std::vector<int> & expert_counts,
                                    const ModelConfig & model_cfg, const SyntheticCorpus & corpus,
                                    const TrainConfig & train_cfg, MetricsSink * sink = nullptr);

/// CSV rows: speaker_id followed by the mean-pooled final-block features.
void export_embeddings(TinyTransformer & m, const SyntheticCorpus & corpus, Split split,
                       const std::vector<int> & speakers, const std::string & path);

/// Mean inter-speaker centroid distance divided by mean intra-speaker
/// spread; higher means clearer separation.
double embedding_separation(const std::vector<std::pair<int, std::vector<float>>> & rows);

// Batch assembly helpers shared by training, eval and calibration.
TokenBatch batch_of(const std::vector<const Utterance *> & utts);
std::vector<int> labels_of(const std::vector<const Utterance *> & utts);

double mean_loss(TinyTransformer & m, const std::vector<const Utterance *> & utts,
                 int eval_batch = 32);

} // namespace saml
