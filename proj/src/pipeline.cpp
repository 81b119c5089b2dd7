#include "saml/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "saml/error.hpp"

namespace saml {

using nlohmann::json;

void TrainConfig::validate() const {
    if (steps < 0) {
        throw ConfigError(fmt::format("train config: steps {} must be >= 0", steps));
    }
    if (batch_size < 1) {
        throw ConfigError("train config: batch_size must be positive");
    }
    if (interleave_period < 1) {
        throw ConfigError("train config: interleave_period must be positive");
    }
    if (eval_every < 1) {
        throw ConfigError("train config: eval_every must be positive");
    }
    if (!(optim.lr > 0.0f)) {
        throw ConfigError("train config: learning rate must be positive");
    }
}

MetricsSink::MetricsSink(const std::string & path) : out_(std::make_shared<std::ofstream>(path)) {
    if (!*out_) {
        throw Error(fmt::format("cannot open '{}' for writing", path));
    }
}

void MetricsSink::record(const json & event) {
    if (out_ != nullptr) {
        *out_ << event.dump() << "\n";
        out_->flush();
    }
}

TokenBatch batch_of(const std::vector<const Utterance *> & utts) {
    if (utts.empty()) {
        throw ValidationError("empty utterance batch");
    }
    TokenBatch tb;
    tb.batch = static_cast<int>(utts.size());
    tb.len = static_cast<int>(utts[0]->tokens.size());
    tb.ids.reserve(static_cast<size_t>(tb.batch) * tb.len);
    for (const Utterance * u : utts) {
        if (static_cast<int>(u->tokens.size()) != tb.len) {
            throw ShapeError("utterances of different lengths in one batch");
        }
        tb.ids.insert(tb.ids.end(), u->tokens.begin(), u->tokens.end());
    }
    return tb;
}

std::vector<int> labels_of(const std::vector<const Utterance *> & utts) {
    std::vector<int> out;
    out.reserve(utts.size());
    for (const Utterance * u : utts) {
        out.push_back(u->label);
    }
    return out;
}

double mean_loss(TinyTransformer & m, const std::vector<const Utterance *> & utts, int eval_batch) {
    if (utts.empty()) {
        throw ValidationError("mean_loss: empty split");
    }
    double total = 0.0;
    size_t done = 0;
    while (done < utts.size()) {
        const size_t n = std::min<size_t>(eval_batch, utts.size() - done);
        std::vector<const Utterance *> chunk(utts.begin() + done, utts.begin() + done + n);
        Tape t;
        Value logits = m.forward(t, batch_of(chunk));
        Value loss = t.cross_entropy(logits, labels_of(chunk));
        total += static_cast<double>(t.value(loss).at(0, 0)) * n;
        done += n;
    }
    return total / utts.size();
}

namespace {

struct ParamSnapshot {
    std::vector<Tensor> values;

    static ParamSnapshot take(const std::vector<Parameter *> & params) {
        ParamSnapshot s;
        s.values.reserve(params.size());
        for (const Parameter * p : params) {
            s.values.push_back(p->value);
        }
        return s;
    }
    void restore(const std::vector<Parameter *> & params) const {
        for (size_t i = 0; i < params.size(); ++i) {
            params[i]->value = values[i];
        }
    }
};

void set_trainable(const std::vector<Parameter *> & params, bool trainable) {
    for (Parameter * p : params) {
        p->trainable = trainable;
    }
}

// Shared training loop for stages 2 and 3.
void train_adapters(TinyTransformer & m, const SyntheticCorpus & corpus,
                    const std::vector<const Utterance *> & train_utts,
                    const std::vector<const Utterance *> & dev_utts, const TrainConfig & cfg,
                    const std::string & stage, int speaker, MetricsSink * sink,
                    const TrainObserver & observer) {
    cfg.validate();
    if (train_utts.empty()) {
        throw ValidationError(fmt::format("{}: empty train split", stage));
    }
    if (m.meta.adapters_quantized) {
        throw ValidationError(fmt::format("{}: adapters are quantized and frozen", stage));
    }

    auto expert_set = m.expert_params();
    auto router_set = m.router_params();
    auto all_trainable = m.trainable_params();

    Optimizer opt(cfg.optim);
    SeededRng batch_rng = SeededRng(corpus.cfg.master_seed).fork(fmt::format("{}.batches.{}", stage, speaker));

    double best_dev = mean_loss(m, dev_utts);
    ParamSnapshot best = ParamSnapshot::take(all_trainable);
    int best_step = 0;

    std::vector<int> order(train_utts.size());
    for (size_t i = 0; i < order.size(); ++i) {
        order[i] = static_cast<int>(i);
    }
    size_t cursor = order.size(); // forces a shuffle on first use

    auto record = [&](int step, double train_loss, std::optional<double> dev_loss) {
        if (sink == nullptr || !sink->active()) {
            return;
        }
        json ev{{"stage", stage},
                {"step", step},
                {"speaker", speaker},
                {"loss", train_loss},
                {"seed", corpus.cfg.master_seed}};
        if (dev_loss.has_value()) {
            ev["dev_loss"] = *dev_loss;
        }
        sink->record(ev);
    };

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<const Utterance *> batch;
        batch.reserve(cfg.batch_size);
        for (int i = 0; i < cfg.batch_size; ++i) {
            if (cursor >= order.size()) {
                for (size_t j = order.size(); j > 1; --j) {
                    std::swap(order[j - 1], order[batch_rng.uniform_int(static_cast<int>(j))]);
                }
                cursor = 0;
            }
            batch.push_back(train_utts[order[cursor++]]);
        }

        // joint interleaved training: alternate which half of the adapter
        // parameters is trainable
        const bool expert_phase = (step / cfg.interleave_period) % 2 == 0;
        set_trainable(expert_set, expert_phase);
        set_trainable(router_set, !expert_phase);

        Tape t;
        Value logits = m.forward(t, batch_of(batch));
        Value loss = t.cross_entropy(logits, labels_of(batch));
        const double loss_v = t.value(loss).at(0, 0);
        if (!std::isfinite(loss_v)) {
            throw NumericError(fmt::format("{}: non-finite loss {} at step {}", stage, loss_v, step));
        }
        t.backward(loss);
        if (observer) {
            observer(step, expert_phase ? "experts" : "router", m);
        }
        opt.step(all_trainable);

        const bool last = step + 1 == cfg.steps;
        if ((step + 1) % cfg.eval_every == 0 || last) {
            const double dev = mean_loss(m, dev_utts);
            if (dev < best_dev) {
                best_dev = dev;
                best = ParamSnapshot::take(all_trainable);
                best_step = step + 1;
            }
            record(step + 1, loss_v, dev);
        } else {
            record(step + 1, loss_v, std::nullopt);
        }
    }

    best.restore(all_trainable);
    set_trainable(all_trainable, true);
    if (sink != nullptr && sink->active()) {
        sink->record(json{{"stage", stage},
                          {"event", "best_dev"},
                          {"speaker", speaker},
                          {"step", best_step},
                          {"dev_loss", best_dev},
                          {"seed", corpus.cfg.master_seed}});
    }
}

} // namespace

CompressionSummary stage1(TinyTransformer & m) {
    m.quantize_base(); // throws if already quantized
    m.meta.stage = "stage1";
    return m.measure_compression();
}

void stage2_pretrain(TinyTransformer & m, const SyntheticCorpus & corpus,
                     const std::vector<int> & speakers, const TrainConfig & cfg,
                     MetricsSink * sink, const TrainObserver & observer) {
    if (m.meta.stage != "stage1") {
        if (!(cfg.allow_fp32_base && m.meta.stage == "init")) {
            throw ValidationError(fmt::format(
                "stage2: model is tagged '{}'; expected 'stage1' (or 'init' with the fp32 flag)",
                m.meta.stage));
        }
    }
    if (speakers.empty()) {
        throw ValidationError("stage2: no pretraining speakers");
    }
    for (int s : speakers) {
        if (!corpus.is_pretrain_speaker(s)) {
            throw ValidationError(fmt::format(
                "stage2: speaker {} belongs to the adaptation set; pretraining and "
                "adaptation speakers must not overlap", s));
        }
    }

    std::vector<const Utterance *> train_utts, dev_utts;
    for (int s : speakers) {
        for (const Utterance * u : corpus.select(s, Split::train)) {
            train_utts.push_back(u);
        }
        for (const Utterance * u : corpus.select(s, Split::dev)) {
            dev_utts.push_back(u);
        }
    }
    train_adapters(m, corpus, train_utts, dev_utts, cfg, "stage2", -1, sink, observer);
    m.meta.stage = "stage2";
    m.meta.pretrain_speakers = speakers;
}

void stage3_adapt(TinyTransformer & m, const SyntheticCorpus & corpus, int speaker,
                  const TrainConfig & cfg, MetricsSink * sink) {
    if (m.meta.stage != "stage2") {
        throw ValidationError(fmt::format(
            "stage3: model is tagged '{}'; run stage2 pretraining first", m.meta.stage));
    }
    for (int s : m.meta.pretrain_speakers) {
        if (s == speaker) {
            throw ValidationError(fmt::format(
                "stage3: speaker {} was used in stage2 pretraining; the target speaker "
                "must be unseen", speaker));
        }
    }
    const auto train_utts = corpus.select(speaker, Split::train);
    const auto dev_utts = corpus.select(speaker, Split::dev);
    if (train_utts.empty()) {
        throw ValidationError(fmt::format("stage3: speaker {} has an empty train split", speaker));
    }
    train_adapters(m, corpus, train_utts, dev_utts, cfg, "stage3", speaker, sink, {});
    m.meta.stage = "stage3";
    m.meta.speaker_id = speaker;
}

EvalReport evaluate(TinyTransformer & m, const SyntheticCorpus & corpus, Split split,
                    const std::vector<int> & speakers) {
    if (speakers.empty()) {
        throw ValidationError("evaluate: no speakers given");
    }
    EvalReport report;
    report.seed = corpus.cfg.master_seed;
    RoutingObserver obs;
    double ce_sum = 0.0, ter_sum = 0.0;
    for (int s : speakers) {
        const auto utts = corpus.select(s, split);
        if (utts.empty()) {
            throw ValidationError(fmt::format("evaluate: speaker {} has no '{}' utterances",
                                              s, split_name(split)));
        }
        SpeakerMetrics sm;
        sm.speaker_id = s;
        sm.n_utterances = static_cast<int>(utts.size());
        size_t done = 0;
        double ce = 0.0;
        int errors = 0;
        while (done < utts.size()) {
            const size_t n = std::min<size_t>(32, utts.size() - done);
            std::vector<const Utterance *> chunk(utts.begin() + done, utts.begin() + done + n);
            Tape t;
            Value logits = m.forward(t, batch_of(chunk), &obs);
            Value loss = t.cross_entropy(logits, labels_of(chunk));
            ce += static_cast<double>(t.value(loss).at(0, 0)) * n;
            const Tensor & lv = t.value(logits);
            for (size_t i = 0; i < n; ++i) {
                int arg = 0;
                for (int j = 1; j < lv.cols(); ++j) {
                    if (lv.at(static_cast<int>(i), j) > lv.at(static_cast<int>(i), arg)) {
                        arg = j;
                    }
                }
                if (arg != chunk[i]->label) {
                    ++errors;
                }
            }
            done += n;
        }
        sm.cross_entropy = ce / utts.size();
        sm.token_error_rate = static_cast<double>(errors) / utts.size();
        ce_sum += sm.cross_entropy;
        ter_sum += sm.token_error_rate;
        report.per_speaker.push_back(sm);
    }
    report.mean_cross_entropy = ce_sum / speakers.size();
    report.mean_token_error_rate = ter_sum / speakers.size();
    for (auto & [name, acc] : obs.layers) {
        if (!acc.empty()) {
            report.routing.push_back({name, acc.finish()});
        }
    }
    report.params = m.count_params();
    return report;
}

json EvalReport::to_json() const {
    json per = json::array();
    for (const auto & s : per_speaker) {
        per.push_back(json{{"speaker", s.speaker_id},
                           {"cross_entropy", s.cross_entropy},
                           {"token_error_rate", s.token_error_rate},
                           {"n_utterances", s.n_utterances}});
    }
    json routing_j = json::array();
    for (const auto & lr : routing) {
        routing_j.push_back(json{{"layer", lr.layer},
                                 {"dominant_expert", lr.stats.dominant_expert},
                                 {"top1_fraction", lr.stats.top1_fraction},
                                 {"mean_entropy", lr.stats.mean_entropy},
                                 {"mean_gate", lr.stats.mean_gate}});
    }
    return json{{"per_speaker", per},
                {"mean_cross_entropy", mean_cross_entropy},
                {"mean_token_error_rate", mean_token_error_rate},
                {"routing", routing_j},
                {"params_total", params.total},
                {"params_trainable", params.trainable},
                {"trainable_fraction", params.trainable_fraction},
                {"seed", seed}};
}

std::vector<SweepRow> sweep_experts(const std::vector<int> & expert_counts,
                                    const ModelConfig & model_cfg, const SyntheticCorpus & corpus,
                                    const TrainConfig & train_cfg, MetricsSink * sink) {
    if (expert_counts.empty()) {
        throw ConfigError("sweep: no expert counts given");
    }
    for (int n : expert_counts) {
        if (n < 1) {
            throw ConfigError(fmt::format("sweep: expert count {} must be >= 1", n));
        }
    }
    std::vector<SweepRow> rows;
    const auto speakers = corpus.pretrain_speakers();
    for (int n : expert_counts) {
        ModelConfig cfg = model_cfg;
        cfg.n_experts = n;
        TinyTransformer m = TinyTransformer::build(cfg);
        stage1(m);
        stage2_pretrain(m, corpus, speakers, train_cfg, sink);
        EvalReport report = evaluate(m, corpus, Split::dev, speakers);
        SweepRow row;
        row.n_experts = n;
        row.dev_cross_entropy = report.mean_cross_entropy;
        row.dev_token_error_rate = report.mean_token_error_rate;
        row.trainable_params = report.params.trainable;
        rows.push_back(row);
        if (sink != nullptr && sink->active()) {
            sink->record(json{{"stage", "sweep"},
                              {"n_experts", n},
                              {"dev_cross_entropy", row.dev_cross_entropy},
                              {"dev_token_error_rate", row.dev_token_error_rate},
                              {"trainable_params", row.trainable_params},
                              {"seed", corpus.cfg.master_seed}});
        }
    }
    return rows;
}

void export_embeddings(TinyTransformer & m, const SyntheticCorpus & corpus, Split split,
                       const std::vector<int> & speakers, const std::string & path) {
    std::ofstream out(path);
    if (!out) {
        throw Error(fmt::format("cannot open '{}' for writing", path));
    }
    for (int s : speakers) {
        const auto utts = corpus.select(s, split);
        if (utts.empty()) {
            throw ValidationError(fmt::format("export_embeddings: speaker {} has no '{}' utterances",
                                              s, split_name(split)));
        }
        size_t done = 0;
        while (done < utts.size()) {
            const size_t n = std::min<size_t>(32, utts.size() - done);
            std::vector<const Utterance *> chunk(utts.begin() + done, utts.begin() + done + n);
            const Tensor feats = m.pooled_features(batch_of(chunk));
            for (size_t i = 0; i < n; ++i) {
                out << s;
                for (int j = 0; j < feats.cols(); ++j) {
                    out << "," << fmt::format("{}", feats.at(static_cast<int>(i), j));
                }
                out << "\n";
            }
            done += n;
        }
    }
    if (!out) {
        throw Error(fmt::format("write to '{}' failed", path));
    }
}

double embedding_separation(const std::vector<std::pair<int, std::vector<float>>> & rows) {
    if (rows.empty()) {
        throw ValidationError("embedding_separation: no rows");
    }
    const size_t dim = rows[0].second.size();
    std::map<int, std::vector<double>> centroids;
    std::map<int, int> counts;
    for (const auto & [spk, v] : rows) {
        auto & c = centroids[spk];
        c.resize(dim, 0.0);
        for (size_t j = 0; j < dim; ++j) {
            c[j] += v[j];
        }
        counts[spk] += 1;
    }
    for (auto & [spk, c] : centroids) {
        for (double & x : c) {
            x /= counts[spk];
        }
    }
    double intra = 0.0;
    for (const auto & [spk, v] : rows) {
        const auto & c = centroids[spk];
        double d2 = 0.0;
        for (size_t j = 0; j < dim; ++j) {
            const double d = v[j] - c[j];
            d2 += d * d;
        }
        intra += std::sqrt(d2);
    }
    intra /= rows.size();
    double inter = 0.0;
    int pairs = 0;
    for (auto a = centroids.begin(); a != centroids.end(); ++a) {
        for (auto b = std::next(a); b != centroids.end(); ++b) {
            double d2 = 0.0;
            for (size_t j = 0; j < dim; ++j) {
                const double d = a->second[j] - b->second[j];
                d2 += d * d;
            }
            inter += std::sqrt(d2);
            ++pairs;
        }
    }
    if (pairs == 0 || intra == 0.0) {
        return 0.0;
    }
    return (inter / pairs) / intra;
}

} // namespace saml
