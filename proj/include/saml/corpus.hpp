#pragma once

#include <optional>
#include <string>
#include <vector>

#include "saml/rng.hpp"

namespace saml {

struct CorpusConfig {
    int n_pretrain_speakers = 50;
    int n_adapt_speakers = 10;
    int utterances_per_speaker = 60;
    int seq_len = 16;
    int vocab_size = 32;
    float noise = 0.10f;      // per-token probability of a uniform flip
    float bias_scale = 2.0f;  // spread of the per-speaker clean-token prior
    float tv_floor = 0.20f;   // minimum pairwise kernel distance
    uint64_t master_seed = 1234;

    int n_speakers() const { return n_pretrain_speakers + n_adapt_speakers; }
    void validate() const;
};

/// A synthetic speaker: an invertible token distortion made of a vocab
/// permutation (the confusion kernel core) and a biased clean-token
/// prior. Identical seeds reproduce the speaker exactly.
struct SpeakerSpec {
    int speaker_id = -1;
    uint64_t seed = 0;
    std::vector<int> permutation;
    std::vector<float> bias; // clean-token prior, sums to 1
    float noise = 0.0f;

    // P(observed = o | clean = c)
    double kernel(int c, int o) const;
};

// Mean over clean tokens of the total-variation distance between the
// speakers' emission rows.
double kernel_tv_distance(const SpeakerSpec & a, const SpeakerSpec & b);

enum class Split { train, dev, test };

const char * split_name(Split s);
Split split_from_name(const std::string & s);

struct Utterance {
    int speaker_id = -1;
    Split split = Split::train;
    std::vector<int> tokens; // observed (distorted) tokens
    int label = -1;          // mode of the clean tokens
};

struct SyntheticCorpus {
    CorpusConfig cfg;
    std::vector<SpeakerSpec> speakers;
    std::vector<Utterance> utterances;

    std::vector<int> pretrain_speakers() const;
    std::vector<int> adapt_speakers() const;
    bool is_pretrain_speaker(int id) const { return id < cfg.n_pretrain_speakers; }

    // Utterances for one speaker and split; speaker -1 selects all speakers.
    std::vector<const Utterance *> select(int speaker, Split split) const;
};

/// Deterministic multi-speaker corpus: the labeling task (mode of the
/// clean tokens) is shared, the distortion is speaker specific, and each
/// speaker's utterances are split 2/5 train, 1/5 dev, 2/5 test.
SyntheticCorpus generate_corpus(const CorpusConfig & cfg);

void save_corpus(const SyntheticCorpus & corpus, const std::string & path);
SyntheticCorpus load_corpus(const std::string & path);

} // namespace saml
