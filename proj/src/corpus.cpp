#include "saml/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <json.hpp>

#include "saml/error.hpp"

namespace saml {

using nlohmann::json;

void CorpusConfig::validate() const {
    if (n_pretrain_speakers + n_adapt_speakers < 2) {
        throw ConfigError("corpus config: need at least 2 speakers in total");
    }
    if (n_adapt_speakers < 1) {
        throw ConfigError("corpus config: need at least 1 adaptation speaker");
    }
    if (utterances_per_speaker < 5) {
        throw ConfigError(fmt::format("corpus config: utterances_per_speaker {} leaves an empty split",
                                      utterances_per_speaker));
    }
    if (seq_len < 1) {
        throw ConfigError("corpus config: seq_len must be positive");
    }
    if (vocab_size < 2) {
        throw ConfigError(fmt::format("corpus config: vocab_size {} too small", vocab_size));
    }
    if (noise < 0.0f || noise >= 1.0f) {
        throw ConfigError(fmt::format("corpus config: noise {} outside [0,1)", noise));
    }
    if (tv_floor < 0.0f || tv_floor >= 1.0f) {
        throw ConfigError(fmt::format("corpus config: tv_floor {} outside [0,1)", tv_floor));
    }
}

double SpeakerSpec::kernel(int c, int o) const {
    const int v = static_cast<int>(permutation.size());
    double p = noise / v;
    if (permutation[c] == o) {
        p += 1.0 - noise;
    }
    return p;
}

double kernel_tv_distance(const SpeakerSpec & a, const SpeakerSpec & b) {
    const int v = static_cast<int>(a.permutation.size());
    double total = 0.0;
    for (int c = 0; c < v; ++c) {
        double row = 0.0;
        for (int o = 0; o < v; ++o) {
            row += std::abs(a.kernel(c, o) - b.kernel(c, o));
        }
        total += 0.5 * row;
    }
    return total / v;
}

const char * split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::dev: return "dev";
        case Split::test: return "test";
    }
    return "?";
}

Split split_from_name(const std::string & s) {
    if (s == "train") return Split::train;
    if (s == "dev") return Split::dev;
    if (s == "test") return Split::test;
    throw ConfigError(fmt::format("unknown split '{}'", s));
}

std::vector<int> SyntheticCorpus::pretrain_speakers() const {
    std::vector<int> out(cfg.n_pretrain_speakers);
    for (int i = 0; i < cfg.n_pretrain_speakers; ++i) {
        out[i] = i;
    }
    return out;
}

std::vector<int> SyntheticCorpus::adapt_speakers() const {
    std::vector<int> out(cfg.n_adapt_speakers);
    for (int i = 0; i < cfg.n_adapt_speakers; ++i) {
        out[i] = cfg.n_pretrain_speakers + i;
    }
    return out;
}

std::vector<const Utterance *> SyntheticCorpus::select(int speaker, Split split) const {
    std::vector<const Utterance *> out;
    for (const auto & u : utterances) {
        if ((speaker < 0 || u.speaker_id == speaker) && u.split == split) {
            out.push_back(&u);
        }
    }
    return out;
}

namespace {

SpeakerSpec make_speaker(const CorpusConfig & cfg, int id, int attempt, const SeededRng & root) {
    SpeakerSpec s;
    s.speaker_id = id;
    SeededRng rng = root.fork(fmt::format("speaker.{}.{}", id, attempt));
    s.seed = rng.seed();
    s.permutation = rng.permutation(cfg.vocab_size);
    s.noise = cfg.noise;
    // biased clean-token prior: softmax of scaled gaussians
    std::vector<double> z(cfg.vocab_size);
    double mx = -1e30;
    for (int i = 0; i < cfg.vocab_size; ++i) {
        z[i] = rng.normal() * cfg.bias_scale;
        mx = std::max(mx, z[i]);
    }
    double sum = 0.0;
    for (double & v : z) {
        v = std::exp(v - mx);
        sum += v;
    }
    s.bias.resize(cfg.vocab_size);
    for (int i = 0; i < cfg.vocab_size; ++i) {
        s.bias[i] = static_cast<float>(z[i] / sum);
    }
    return s;
}

int sample_categorical(SeededRng & rng, const std::vector<float> & p) {
    const double u = rng.next_double();
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) {
            return static_cast<int>(i);
        }
    }
    return static_cast<int>(p.size()) - 1;
}

int mode_label(const std::vector<int> & clean, int vocab) {
    std::vector<int> count(vocab, 0);
    for (int c : clean) {
        ++count[c];
    }
    int best = 0;
    for (int i = 1; i < vocab; ++i) {
        if (count[i] > count[best]) {
            best = i; // ties keep the smaller token id
        }
    }
    return best;
}

} // namespace

SyntheticCorpus generate_corpus(const CorpusConfig & cfg) {
    cfg.validate();
    SyntheticCorpus corpus;
    corpus.cfg = cfg;
    const SeededRng root(cfg.master_seed);

    // Speaker kernels must be pairwise distinct; re-derive on collision.
    constexpr int MAX_ATTEMPTS = 64;
    for (int id = 0; id < cfg.n_speakers(); ++id) {
        bool placed = false;
        for (int attempt = 0; attempt < MAX_ATTEMPTS && !placed; ++attempt) {
            SpeakerSpec cand = make_speaker(cfg, id, attempt, root);
            placed = true;
            for (const auto & other : corpus.speakers) {
                if (kernel_tv_distance(cand, other) < cfg.tv_floor) {
                    placed = false;
                    break;
                }
            }
            if (placed) {
                corpus.speakers.push_back(std::move(cand));
            }
        }
        if (!placed) {
            throw ValidationError(fmt::format(
                "vocabulary of {} tokens is too small for {} speakers at tv_floor {}",
                cfg.vocab_size, cfg.n_speakers(), cfg.tv_floor));
        }
    }

    const int n_train = cfg.utterances_per_speaker * 2 / 5;
    const int n_dev = cfg.utterances_per_speaker / 5;

    std::set<std::vector<int>> seen_sequences;
    for (const auto & spk : corpus.speakers) {
        for (int ui = 0; ui < cfg.utterances_per_speaker; ++ui) {
            Utterance u;
            u.speaker_id = spk.speaker_id;
            u.split = ui < n_train ? Split::train : (ui < n_train + n_dev ? Split::dev : Split::test);
            for (int attempt = 0;; ++attempt) {
                SeededRng rng = root.fork(fmt::format("utt.{}.{}.{}", spk.speaker_id, ui, attempt));
                std::vector<int> clean(cfg.seq_len);
                u.tokens.assign(cfg.seq_len, 0);
                for (int t = 0; t < cfg.seq_len; ++t) {
                    clean[t] = sample_categorical(rng, spk.bias);
                    if (rng.next_double() < spk.noise) {
                        u.tokens[t] = rng.uniform_int(cfg.vocab_size);
                    } else {
                        u.tokens[t] = spk.permutation[clean[t]];
                    }
                }
                u.label = mode_label(clean, cfg.vocab_size);
                if (seen_sequences.insert(u.tokens).second) {
                    break; // no identical sequence in any split
                }
                if (attempt > 200) {
                    throw ValidationError(fmt::format(
                        "could not draw a unique sequence for speaker {} (vocab {} seq_len {})",
                        spk.speaker_id, cfg.vocab_size, cfg.seq_len));
                }
            }
            corpus.utterances.push_back(std::move(u));
        }
    }
    return corpus;
}

void save_corpus(const SyntheticCorpus & corpus, const std::string & path) {
    std::ofstream out(path);
    if (!out) {
        throw Error(fmt::format("cannot open '{}' for writing", path));
    }
    json header{{"kind", "saml_corpus"},
                {"n_pretrain_speakers", corpus.cfg.n_pretrain_speakers},
                {"n_adapt_speakers", corpus.cfg.n_adapt_speakers},
                {"utterances_per_speaker", corpus.cfg.utterances_per_speaker},
                {"seq_len", corpus.cfg.seq_len},
                {"vocab_size", corpus.cfg.vocab_size},
                {"noise", corpus.cfg.noise},
                {"bias_scale", corpus.cfg.bias_scale},
                {"tv_floor", corpus.cfg.tv_floor},
                {"master_seed", corpus.cfg.master_seed}};
    out << header.dump() << "\n";
    for (const auto & u : corpus.utterances) {
        json line{{"speaker", u.speaker_id},
                  {"split", split_name(u.split)},
                  {"tokens", u.tokens},
                  {"label", u.label}};
        out << line.dump() << "\n";
    }
    if (!out) {
        throw Error(fmt::format("write to '{}' failed", path));
    }
}

SyntheticCorpus load_corpus(const std::string & path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(fmt::format("cannot open '{}' for reading", path));
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw FormatError(fmt::format("'{}' is empty", path));
    }
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception & e) {
        throw FormatError(fmt::format("corpus header is not valid JSON: {}", e.what()));
    }
    if (header.value("kind", "") != std::string("saml_corpus")) {
        throw FormatError(fmt::format("'{}' is not a corpus file", path));
    }
    CorpusConfig cfg;
    cfg.n_pretrain_speakers = header.at("n_pretrain_speakers").get<int>();
    cfg.n_adapt_speakers = header.at("n_adapt_speakers").get<int>();
    cfg.utterances_per_speaker = header.at("utterances_per_speaker").get<int>();
    cfg.seq_len = header.at("seq_len").get<int>();
    cfg.vocab_size = header.at("vocab_size").get<int>();
    cfg.noise = header.at("noise").get<float>();
    cfg.bias_scale = header.at("bias_scale").get<float>();
    cfg.tv_floor = header.at("tv_floor").get<float>();
    cfg.master_seed = header.at("master_seed").get<uint64_t>();

    // Speakers are deterministic from the config; regenerate instead of
    // storing kernels, then overlay the stored utterances verbatim.
    SyntheticCorpus regen = generate_corpus(cfg);
    SyntheticCorpus corpus;
    corpus.cfg = cfg;
    corpus.speakers = std::move(regen.speakers);
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception & e) {
            throw FormatError(fmt::format("corpus line is not valid JSON: {}", e.what()));
        }
        Utterance u;
        u.speaker_id = j.at("speaker").get<int>();
        u.split = split_from_name(j.at("split").get<std::string>());
        u.tokens = j.at("tokens").get<std::vector<int>>();
        u.label = j.at("label").get<int>();
        corpus.utterances.push_back(std::move(u));
    }
    return corpus;
}

} // namespace saml
