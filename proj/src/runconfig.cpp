#include "saml/runconfig.hpp"

#include <fstream>

#include <fmt/format.h>

#include "saml/error.hpp"

namespace saml {

using nlohmann::json;

RunConfig::RunConfig() {
    pretrain.steps = 1200;
    pretrain.batch_size = 16;
    pretrain.eval_every = 100;
    adapt.steps = 300;
    adapt.batch_size = 8;
    adapt.eval_every = 50;
}

namespace {

json train_to_json(const TrainConfig & t) {
    return json{{"steps", t.steps},
                {"batch_size", t.batch_size},
                {"optimizer", t.optim.kind_string()},
                {"lr", t.optim.lr},
                {"beta1", t.optim.beta1},
                {"beta2", t.optim.beta2},
                {"adam_eps", t.optim.eps},
                {"interleave_period", t.interleave_period},
                {"eval_every", t.eval_every},
                {"allow_fp32_base", t.allow_fp32_base}};
}

void train_from_json(const json & j, TrainConfig & t) {
    t.steps = j.value("steps", t.steps);
    t.batch_size = j.value("batch_size", t.batch_size);
    if (j.contains("optimizer")) {
        t.optim.kind = OptimConfig::kind_from_string(j["optimizer"].get<std::string>());
    }
    t.optim.lr = j.value("lr", t.optim.lr);
    t.optim.beta1 = j.value("beta1", t.optim.beta1);
    t.optim.beta2 = j.value("beta2", t.optim.beta2);
    t.optim.eps = j.value("adam_eps", t.optim.eps);
    t.interleave_period = j.value("interleave_period", t.interleave_period);
    t.eval_every = j.value("eval_every", t.eval_every);
    t.allow_fp32_base = j.value("allow_fp32_base", t.allow_fp32_base);
}

} // namespace

json RunConfig::to_json() const {
    return json{
        {"model",
         json{{"vocab_size", model.vocab_size},
              {"d_model", model.d_model},
              {"n_heads", model.n_heads},
              {"n_blocks", model.n_blocks},
              {"ff_hidden", model.ff_hidden},
              {"n_experts", model.n_experts},
              {"lora_rank", model.lora_rank},
              {"lora_alpha", model.lora_alpha},
              {"saml_targets", model.saml_targets},
              {"block_size", model.block_size},
              {"seed", model.seed}}},
        {"corpus",
         json{{"n_pretrain_speakers", corpus.n_pretrain_speakers},
              {"n_adapt_speakers", corpus.n_adapt_speakers},
              {"utterances_per_speaker", corpus.utterances_per_speaker},
              {"seq_len", corpus.seq_len},
              {"vocab_size", corpus.vocab_size},
              {"noise", corpus.noise},
              {"bias_scale", corpus.bias_scale},
              {"tv_floor", corpus.tv_floor},
              {"master_seed", corpus.master_seed}}},
        {"pretrain", train_to_json(pretrain)},
        {"adapt", train_to_json(adapt)},
        {"thresholds", json{{"collapse", thresholds.collapse}, {"imbalance", thresholds.imbalance}}},
        {"out_dir", out_dir}};
}

RunConfig RunConfig::from_json(const json & j) {
    RunConfig c;
    if (j.contains("model")) {
        const json & m = j["model"];
        c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
        c.model.d_model = m.value("d_model", c.model.d_model);
        c.model.n_heads = m.value("n_heads", c.model.n_heads);
        c.model.n_blocks = m.value("n_blocks", c.model.n_blocks);
        c.model.ff_hidden = m.value("ff_hidden", c.model.ff_hidden);
        c.model.n_experts = m.value("n_experts", c.model.n_experts);
        c.model.lora_rank = m.value("lora_rank", c.model.lora_rank);
        c.model.lora_alpha = m.value("lora_alpha", c.model.lora_alpha);
        if (m.contains("saml_targets")) {
            c.model.saml_targets = m["saml_targets"].get<std::array<bool, 4>>();
        }
        c.model.block_size = m.value("block_size", c.model.block_size);
        c.model.seed = m.value("seed", c.model.seed);
    }
    if (j.contains("corpus")) {
        const json & k = j["corpus"];
        c.corpus.n_pretrain_speakers = k.value("n_pretrain_speakers", c.corpus.n_pretrain_speakers);
        c.corpus.n_adapt_speakers = k.value("n_adapt_speakers", c.corpus.n_adapt_speakers);
        c.corpus.utterances_per_speaker = k.value("utterances_per_speaker", c.corpus.utterances_per_speaker);
        c.corpus.seq_len = k.value("seq_len", c.corpus.seq_len);
        c.corpus.vocab_size = k.value("vocab_size", c.model.vocab_size);
        c.corpus.noise = k.value("noise", c.corpus.noise);
        c.corpus.bias_scale = k.value("bias_scale", c.corpus.bias_scale);
        c.corpus.tv_floor = k.value("tv_floor", c.corpus.tv_floor);
        c.corpus.master_seed = k.value("master_seed", c.corpus.master_seed);
    } else {
        c.corpus.vocab_size = c.model.vocab_size;
    }
    if (j.contains("pretrain")) {
        train_from_json(j["pretrain"], c.pretrain);
    }
    if (j.contains("adapt")) {
        train_from_json(j["adapt"], c.adapt);
    }
    if (j.contains("thresholds")) {
        c.thresholds.collapse = j["thresholds"].value("collapse", c.thresholds.collapse);
        c.thresholds.imbalance = j["thresholds"].value("imbalance", c.thresholds.imbalance);
    }
    c.out_dir = j.value("out_dir", c.out_dir);
    return c;
}

RunConfig RunConfig::load(const std::string & path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(fmt::format("cannot open config file '{}'", path));
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception & e) {
        throw ConfigError(fmt::format("config file '{}' is not valid JSON: {}", path, e.what()));
    }
    return from_json(j);
}

void RunConfig::save(const std::string & path) const {
    std::ofstream out(path);
    if (!out) {
        throw Error(fmt::format("cannot open '{}' for writing", path));
    }
    out << to_json().dump(2) << "\n";
}

void RunConfig::validate() const {
    model.validate();
    corpus.validate();
    pretrain.validate();
    adapt.validate();
    if (model.vocab_size != corpus.vocab_size) {
        throw ConfigError(fmt::format("config: model vocab_size {} differs from corpus vocab_size {}",
                                      model.vocab_size, corpus.vocab_size));
    }
    for (float th : {thresholds.collapse, thresholds.imbalance}) {
        if (!(th > 0.0f && th <= 1.0f)) {
            throw ConfigError(fmt::format("config: threshold {} outside (0,1]", th));
        }
    }
}

} // namespace saml
