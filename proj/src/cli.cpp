#include "saml/cli.hpp"

#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "saml/error.hpp"
#include "saml/pipeline.hpp"
#include "saml/runconfig.hpp"

namespace saml {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string find_config_path(const std::vector<std::string> & args) {
    for (size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            return args[i + 1];
        }
        if (args[i].rfind("--config=", 0) == 0) {
            return args[i].substr(9);
        }
    }
    return {};
}

void ensure_writable(const std::string & path, bool overwrite) {
    if (!overwrite && fs::exists(path)) {
        throw ValidationError(fmt::format("output '{}' already exists; pass --overwrite to replace it", path));
    }
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) {
        fs::create_directories(parent);
    }
}

std::string default_run_dir(const RunConfig & cfg, const std::string & command) {
    char stamp[32];
    const std::time_t now = std::time(nullptr);
    std::tm tm_buf{};
    localtime_r(&now, &tm_buf);
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm_buf);
    return fmt::format("{}/{}-{}-seed{}", cfg.out_dir, command, stamp, cfg.corpus.master_seed);
}

void write_resolved_config(const RunConfig & cfg, const std::string & next_to) {
    const fs::path p(next_to);
    const fs::path dir = fs::is_directory(p) ? p : p.parent_path();
    const fs::path out = (dir.empty() ? fs::path(".") : dir) /
                         (fs::is_directory(p) ? "resolved_config.json"
                                              : p.filename().string() + ".config.json");
    cfg.save(out.string());
}

std::vector<int> parse_int_list(const std::string & s) {
    std::vector<int> out;
    size_t start = 0;
    while (start <= s.size()) {
        const size_t comma = s.find(',', start);
        const std::string tok = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!tok.empty()) {
            try {
                out.push_back(std::stoi(tok));
            } catch (const std::exception &) {
                throw ConfigError(fmt::format("cannot parse integer '{}'", tok));
            }
        }
        if (comma == std::string::npos) {
            break;
        }
        start = comma + 1;
    }
    return out;
}

std::array<bool, 4> parse_saml_targets(const std::string & s) {
    std::array<bool, 4> t{false, false, false, false};
    for (char c : s) {
        switch (c) {
            case 'q': t[0] = true; break;
            case 'k': t[1] = true; break;
            case 'v': t[2] = true; break;
            case 'o': t[3] = true; break;
            case ',': case ' ': break;
            default:
                throw ConfigError(fmt::format("saml targets: unknown projection '{}' (use q,k,v,o)", c));
        }
    }
    return t;
}

struct CommonFlags {
    std::string config_path;
    std::string saml_targets_str;
    bool overwrite = false;
};

void add_model_flags(CLI::App * cmd, RunConfig & cfg, CommonFlags & common) {
    cmd->add_option("--vocab-size", cfg.model.vocab_size, "token vocabulary size (model and corpus)");
    cmd->add_option("--d-model", cfg.model.d_model, "transformer width");
    cmd->add_option("--n-heads", cfg.model.n_heads, "attention heads");
    cmd->add_option("--n-blocks", cfg.model.n_blocks, "transformer blocks");
    cmd->add_option("--ff-hidden", cfg.model.ff_hidden, "feed-forward hidden width");
    cmd->add_option("--n-experts", cfg.model.n_experts, "LoRA experts per SAML layer");
    cmd->add_option("--lora-rank", cfg.model.lora_rank, "LoRA rank");
    cmd->add_option("--lora-alpha", cfg.model.lora_alpha, "LoRA alpha scale");
    cmd->add_option("--saml-targets", common.saml_targets_str, "projections carrying SAML, e.g. q,k,v,o");
    cmd->add_option("--block-size", cfg.model.block_size, "quantization block size");
    cmd->add_option("--seed", cfg.model.seed, "model init seed");
}

void add_corpus_flags(CLI::App * cmd, RunConfig & cfg) {
    cmd->add_option("--pretrain-speakers", cfg.corpus.n_pretrain_speakers, "pretraining speakers");
    cmd->add_option("--adapt-speakers", cfg.corpus.n_adapt_speakers, "adaptation speakers");
    cmd->add_option("--utterances", cfg.corpus.utterances_per_speaker, "utterances per speaker");
    cmd->add_option("--seq-len", cfg.corpus.seq_len, "tokens per utterance");
    cmd->add_option("--noise", cfg.corpus.noise, "per-token flip probability");
    cmd->add_option("--bias-scale", cfg.corpus.bias_scale, "speaker token-prior spread");
    cmd->add_option("--tv-floor", cfg.corpus.tv_floor, "minimum pairwise kernel distance");
    cmd->add_option("--master-seed", cfg.corpus.master_seed, "master seed for data and training");
}

// every data/model command accepts the same flag bundle, so a scripted run
// can reuse one set of overrides end to end
void add_shared_flags(CLI::App * cmd, RunConfig & cfg, CommonFlags & common) {
    add_model_flags(cmd, cfg, common);
    add_corpus_flags(cmd, cfg);
}

void add_train_flags(CLI::App * cmd, TrainConfig & t, std::string & optimizer_name) {
    cmd->add_option("--steps", t.steps, "training steps");
    cmd->add_option("--batch-size", t.batch_size, "utterances per batch");
    cmd->add_option("--optimizer", optimizer_name, "sgd or adam");
    cmd->add_option("--lr", t.optim.lr, "learning rate");
    cmd->add_option("--beta1", t.optim.beta1, "adam beta1");
    cmd->add_option("--beta2", t.optim.beta2, "adam beta2");
    cmd->add_option("--adam-eps", t.optim.eps, "adam epsilon");
    cmd->add_option("--interleave-period", t.interleave_period, "batches between router/expert alternation");
    cmd->add_option("--eval-every", t.eval_every, "steps between dev evaluations");
}

SyntheticCorpus corpus_for(const RunConfig & cfg, const std::string & corpus_path) {
    if (!corpus_path.empty()) {
        return load_corpus(corpus_path);
    }
    return generate_corpus(cfg.corpus);
}

std::vector<int> default_eval_speakers(const TinyTransformer & m, const SyntheticCorpus & corpus) {
    if (m.meta.speaker_id >= 0) {
        return {m.meta.speaker_id};
    }
    if (!m.meta.pretrain_speakers.empty()) {
        return m.meta.pretrain_speakers;
    }
    std::vector<int> all;
    for (int i = 0; i < corpus.cfg.n_speakers(); ++i) {
        all.push_back(i);
    }
    return all;
}

TokenBatch calibration_batch(const SyntheticCorpus & corpus, const TinyTransformer & m, int cap) {
    const std::vector<int> speakers = default_eval_speakers(m, corpus);
    std::vector<const Utterance *> utts;
    for (int s : speakers) {
        for (const Utterance * u : corpus.select(s, Split::dev)) {
            utts.push_back(u);
            if (static_cast<int>(utts.size()) >= cap) {
                break;
            }
        }
        if (static_cast<int>(utts.size()) >= cap) {
            break;
        }
    }
    if (utts.empty()) {
        throw ValidationError("prune: no dev utterances available for calibration");
    }
    return batch_of(utts);
}

json prune_report_json(const PruneReport & r) {
    json modes = json::array();
    for (const auto & [layer, mode] : r.mode_applied) {
        modes.push_back(json{{"layer", layer}, {"mode", mode}});
    }
    return json{{"layers_collapsed", r.layers_collapsed},
                {"layers_imbalanced", r.layers_imbalanced},
                {"params_removed", r.params_removed},
                {"mode_applied", modes}};
}

} // namespace

int run_cli(const std::vector<std::string> & args) {
    RunConfig cfg;
    const std::string config_path = find_config_path(args);

    CLI::App app{"speaker-adaptive mixture of LoRA experts on a quantized toy model"};
    app.require_subcommand(1);

    try {
        if (!config_path.empty()) {
            cfg = RunConfig::load(config_path);
        }

        CommonFlags common;
        std::string config_opt; // recognized here, value already consumed above
        app.add_option("--config", config_opt, "JSON config file; flags override its values");

        std::string in_path, out_path, corpus_path, metrics_path, out_dir, split_str = "test";
        std::string speakers_str, counts_str = "1,4,10", mode_str = "collapse", run_dir;
        std::string pre_opt_name, ad_opt_name;
        int speaker = -1;
        bool all_speakers = false, fp32 = false, quantize_adapters_flag = false, top1_renorm = false;

        auto add_common = [&](CLI::App * cmd) {
            cmd->add_option("--config", config_opt, "JSON config file; flags override its values");
            cmd->add_flag("--overwrite", common.overwrite, "replace existing outputs");
        };

        CLI::App * init = app.add_subcommand("init", "build a fresh FP32 base checkpoint");
        add_common(init);
        add_shared_flags(init, cfg, common);
        init->add_option("--out", out_path, "output checkpoint")->required();

        CLI::App * gen = app.add_subcommand("gen-data", "generate the synthetic multi-speaker corpus");
        add_common(gen);
        add_shared_flags(gen, cfg, common);
        gen->add_option("--out", out_path, "output corpus (JSON lines)")->required();

        CLI::App * quant = app.add_subcommand("quantize", "stage 1: block-wise NF4 quantization of the base");
        add_common(quant);
        add_shared_flags(quant, cfg, common);
        quant->add_option("--in", in_path, "input checkpoint (default: build from config)");
        quant->add_option("--out", out_path, "output checkpoint")->required();

        CLI::App * pre = app.add_subcommand("pretrain", "stage 2: multi-speaker pretraining of router and experts");
        add_common(pre);
        pre->add_option("--in", in_path, "stage-1 checkpoint")->required();
        pre->add_option("--corpus", corpus_path, "corpus file (default: regenerate from config)");
        pre->add_option("--out", out_path, "output checkpoint")->required();
        pre->add_option("--metrics", metrics_path, "metrics JSONL path");
        pre->add_flag("--fp32", fp32, "allow an unquantized base");
        add_shared_flags(pre, cfg, common);
        add_train_flags(pre, cfg.pretrain, pre_opt_name);

        CLI::App * ad = app.add_subcommand("adapt", "stage 3: per-speaker adaptation");
        add_common(ad);
        ad->add_option("--in", in_path, "stage-2 checkpoint")->required();
        ad->add_option("--corpus", corpus_path, "corpus file (default: regenerate from config)");
        ad->add_option("--speaker", speaker, "target speaker id");
        ad->add_flag("--all-speakers", all_speakers, "adapt every adaptation speaker");
        ad->add_option("--out", out_path, "output checkpoint (single speaker)");
        ad->add_option("--out-dir", out_dir, "output directory (all speakers)");
        ad->add_option("--metrics", metrics_path, "metrics JSONL path");
        ad->add_flag("--quantize-adapters", quantize_adapters_flag,
                     "NF4-quantize router and experts in the saved checkpoint");
        add_shared_flags(ad, cfg, common);
        add_train_flags(ad, cfg.adapt, ad_opt_name);

        CLI::App * ev = app.add_subcommand("eval", "evaluate a checkpoint on a corpus split");
        add_common(ev);
        ev->add_option("--in", in_path, "checkpoint")->required();
        ev->add_option("--corpus", corpus_path, "corpus file (default: regenerate from config)");
        ev->add_option("--split", split_str, "train, dev or test");
        ev->add_option("--speakers", speakers_str, "comma-separated speaker ids");
        ev->add_option("--metrics", metrics_path, "metrics JSONL path");
        add_shared_flags(ev, cfg, common);

        CLI::App * pr = app.add_subcommand("prune", "collapse-aware pruning of SAML layers");
        add_common(pr);
        pr->add_option("--in", in_path, "checkpoint")->required();
        pr->add_option("--corpus", corpus_path, "corpus file (default: regenerate from config)");
        pr->add_option("--out", out_path, "output checkpoint")->required();
        pr->add_option("--mode", mode_str, "collapse, top1-router or top1");
        pr->add_option("--collapse-threshold", cfg.thresholds.collapse, "mean-gate threshold for collapse");
        pr->add_option("--imbalance-threshold", cfg.thresholds.imbalance, "mean-gate threshold for imbalance");
        pr->add_flag("--top1-renormalize", top1_renorm, "fix the surviving gate at 1 in top1-router mode");
        add_shared_flags(pr, cfg, common);

        CLI::App * sw = app.add_subcommand("sweep", "stage-2 runs over a list of expert counts");
        add_common(sw);
        sw->add_option("--counts", counts_str, "comma-separated expert counts");
        sw->add_option("--corpus", corpus_path, "corpus file (default: regenerate from config)");
        sw->add_option("--out-dir", out_dir, "output directory");
        add_shared_flags(sw, cfg, common);
        add_train_flags(sw, cfg.pretrain, pre_opt_name);

        CLI::App * ex = app.add_subcommand("export-embeddings", "write pooled features as CSV");
        add_common(ex);
        ex->add_option("--in", in_path, "checkpoint")->required();
        ex->add_option("--corpus", corpus_path, "corpus file (default: regenerate from config)");
        ex->add_option("--split", split_str, "train, dev or test");
        ex->add_option("--speakers", speakers_str, "comma-separated speaker ids");
        ex->add_option("--out", out_path, "output CSV")->required();
        add_shared_flags(ex, cfg, common);

        CLI::App * rp = app.add_subcommand("report", "summarize a run directory");
        add_common(rp);
        rp->add_option("--run-dir", run_dir, "directory with metrics and checkpoints")->required();

        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);

        if (!common.saml_targets_str.empty()) {
            cfg.model.saml_targets = parse_saml_targets(common.saml_targets_str);
        }
        if (!pre_opt_name.empty()) {
            cfg.pretrain.optim.kind = OptimConfig::kind_from_string(pre_opt_name);
        }
        if (!ad_opt_name.empty()) {
            cfg.adapt.optim.kind = OptimConfig::kind_from_string(ad_opt_name);
        }
        cfg.pretrain.allow_fp32_base = cfg.pretrain.allow_fp32_base || fp32;
        // one --vocab-size drives both the model and the corpus
        cfg.corpus.vocab_size = cfg.model.vocab_size;
        cfg.validate();

        if (init->parsed()) {
            ensure_writable(out_path, common.overwrite);
            TinyTransformer m = TinyTransformer::build(cfg.model);
            save_checkpoint(m, out_path);
            write_resolved_config(cfg, out_path);
            std::cout << fmt::format("wrote base checkpoint '{}' ({} params)\n", out_path,
                                     m.count_params().total);
        } else if (gen->parsed()) {
            ensure_writable(out_path, common.overwrite);
            SyntheticCorpus corpus = generate_corpus(cfg.corpus);
            save_corpus(corpus, out_path);
            write_resolved_config(cfg, out_path);
            std::cout << fmt::format("wrote corpus '{}' ({} speakers, {} utterances)\n", out_path,
                                     corpus.cfg.n_speakers(), corpus.utterances.size());
        } else if (quant->parsed()) {
            ensure_writable(out_path, common.overwrite);
            TinyTransformer m = in_path.empty() ? TinyTransformer::build(cfg.model)
                                                : load_checkpoint(in_path);
            const CompressionSummary s = stage1(m);
            save_checkpoint(m, out_path);
            write_resolved_config(cfg, out_path);
            std::cout << fmt::format(
                "wrote stage-1 checkpoint '{}': {} bits/weight, payload ratio {:.2f}x, rmse {:.4f}\n",
                out_path, s.bits_per_weight, s.payload_ratio, s.rmse);
        } else if (pre->parsed()) {
            ensure_writable(out_path, common.overwrite);
            TinyTransformer m = load_checkpoint(in_path);
            SyntheticCorpus corpus = corpus_for(cfg, corpus_path);
            MetricsSink sink;
            if (metrics_path.empty()) {
                metrics_path = out_path + ".metrics.jsonl";
            }
            ensure_writable(metrics_path, true);
            sink = MetricsSink(metrics_path);
            stage2_pretrain(m, corpus, corpus.pretrain_speakers(), cfg.pretrain, &sink);
            save_checkpoint(m, out_path);
            write_resolved_config(cfg, out_path);
            EvalReport rep = evaluate(m, corpus, Split::dev, corpus.pretrain_speakers());
            sink.record(json{{"stage", "stage2"}, {"event", "eval"}, {"split", "dev"},
                             {"report", rep.to_json()}});
            std::cout << fmt::format("stage-2 done: dev ce {:.4f}, dev ter {:.3f}, wrote '{}'\n",
                                     rep.mean_cross_entropy, rep.mean_token_error_rate, out_path);
        } else if (ad->parsed()) {
            TinyTransformer base = load_checkpoint(in_path);
            SyntheticCorpus corpus = corpus_for(cfg, corpus_path);
            std::vector<int> targets;
            if (all_speakers) {
                targets = corpus.adapt_speakers();
                if (out_dir.empty()) {
                    out_dir = default_run_dir(cfg, "adapt");
                }
            } else {
                if (speaker < 0) {
                    throw ValidationError("adapt: pass --speaker <id> or --all-speakers");
                }
                targets = {speaker};
                if (out_path.empty()) {
                    throw ValidationError("adapt: pass --out for a single-speaker run");
                }
            }
            MetricsSink sink;
            if (!out_dir.empty()) {
                fs::create_directories(out_dir);
                if (metrics_path.empty()) {
                    metrics_path = out_dir + "/metrics.jsonl";
                }
            } else if (metrics_path.empty()) {
                metrics_path = out_path + ".metrics.jsonl";
            }
            ensure_writable(metrics_path, true);
            sink = MetricsSink(metrics_path);
            for (int s : targets) {
                TinyTransformer m = base.clone();
                stage3_adapt(m, corpus, s, cfg.adapt, &sink);
                if (quantize_adapters_flag) {
                    m.quantize_adapters();
                }
                const std::string path = all_speakers
                                             ? fmt::format("{}/speaker_{}.ckpt", out_dir, s)
                                             : out_path;
                ensure_writable(path, common.overwrite);
                save_checkpoint(m, path);
                EvalReport rep = evaluate(m, corpus, Split::test, {s});
                sink.record(json{{"stage", "stage3"}, {"event", "eval"}, {"split", "test"},
                                 {"speaker", s}, {"report", rep.to_json()}});
                std::cout << fmt::format("speaker {}: test ce {:.4f}, test ter {:.3f}, wrote '{}'\n",
                                         s, rep.mean_cross_entropy, rep.mean_token_error_rate, path);
            }
            write_resolved_config(cfg, all_speakers ? out_dir : out_path);
        } else if (ev->parsed()) {
            TinyTransformer m = load_checkpoint(in_path);
            SyntheticCorpus corpus = corpus_for(cfg, corpus_path);
            std::vector<int> speakers = speakers_str.empty() ? default_eval_speakers(m, corpus)
                                                             : parse_int_list(speakers_str);
            EvalReport rep = evaluate(m, corpus, split_from_name(split_str), speakers);
            if (!metrics_path.empty()) {
                ensure_writable(metrics_path, common.overwrite);
                MetricsSink sink(metrics_path);
                sink.record(json{{"stage", m.meta.stage}, {"event", "eval"}, {"split", split_str},
                                 {"report", rep.to_json()}});
            }
            std::cout << rep.to_json().dump(2) << "\n";
        } else if (pr->parsed()) {
            ensure_writable(out_path, common.overwrite);
            TinyTransformer m = load_checkpoint(in_path);
            SyntheticCorpus corpus = corpus_for(cfg, corpus_path);
            if (top1_renorm) {
                m.for_each_saml([&](SamlLayer & l) { l.top1_renormalize = true; });
            }
            PruneThresholds th{cfg.thresholds.collapse, cfg.thresholds.imbalance};
            const PruneReport report = m.prune(prune_mode_from_name(mode_str), th,
                                               calibration_batch(corpus, m, 64));
            save_checkpoint(m, out_path);
            write_resolved_config(cfg, out_path);
            std::cout << prune_report_json(report).dump(2) << "\n";
        } else if (sw->parsed()) {
            if (out_dir.empty()) {
                out_dir = default_run_dir(cfg, "sweep");
            }
            fs::create_directories(out_dir);
            SyntheticCorpus corpus = corpus_for(cfg, corpus_path);
            MetricsSink sink(out_dir + "/metrics.jsonl");
            const auto rows = sweep_experts(parse_int_list(counts_str), cfg.model, corpus,
                                            cfg.pretrain, &sink);
            json table = json::array();
            std::cout << fmt::format("{:>10} {:>14} {:>10} {:>16}\n", "n_experts", "dev_ce", "dev_ter",
                                     "trainable_params");
            for (const auto & r : rows) {
                table.push_back(json{{"n_experts", r.n_experts},
                                     {"dev_cross_entropy", r.dev_cross_entropy},
                                     {"dev_token_error_rate", r.dev_token_error_rate},
                                     {"trainable_params", r.trainable_params}});
                std::cout << fmt::format("{:>10} {:>14.4f} {:>10.3f} {:>16}\n", r.n_experts,
                                         r.dev_cross_entropy, r.dev_token_error_rate,
                                         r.trainable_params);
            }
            std::ofstream(out_dir + "/sweep.json") << table.dump(2) << "\n";
            write_resolved_config(cfg, out_dir);
        } else if (ex->parsed()) {
            ensure_writable(out_path, common.overwrite);
            TinyTransformer m = load_checkpoint(in_path);
            SyntheticCorpus corpus = corpus_for(cfg, corpus_path);
            std::vector<int> speakers = speakers_str.empty() ? default_eval_speakers(m, corpus)
                                                             : parse_int_list(speakers_str);
            export_embeddings(m, corpus, split_from_name(split_str), speakers, out_path);
            std::cout << fmt::format("wrote embeddings '{}'\n", out_path);
        } else if (rp->parsed()) {
            if (!fs::is_directory(run_dir)) {
                throw ValidationError(fmt::format("report: '{}' is not a directory", run_dir));
            }
            for (const auto & entry : fs::directory_iterator(run_dir)) {
                const std::string p = entry.path().string();
                if (entry.path().extension() == ".ckpt") {
                    TinyTransformer m = load_checkpoint(p);
                    const ParamCounts c = m.count_params();
                    std::cout << fmt::format("{}: stage {}, speaker {}, params {} ({} trainable)\n",
                                             entry.path().filename().string(), m.meta.stage,
                                             m.meta.speaker_id, c.total, c.trainable);
                } else if (entry.path().extension() == ".jsonl") {
                    std::ifstream in(p);
                    std::string line;
                    size_t events = 0;
                    json last_eval;
                    while (std::getline(in, line)) {
                        if (line.empty()) {
                            continue;
                        }
                        ++events;
                        json j = json::parse(line, nullptr, false);
                        if (!j.is_discarded() && j.value("event", "") == "eval") {
                            last_eval = j;
                        }
                    }
                    std::cout << fmt::format("{}: {} events\n", entry.path().filename().string(), events);
                    if (!last_eval.is_null()) {
                        std::cout << fmt::format("  last eval: {}\n", last_eval.dump());
                    }
                }
            }
        }
        return 0;
    } catch (const CLI::CallForHelp & e) {
        return app.exit(e);
    } catch (const CLI::ParseError & e) {
        app.exit(e);
        return 1;
    } catch (const NumericError & e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int run_cli(int argc, const char * const * argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) {
        args.emplace_back(argv[i]);
    }
    return run_cli(args);
}

} // namespace saml
