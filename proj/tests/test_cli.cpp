#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <unistd.h>

#include <json.hpp>

#include "saml/checkpoint.hpp"
#include "saml/cli.hpp"
#include "saml/corpus.hpp"

using namespace saml;
using nlohmann::json;

namespace {

namespace fs = std::filesystem;

struct CliWorld {
    fs::path dir;
    CliWorld() {
        dir = fs::temp_directory_path() / ("saml_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~CliWorld() { fs::remove_all(dir); }
    std::string p(const std::string & name) const { return (dir / name).string(); }
};

// tiny-but-trainable settings shared by every command
std::vector<std::string> tiny_flags() {
    return {"--vocab-size", "16",  "--d-model",  "32", "--n-heads",  "4",
            "--n-blocks",   "2",   "--ff-hidden", "48", "--n-experts", "3",
            "--pretrain-speakers", "5", "--adapt-speakers", "2",
            "--utterances", "20",  "--seq-len",  "10", "--master-seed", "777"};
}

int cli(std::vector<std::string> args, const std::vector<std::string> & extra = {}) {
    for (const auto & e : extra) {
        args.push_back(e);
    }
    return run_cli(args);
}

std::string capture_stdout(const std::function<int()> & fn, int & rc) {
    std::ostringstream captured;
    std::streambuf * old = std::cout.rdbuf(captured.rdbuf());
    rc = fn();
    std::cout.rdbuf(old);
    return captured.str();
}

} // namespace

TEST_CASE("cli end to end") {
    CliWorld w;
    const auto flags = tiny_flags();

    // gen-data
    CHECK(cli({"gen-data", "--out", w.p("corpus.jsonl")}, flags) == 0);
    CHECK(fs::exists(w.p("corpus.jsonl")));
    CHECK(fs::exists(w.p("corpus.jsonl.config.json")));

    // deterministic regeneration
    CHECK(cli({"gen-data", "--out", w.p("corpus2.jsonl"), "--overwrite"}, flags) == 0);
    {
        std::ifstream a(w.p("corpus.jsonl")), b(w.p("corpus2.jsonl"));
        std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(sa == sb);
    }

    // init + quantize; the input checkpoint is never mutated
    CHECK(cli({"init", "--out", w.p("base.ckpt")}, flags) == 0);
    std::string base_before;
    {
        std::ifstream in(w.p("base.ckpt"), std::ios::binary);
        base_before.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    }
    CHECK(cli({"quantize", "--in", w.p("base.ckpt"), "--out", w.p("q.ckpt"), "--block-size", "64"},
              flags) == 0);
    {
        std::ifstream in(w.p("base.ckpt"), std::ios::binary);
        std::string base_after((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        CHECK(base_before == base_after);
    }
    {
        TinyTransformer q = load_checkpoint(w.p("q.ckpt"));
        CHECK(q.meta.stage == "stage1");
        REQUIRE(q.meta.compression.has_value());
        CHECK(q.meta.compression->bits_per_weight == 4.5f);
        CHECK(q.meta.compression->payload_ratio >= 6.8);
        CHECK(q.meta.compression->payload_ratio <= 7.2);
    }

    // double quantization through the cli is a validation error
    CHECK(cli({"quantize", "--in", w.p("q.ckpt"), "--out", w.p("qq.ckpt")}, flags) == 2);

    // stage order: adapting a stage-1 model fails with exit 2
    CHECK(cli({"adapt", "--in", w.p("q.ckpt"), "--corpus", w.p("corpus.jsonl"), "--speaker", "5",
               "--out", w.p("bad.ckpt")},
              flags) == 2);

    // pretrain
    CHECK(cli({"pretrain", "--in", w.p("q.ckpt"), "--corpus", w.p("corpus.jsonl"), "--out",
               w.p("m_p.ckpt"), "--steps", "120", "--batch-size", "8", "--lr", "0.007"},
              flags) == 0);
    CHECK(fs::exists(w.p("m_p.ckpt")));
    CHECK(fs::exists(w.p("m_p.ckpt.metrics.jsonl")));

    // adapt a single held-out speaker (ids 5 and 6 are the adaptation set)
    CHECK(cli({"adapt", "--in", w.p("m_p.ckpt"), "--corpus", w.p("corpus.jsonl"), "--speaker", "5",
               "--out", w.p("m_s5.ckpt"), "--steps", "60", "--batch-size", "8"},
              flags) == 0);
    {
        TinyTransformer m = load_checkpoint(w.p("m_s5.ckpt"));
        CHECK(m.meta.stage == "stage3");
        CHECK(m.meta.speaker_id == 5);
    }

    // adapting a pretraining speaker is a validation error
    CHECK(cli({"adapt", "--in", w.p("m_p.ckpt"), "--corpus", w.p("corpus.jsonl"), "--speaker", "1",
               "--out", w.p("m_s1.ckpt"), "--steps", "10"},
              flags) == 2);

    // eval prints a report
    int rc = 0;
    const std::string eval_out = capture_stdout(
        [&]() {
            return cli({"eval", "--in", w.p("m_s5.ckpt"), "--corpus", w.p("corpus.jsonl"),
                        "--split", "test"},
                       flags);
        },
        rc);
    CHECK(rc == 0);
    {
        const json rep = json::parse(eval_out);
        CHECK(rep.contains("mean_cross_entropy"));
        CHECK(rep["per_speaker"].size() == 1);
        CHECK(rep["per_speaker"][0]["speaker"] == 5);
    }

    // prune emits a report and a checkpoint
    const std::string prune_out = capture_stdout(
        [&]() {
            return cli({"prune", "--in", w.p("m_s5.ckpt"), "--corpus", w.p("corpus.jsonl"),
                        "--mode", "collapse", "--collapse-threshold", "0.99", "--out",
                        w.p("pruned.ckpt")},
                       flags);
        },
        rc);
    CHECK(rc == 0);
    {
        const json rep = json::parse(prune_out);
        CHECK(rep.contains("layers_collapsed"));
        CHECK(rep.contains("params_removed"));
        CHECK(rep["mode_applied"].size() == 8);
        CHECK(fs::exists(w.p("pruned.ckpt")));
    }

    // top1 prune actually shrinks the model
    CHECK(cli({"prune", "--in", w.p("m_s5.ckpt"), "--corpus", w.p("corpus.jsonl"), "--mode",
               "top1", "--out", w.p("top1.ckpt")},
              flags) == 0);
    {
        TinyTransformer full = load_checkpoint(w.p("m_s5.ckpt"));
        TinyTransformer pruned = load_checkpoint(w.p("top1.ckpt"));
        CHECK(pruned.count_params().total < full.count_params().total);
        pruned.for_each_saml([&](SamlLayer & l) { CHECK(l.mode == SamlMode::collapsed_single_lora); });
    }

    // export-embeddings
    CHECK(cli({"export-embeddings", "--in", w.p("m_s5.ckpt"), "--corpus", w.p("corpus.jsonl"),
               "--split", "test", "--out", w.p("emb.csv")},
              flags) == 0);
    {
        std::ifstream in(w.p("emb.csv"));
        std::string line;
        int rows = 0;
        while (std::getline(in, line)) {
            ++rows;
        }
        CHECK(rows == 8); // 2/5-1/5-rest of 20 => 8 test utterances
    }

    // fan out over every adaptation speaker
    CHECK(cli({"adapt", "--in", w.p("m_p.ckpt"), "--corpus", w.p("corpus.jsonl"), "--all-speakers",
               "--out-dir", w.p("adapted"), "--steps", "20"},
              flags) == 0);
    CHECK(fs::exists(w.p("adapted/speaker_5.ckpt")));
    CHECK(fs::exists(w.p("adapted/speaker_6.ckpt")));
    CHECK(fs::exists(w.p("adapted/metrics.jsonl")));
    CHECK(fs::exists(w.p("adapted/resolved_config.json")));

    // quantize-adapters export path
    CHECK(cli({"adapt", "--in", w.p("m_p.ckpt"), "--corpus", w.p("corpus.jsonl"), "--speaker", "6",
               "--out", w.p("m_s6_q.ckpt"), "--steps", "20", "--quantize-adapters"},
              flags) == 0);
    {
        TinyTransformer m = load_checkpoint(w.p("m_s6_q.ckpt"));
        CHECK(m.meta.adapters_quantized);
        CHECK(!m.quantized_adapters.empty());
    }

    // sweep writes a table and metrics into its run directory
    const std::string sweep_out = capture_stdout(
        [&]() {
            return cli({"sweep", "--counts", "1,2", "--corpus", w.p("corpus.jsonl"), "--out-dir",
                        w.p("sweep"), "--steps", "25", "--batch-size", "8"},
                       flags);
        },
        rc);
    CHECK(rc == 0);
    CHECK(sweep_out.find("n_experts") != std::string::npos);
    {
        std::ifstream in(w.p("sweep/sweep.json"));
        const json table = json::parse(in);
        REQUIRE(table.size() == 2);
        CHECK(table[0]["n_experts"] == 1);
        CHECK(table[1]["n_experts"] == 2);
        CHECK(table[0]["trainable_params"] < table[1]["trainable_params"]);
        CHECK(fs::exists(w.p("sweep/metrics.jsonl")));
        CHECK(fs::exists(w.p("sweep/resolved_config.json")));
    }

    // report runs over the directory
    CHECK(cli({"report", "--run-dir", w.dir.string()}) == 0);

    // overwrite guard
    CHECK(cli({"init", "--out", w.p("base.ckpt")}, flags) == 2);
    CHECK(cli({"init", "--out", w.p("base.ckpt"), "--overwrite"}, flags) == 0);
}

TEST_CASE("cli usage errors exit with 1") {
    CHECK(run_cli({"no-such-command"}) == 1);
    CHECK(run_cli({"eval", "--no-such-flag"}) == 1);
    CHECK(run_cli({}) == 1);
    CHECK(run_cli({"adapt"}) == 1); // missing required --in
}

TEST_CASE("cli maps numeric explosions to exit 3") {
    CliWorld w;
    const auto flags = tiny_flags();
    REQUIRE(cli({"gen-data", "--out", w.p("c.jsonl")}, flags) == 0);
    REQUIRE(cli({"quantize", "--out", w.p("q.ckpt")}, flags) == 0);
    CHECK(cli({"pretrain", "--in", w.p("q.ckpt"), "--corpus", w.p("c.jsonl"), "--out",
               w.p("boom.ckpt"), "--steps", "40", "--optimizer", "sgd", "--lr", "1e14"},
              flags) == 3);
}

TEST_CASE("cli config file provides defaults and flags win") {
    CliWorld w;
    {
        json cfg;
        cfg["model"] = {{"vocab_size", 16}, {"d_model", 32}, {"n_heads", 4}, {"n_blocks", 1},
                        {"ff_hidden", 48}, {"n_experts", 2}, {"seed", 7}};
        cfg["corpus"] = {{"n_pretrain_speakers", 4}, {"n_adapt_speakers", 2},
                         {"utterances_per_speaker", 10}, {"seq_len", 8}, {"master_seed", 3}};
        std::ofstream(w.p("cfg.json")) << cfg.dump(2);
    }
    CHECK(run_cli({"init", "--config", w.p("cfg.json"), "--out", w.p("a.ckpt")}) == 0);
    {
        TinyTransformer m = load_checkpoint(w.p("a.ckpt"));
        CHECK(m.config().n_experts == 2);
        CHECK(m.config().n_blocks == 1);
    }
    // a flag overrides the file
    CHECK(run_cli({"init", "--config", w.p("cfg.json"), "--n-experts", "5", "--out", w.p("b.ckpt")}) == 0);
    {
        TinyTransformer m = load_checkpoint(w.p("b.ckpt"));
        CHECK(m.config().n_experts == 5);
    }
    // resolved config written next to the output reflects the override
    {
        std::ifstream in(w.p("b.ckpt.config.json"));
        const json resolved = json::parse(in);
        CHECK(resolved["model"]["n_experts"] == 5);
    }
    // bad config file
    std::ofstream(w.p("broken.json")) << "{ not json";
    CHECK(run_cli({"init", "--config", w.p("broken.json"), "--out", w.p("c.ckpt")}) == 2);
}
