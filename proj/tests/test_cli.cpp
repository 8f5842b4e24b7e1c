#include <cstdlib>
#include <fstream>
#include <sstream>

#include "detox/checkpoint.hpp"
#include "detox/error.hpp"
#include "detox/manifest.hpp"
#include "detox/pipeline.hpp"
#include "detox/synth.hpp"
#include "doctest.h"

using namespace detox;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

SynthCorpusConfig small_synth() {
    SynthCorpusConfig c;
    c.vocab_per_language = 16;
    c.toxic_concepts = 2;
    c.trigger_concepts = 2;
    c.corpus_size = 30;
    c.n_preference = 10;
    c.n_eval_prompts = 3;
    c.n_parallel = 5;
    c.n_probe = 10;
    return c;
}

nlohmann::json smoke_json() { return nlohmann::json::parse(slurp(fs::path(DETOX_SOURCE_DIR) / "configs/smoke.json")); }

PipelineConfig smoke_config(const std::string& name) {
    auto j = smoke_json();
    j["run_dir"] = (fs::temp_directory_path() / name).string();
    auto cfg = parse_pipeline_config(j);
    fs::remove_all(cfg.run_dir);
    return cfg;
}

int run_cli(const std::string& args, const fs::path& err) {
    const std::string cmd = std::string(DETOX_CLI) + " " + args + " 2> " + err.string() + " > /dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("cli-io") {
    TEST_CASE("one toxic concept gives one aligned lexicon entry per language") {
        auto c = small_synth();
        c.toxic_concepts = 1;
        const auto corpus = synth_corpus(c);
        REQUIRE(corpus.lexicons.size() == 2);
        const auto& a = corpus.lexicons.at("l0");
        const auto& b = corpus.lexicons.at("l1");
        REQUIRE(a.size() == 1);
        REQUIRE(b.size() == 1);
        // Same concept suffix in both surface forms.
        CHECK(a.begin()->substr(a.begin()->find('_')) == b.begin()->substr(b.begin()->find('_')));
    }

    TEST_CASE("parallel ratio one gives every document an aligned twin") {
        auto c = small_synth();
        c.parallel_ratio = {0.0, 1.0};
        const auto corpus = synth_corpus(c);
        for (const auto& doc : corpus.pretrain.at("l1")) {
            const auto sep = doc.find(" <sep> ");
            REQUIRE(sep != std::string::npos);
            auto pivot = split_whitespace(doc.substr(0, sep));
            auto twin = split_whitespace(doc.substr(sep + 7));
            REQUIRE(pivot.size() == twin.size());
            for (std::size_t i = 0; i < pivot.size(); ++i) {
                CHECK(pivot[i].rfind("l0_", 0) == 0);
                CHECK(pivot[i].substr(2) == twin[i].substr(2));
            }
        }
        c.parallel_ratio = {0.0, 0.0};
        const auto plain = synth_corpus(c);
        for (const auto& doc : plain.pretrain.at("l1")) CHECK(doc.find("<sep>") == std::string::npos);
    }

    TEST_CASE("preferences exist only in the pivot language") {
        const auto corpus = synth_corpus(small_synth());
        for (const auto& p : corpus.preferences)
            for (const auto& t : split_whitespace(p.prompt + " " + p.chosen + " " + p.rejected)) CHECK(t.rfind("l0_", 0) == 0);
    }

    TEST_CASE("seeded corpus files are byte-identical across runs") {
        const auto a = fs::temp_directory_path() / "detox_synth_a", b = fs::temp_directory_path() / "detox_synth_b";
        fs::remove_all(a);
        fs::remove_all(b);
        synth_corpus(small_synth()).save(a);
        synth_corpus(small_synth()).save(b);
        std::size_t files = 0;
        for (const auto& e : fs::directory_iterator(a)) {
            CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
            ++files;
        }
        CHECK(files == 8);
        auto other = small_synth();
        other.seed = 1;
        CHECK(synth_corpus(other).pretrain != synth_corpus(small_synth()).pretrain);
    }

    TEST_CASE("vocabulary too small for the concept count") {
        auto c = small_synth();
        c.vocab_per_language = 5;
        CHECK_THROWS_AS(synth_corpus(c), ConfigError);
    }

    TEST_CASE("config parsing is strict") {
        CHECK_NOTHROW(parse_pipeline_config(smoke_json()));
        auto j = smoke_json();
        j["dpo"]["learnin_rate"] = 1e-3;
        CHECK_THROWS_WITH_AS(parse_pipeline_config(j), doctest::Contains("learnin_rate"), ConfigError);
        j = smoke_json();
        j.erase("schema_version");
        CHECK_THROWS_AS(parse_pipeline_config(j), ConfigError);
        j = smoke_json();
        j["schema_version"] = 2;
        CHECK_THROWS_AS(parse_pipeline_config(j), ConfigError);
        j = smoke_json();
        j["generation"]["k"] = "many";
        CHECK_THROWS_AS(parse_pipeline_config(j), ConfigError);
        j = smoke_json();
        j["generation"]["top_p"] = 1.5;
        CHECK_THROWS_AS(parse_pipeline_config(j), ConfigError);
        j = smoke_json();
        j["synth"]["parallel_ratio"] = {0.1, 0.2};
        CHECK_THROWS_AS(parse_pipeline_config(j), ConfigError);
    }

    TEST_CASE("config survives a json round trip") {
        const auto cfg = parse_pipeline_config(smoke_json());
        const auto again = parse_pipeline_config(nlohmann::json::parse(cfg.to_json().dump()));
        CHECK(again.to_json().dump() == cfg.to_json().dump());
    }

    TEST_CASE("git blob hashes") {
        CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
        CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }

    TEST_CASE("manifest lists outputs and detects tampering") {
        const auto root = fs::temp_directory_path() / "detox_manifest";
        fs::remove_all(root);
        fs::create_directories(root);
        std::ofstream(root / "out.txt") << "hello\n";
        RunManifest m("test", root);
        m.add_output(root / "out.txt");
        m.add_seed("seed", 3);
        m.write(root / run_manifest_name);
        CHECK_THROWS_AS(m.write(root / run_manifest_name), InvariantError);
        const auto j = verify_manifest(root / run_manifest_name, root);
        CHECK(j["outputs"][0]["path"] == "out.txt");
        CHECK(j["outputs"][0]["sha1"] == "ce013625030ba8dba906f756967f9e9ca394464a");
        std::ofstream(root / "out.txt") << "changed\n";
        CHECK_THROWS_AS(verify_manifest(root / run_manifest_name, root), DataError);
        fs::remove(root / "out.txt");
        CHECK_THROWS_AS(verify_manifest(root / run_manifest_name, root), DataError);
    }

    TEST_CASE("a stage without its inputs names the missing artifact") {
        const auto cfg = smoke_config("detox_missing");
        run_synth_data(cfg);
        CHECK_THROWS_WITH_AS(run_dpo(cfg), doctest::Contains("pretrain"), DataError);

        const auto err = fs::temp_directory_path() / "detox_missing_err.txt";
        const auto cfg_path = fs::temp_directory_path() / "detox_missing.json";
        std::ofstream(cfg_path) << smoke_json().dump();
        const int code = run_cli("dpo --config " + cfg_path.string() + " --run-dir " + cfg.run_dir.string(), err);
        CHECK(code == 3);
        const auto e = nlohmann::json::parse(slurp(err));
        CHECK(e["error"]["stage"] == "dpo");
        CHECK(e["error"]["exit_code"] == 3);
        CHECK(e["error"]["message"].get<std::string>().find("pretrain") != std::string::npos);
    }

    TEST_CASE("config errors exit with code 2 before any compute") {
        auto j = smoke_json();
        j["mystery"] = 1;
        const auto cfg_path = fs::temp_directory_path() / "detox_bad.json";
        std::ofstream(cfg_path) << j.dump();
        const auto run_dir = fs::temp_directory_path() / "detox_bad_run";
        fs::remove_all(run_dir);
        const auto err = fs::temp_directory_path() / "detox_bad_err.txt";
        CHECK(run_cli("synth-data --config " + cfg_path.string() + " --run-dir " + run_dir.string(), err) == 2);
        CHECK(nlohmann::json::parse(slurp(err))["error"]["kind"] == "config");
        CHECK_FALSE(fs::exists(run_dir));
        std::ofstream(cfg_path) << smoke_json().dump();
        CHECK(run_cli("synth-data --config " + cfg_path.string() + " --top-p 2", err) == 2);
        CHECK(run_cli("synth-data", err) == 2);
    }

    TEST_CASE("report is idempotent and recomputable from the dumps") {
        const auto cfg = smoke_config("detox_report");
        for (const auto& stage : pipeline_stages()) run_stage(stage, cfg);
        const auto table = slurp(cfg.run_dir / "report/table.csv");
        const auto transfer = slurp(cfg.run_dir / "report/transfer.csv");
        CHECK_FALSE(table.empty());
        run_report(cfg);
        CHECK(slurp(cfg.run_dir / "report/table.csv") == table);
        CHECK(slurp(cfg.run_dir / "report/transfer.csv") == transfer);
        for (const char* dir : {"data", "pretrain", "dpo", "probe", "locate", "project", "intervene", "eval", "retrieve",
                                "report"})
            CHECK_NOTHROW(verify_manifest(cfg.run_dir / dir / run_manifest_name, cfg.run_dir));
    }

    TEST_CASE("lr sweep rows match independent runs and lr zero is the pre-tuning model") {
        const auto cfg = smoke_config("detox_sweep");
        run_synth_data(cfg);
        run_pretrain(cfg);
        const auto ck = load_checkpoint(cfg.run_dir / "pretrain");
        const auto [train, valid] = load_preference_split(cfg, ck.vocab);
        const auto prompts = read_prompts(cfg.run_dir / "data/prompts.jsonl");
        LexiconScorer scorer(read_lexicons(cfg.run_dir / "data/lexicons.json"));
        const EvalOptions opt{cfg.scorer.threshold, cfg.ppl};
        const auto rows = lr_sweep(ck.weights, ck.vocab, train, valid, prompts, scorer, {0.0, 1e-3, 5e-3}, cfg.dpo,
                                   cfg.generation, opt);
        REQUIRE(rows.size() == 3);
        const auto base = evaluate(ck.weights, ck.vocab, prompts, scorer, cfg.generation, ck.weights, opt);
        REQUIRE(rows[0].metrics);
        CHECK(rows[0].metrics->emt == base.report.average.emt);
        CHECK(rows[0].metrics->tox_prob == base.report.average.tox_prob);
        CHECK(rows[0].metrics->median_ppl == base.report.average.median_ppl);
        for (std::size_t i = 1; i < 3; ++i) {
            const auto single = lr_sweep(ck.weights, ck.vocab, train, valid, prompts, scorer, {rows[i].learning_rate},
                                         cfg.dpo, cfg.generation, opt);
            REQUIRE(single[0].metrics);
            CHECK(single[0].metrics->emt == rows[i].metrics->emt);
            CHECK(single[0].metrics->median_ppl == rows[i].metrics->median_ppl);
        }
        auto bad = cfg.dpo;
        bad.batch_size = 0;
        const auto failed = lr_sweep(ck.weights, ck.vocab, train, valid, prompts, scorer, {1e-3, 0.0}, bad,
                                     cfg.generation, opt);
        CHECK_FALSE(failed[0].error.empty());
        CHECK_FALSE(failed[1].error.empty());
        const auto path = cfg.run_dir / "tradeoff.csv";
        write_tradeoff_csv(rows, path);
        CHECK(slurp(path).rfind("lr,emt,tox_prob,median_ppl,error\n", 0) == 0);
    }
}
