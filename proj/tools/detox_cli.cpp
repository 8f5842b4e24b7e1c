// Command-line driver for the detoxification pipeline. Every command takes one
// JSON config plus optional overrides and writes into <run_dir>/<stage>.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "detox/error.hpp"
#include "detox/pipeline.hpp"
#include "json.hpp"

namespace {

struct Overrides {
    std::optional<std::size_t> k, length;
    std::optional<double> temperature, top_p, threshold;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> scorer, run_dir;
};

nlohmann::json load_raw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw detox::ConfigError("config file not found: " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw detox::ConfigError("config " + path + ": " + e.what());
    }
}

detox::PipelineConfig resolve(const std::string& path, const Overrides& o) {
    auto j = load_raw(path);
    if (!j.is_object()) throw detox::ConfigError("config " + path + ": top level must be an object");
    if (o.k) j["generation"]["k"] = *o.k;
    if (o.length) j["generation"]["length"] = *o.length;
    if (o.temperature) j["generation"]["temperature"] = *o.temperature;
    if (o.top_p) j["generation"]["top_p"] = *o.top_p;
    if (o.threshold) j["scorer"]["threshold"] = *o.threshold;
    if (o.scorer) j["scorer"]["kind"] = *o.scorer;
    if (o.seed) j["seed"] = *o.seed;
    if (o.run_dir) j["run_dir"] = *o.run_dir;
    return detox::parse_pipeline_config(j);
}

int report_error(const std::string& stage, const char* kind, int code, const std::string& message) {
    nlohmann::ordered_json e;
    e["error"] = {{"stage", stage}, {"kind", kind}, {"exit_code", code}, {"message", message}};
    std::cerr << e.dump() << std::endl;
    return code;
}

const char* kind_name(detox::ErrorKind k) {
    switch (k) {
        case detox::ErrorKind::config: return "config";
        case detox::ErrorKind::data: return "data";
        case detox::ErrorKind::remote: return "remote";
        case detox::ErrorKind::invariant: return "invariant";
    }
    return "invariant";
}

int run(const std::string& config_path, const Overrides& o, const std::vector<std::string>& stages) {
    std::string stage = "config";
    try {
        // Validate everything before the first stage starts computing.
        const auto cfg = resolve(config_path, o);
        for (const auto& s : stages) {
            stage = s;
            detox::run_stage(s, cfg);
        }
        return 0;
    } catch (const detox::Error& e) {
        return report_error(stage, kind_name(e.kind()), static_cast<int>(e.kind()), e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return report_error(stage, "data", 3, e.what());
    } catch (const std::exception& e) {
        return report_error(stage, "invariant", 5, e.what());
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Toxicity localization, DPO detoxification and cross-lingual transfer analysis"};
    app.require_subcommand(1);

    std::string config_path;
    Overrides o;
    std::string chosen;

    auto add = [&](const std::string& name, const std::string& help) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "pipeline config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--k", o.k, "samples per prompt");
        sub->add_option("--length", o.length, "continuation length in tokens");
        sub->add_option("--temperature", o.temperature, "sampling temperature (0 = greedy)");
        sub->add_option("--top-p", o.top_p, "nucleus mass");
        sub->add_option("--seed", o.seed, "master seed");
        sub->add_option("--scorer", o.scorer, "lexicon | probe | remote");
        sub->add_option("--threshold", o.threshold, "toxicity threshold for ToxProb");
        sub->add_option("--run-dir", o.run_dir, "artifact root");
        sub->callback([&chosen, name] { chosen = name; });
        return sub;
    };
    add("synth-data", "generate the synthetic multilingual corpus");
    add("pretrain", "train the base language model");
    add("dpo", "pivot-language preference tuning against the pretrained reference");
    add("probe", "train the linear toxicity probe on base-model features");
    add("locate", "rank value vectors against the probe and profile their activations");
    add("project", "project actual sources to the vocabulary");
    add("intervene", "edit actual-source activations and score generations");
    add("eval", "sample, score and aggregate before and after DPO");
    add("retrieve", "bilingual sentence retrieval per layer");
    add("report", "join raw dumps into the summary CSVs");
    add("lr-sweep", "toxicity/perplexity tradeoff across DPO learning rates");
    add("all", "run every stage from synth-data to report");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report_error("cli", "config", 2, e.what());
    }

    const auto stages = chosen == "all" ? detox::pipeline_stages() : std::vector<std::string>{chosen};
    return run(config_path, o, stages);
}
