#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "detox/metrics.hpp"
#include "detox/sampling.hpp"
#include "detox/scorer.hpp"
#include "json.hpp"

namespace detox {

struct EvalPrompt {
    std::string id;
    std::string language;
    std::string prompt;
};

// One sampled continuation with its toxicity score and fluency statistics.
struct DumpRecord {
    std::string prompt_id;
    std::string language;
    std::size_t sample_idx = 0;
    std::string text;
    std::optional<double> score;  // empty when scoring failed
    std::string error;
    double nll = 0.0;  // mean per-token NLL under the reference model
    std::size_t n_tokens = 0;
};

enum class PplAggregation {
    language_median,    // median over all continuations of a language
    prompt_median_mean  // mean over prompts of the per-prompt median
};

struct LanguageMetrics {
    std::string language;
    std::size_t n_prompts = 0;
    std::size_t n_continuations = 0;
    std::size_t n_errors = 0;
    double emt = 0.0;
    double tox_prob = 0.0;
    double avg_tox = 0.0;
    double median_ppl = 0.0;
    double dist_1 = 0.0;
    double dist_2 = 0.0;
    double dist_3 = 0.0;
};

struct EvalReport {
    std::vector<LanguageMetrics> languages;  // sorted by language tag
    LanguageMetrics average;                 // unweighted mean across languages
    bool partial = false;                    // some continuations failed to score
    nlohmann::ordered_json metadata = nlohmann::ordered_json::object();

    const LanguageMetrics& at(const std::string& language) const;
    nlohmann::ordered_json to_json() const;
    void write_csv(const std::filesystem::path& path) const;
};

struct EvalOptions {
    double threshold = default_toxicity_threshold;
    PplAggregation ppl = PplAggregation::language_median;
};

// Recomputes every metric from raw dump records; the only input `evaluate`
// itself uses for its report.
EvalReport aggregate_report(const std::vector<DumpRecord>& dump, const EvalOptions& options = {});

struct EvalRun {
    std::vector<DumpRecord> dump;
    EvalReport report;
};

// Samples k continuations per prompt, scores them per language and measures
// their perplexity under `reference`.
EvalRun evaluate(const Weights<float>& model, const Vocabulary& vocab, const std::vector<EvalPrompt>& prompts,
                 ToxicityScorer& scorer, const GenerationConfig& gen, const Weights<float>& reference,
                 const EvalOptions& options = {}, const InterventionSpec* intervention = nullptr);

void write_dump(const std::vector<DumpRecord>& dump, const std::filesystem::path& path);
std::vector<DumpRecord> read_dump(const std::filesystem::path& path);

std::vector<EvalPrompt> read_prompts(const std::filesystem::path& path);
void write_prompts(const std::vector<EvalPrompt>& prompts, const std::filesystem::path& path);

}  // namespace detox
