#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "detox/evaluation.hpp"
#include "detox/mechanism.hpp"
#include "detox/probe.hpp"
#include "detox/sampling.hpp"
#include "detox/scorer.hpp"
#include "detox/synth.hpp"
#include "detox/training.hpp"
#include "detox/transfer.hpp"
#include "detox/weights.hpp"
#include "json.hpp"

namespace detox {

inline constexpr int config_schema_version = 1;

enum class ScorerKind { lexicon, probe, remote };

struct ScorerSettings {
    ScorerKind kind = ScorerKind::lexicon;
    double threshold = default_toxicity_threshold;
    RemoteScorerConfig remote;
    std::string api_key_env;  // remote key read from this variable, never stored in configs
};

// One config drives every stage; each command reads the sections it needs.
struct PipelineConfig {
    std::filesystem::path run_dir = "run";
    std::uint64_t seed = 0;
    SynthCorpusConfig synth;
    ModelConfig model;  // vocab_size is taken from the generated vocabulary
    PretrainConfig pretrain;
    DpoConfig dpo;
    double dpo_valid_fraction = 0.1;
    ProbeTrainConfig probe;
    ProbeFeature probe_feature = ProbeFeature::post_final_norm;
    double probe_holdout_fraction = 0.1;
    GenerationConfig generation;
    ScorerSettings scorer;
    PplAggregation ppl = PplAggregation::language_median;
    std::size_t potential_sources = default_potential_sources;
    ProfileOptions profile;
    std::size_t promoted_tokens = default_promoted_tokens;
    std::vector<double> gammas = {-2.0, -1.0, 0.0, 1.0, 2.0};
    std::size_t intervene_length = 20;
    Pooling pooling = Pooling::mean;
    std::size_t n_permutations = default_permutations;
    std::vector<double> sweep_learning_rates = {1e-7, 5e-7, 1e-6, 5e-6, 1e-5};

    // Pushes the top-level seed into every stage that draws randomness.
    void propagate_seed();
    void validate() const;
    nlohmann::ordered_json to_json() const;
};

// Strict parse: unknown keys, wrong types and a missing or unsupported
// schema_version are ConfigErrors.
PipelineConfig parse_pipeline_config(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// Stage directories under run_dir.
namespace stage_dir {
inline constexpr const char* data = "data";
inline constexpr const char* pretrain = "pretrain";
inline constexpr const char* dpo = "dpo";
inline constexpr const char* probe = "probe";
inline constexpr const char* locate = "locate";
inline constexpr const char* project = "project";
inline constexpr const char* intervene = "intervene";
inline constexpr const char* eval = "eval";
inline constexpr const char* retrieve = "retrieve";
inline constexpr const char* report = "report";
inline constexpr const char* lr_sweep = "lr_sweep";
}  // namespace stage_dir

// Each stage verifies its input manifests, computes, then writes its outputs
// and a run manifest into run_dir/<stage>.
void run_synth_data(const PipelineConfig& cfg);
void run_pretrain(const PipelineConfig& cfg);
void run_dpo(const PipelineConfig& cfg);
void run_probe(const PipelineConfig& cfg);
void run_locate(const PipelineConfig& cfg);
void run_project(const PipelineConfig& cfg);
void run_intervene(const PipelineConfig& cfg);
void run_eval(const PipelineConfig& cfg);
void run_retrieve(const PipelineConfig& cfg);
void run_report(const PipelineConfig& cfg);
void run_lr_sweep(const PipelineConfig& cfg);

// Ordered stage names for `all`.
const std::vector<std::string>& pipeline_stages();
void run_stage(const std::string& name, const PipelineConfig& cfg);

std::unique_ptr<ToxicityScorer> make_scorer(const PipelineConfig& cfg);

struct SweepPoint {
    double learning_rate = 0.0;
    std::optional<LanguageMetrics> metrics;  // averaged across languages
    std::string error;
};

// DPO + evaluation per learning rate; a failing rate yields an error row and
// the sweep moves on.
std::vector<SweepPoint> lr_sweep(const Weights<float>& reference, const Vocabulary& vocab,
                                 const std::vector<PreferenceExample>& train,
                                 const std::vector<PreferenceExample>& valid, const std::vector<EvalPrompt>& prompts,
                                 ToxicityScorer& scorer, const std::vector<double>& learning_rates,
                                 const DpoConfig& dpo, const GenerationConfig& gen, const EvalOptions& options);
void write_tradeoff_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path);

// Pivot-only preference split used by `dpo` and `lr-sweep`.
std::pair<std::vector<PreferenceExample>, std::vector<PreferenceExample>> load_preference_split(
    const PipelineConfig& cfg, const Vocabulary& vocab);

std::map<std::string, std::vector<std::vector<TokenId>>> prompts_by_language(const std::vector<EvalPrompt>& prompts,
                                                                             const Vocabulary& vocab);

struct ProfileRow {
    std::string language;
    NeuronRef target;
    std::string phase;
    double mean_activation = 0.0;
};
std::vector<ProfileRow> read_profiles_csv(const std::filesystem::path& path);

}  // namespace detox
