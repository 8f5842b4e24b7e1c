#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "detox/model.hpp"
#include "detox/sampling.hpp"
#include "detox/scorer.hpp"
#include "json.hpp"

namespace detox {

struct PromotedToken {
    TokenId id = 0;
    std::string token;
    double score = 0.0;  // logit-lens inner product with the unembedding row
};

// One MLP sub-update (a value vector and its neuron).
struct SubUpdateRecord {
    std::size_t layer = 0;
    std::size_t neuron = 0;
    double cosine_to_probe = 0.0;
    std::optional<double> mean_activation;
    std::vector<PromotedToken> promoted_tokens;

    NeuronRef ref() const { return {layer, neuron}; }
};

inline constexpr std::size_t default_potential_sources = 100;
inline constexpr std::size_t default_activation_horizon = 20;
inline constexpr std::size_t default_promoted_tokens = 30;

// Cosine similarity of every value vector with the probe, descending; ties by
// ascending (layer, neuron). Returns the first top_k.
std::vector<SubUpdateRecord> rank_value_vectors(const Weights<float>& w, std::span<const double> probe,
                                                std::size_t top_k = default_potential_sources);

// Logit-lens projection W_U * w_down,j; top_n tokens by descending score, ties
// by ascending id.
std::vector<PromotedToken> project_to_vocab(const Weights<float>& w, const Vocabulary& vocab, std::size_t layer,
                                            std::size_t neuron, std::size_t top_n = default_promoted_tokens);

enum class ProfileDecode { greedy, sample };

struct ProfileOptions {
    std::size_t horizon = default_activation_horizon;
    ProfileDecode decode = ProfileDecode::greedy;
    GenerationConfig sampling;  // used when decode == sample (k is ignored)
};

// Mean activation of each target over the generated continuation positions
// (prompt positions excluded): averaged over positions first, then prompts.
struct ActivationProfile {
    std::string phase = "pre_dpo";
    std::size_t horizon = default_activation_horizon;
    std::vector<NeuronRef> targets;
    std::map<std::string, std::vector<double>> means;  // language -> per-target mean
    bool truncated = false;                            // max_seq_len cut some horizon short

    double mean(const std::string& language, NeuronRef target) const;
};

ActivationProfile collect_activations(const Weights<float>& w,
                                      const std::map<std::string, std::vector<std::vector<TokenId>>>& prompts,
                                      const std::vector<NeuronRef>& targets, const ProfileOptions& options = {},
                                      const std::string& phase = "pre_dpo");

// Records whose mean activation on `language` is strictly positive.
std::vector<SubUpdateRecord> actual_sources(const std::vector<SubUpdateRecord>& potential,
                                            const ActivationProfile& profile, const std::string& language);

// Greedy (or sampled) generation under the edited forward pass.
std::vector<TokenId> intervene_generate(const Weights<float>& w, const InterventionSpec& spec,
                                        std::span<const TokenId> prompt, std::size_t length);

struct SweepRow {
    double gamma = 0.0;
    std::string language;
    double avg_toxicity = 0.0;
    std::size_t n_scored = 0;
    std::size_t n_errors = 0;
};

struct SweepOptions {
    InterventionMode mode = InterventionMode::add_offset;
    std::size_t length = 20;
    // Greedy when temperature is 0; otherwise k seeded samples per prompt.
    GenerationConfig generation{1, 20, 0.0, 1.0, 0};
};

// Average toxicity of generations per (gamma, language).
std::vector<SweepRow> intervention_sweep(const Weights<float>& w, const Vocabulary& vocab,
                                         const std::vector<NeuronRef>& targets, const std::vector<double>& gammas,
                                         const std::map<std::string, std::vector<std::vector<TokenId>>>& prompts,
                                         ToxicityScorer& scorer, const SweepOptions& options = {});

nlohmann::ordered_json to_json(const SubUpdateRecord& r);
SubUpdateRecord sub_update_from_json(const nlohmann::json& j);
void write_records_jsonl(const std::vector<SubUpdateRecord>& records, const std::filesystem::path& path);
std::vector<SubUpdateRecord> read_records_jsonl(const std::filesystem::path& path);

// CSV rows: language,layer,neuron,phase,mean_activation
void write_profiles_csv(const std::vector<ActivationProfile>& profiles, const std::filesystem::path& path);

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);

}  // namespace detox
