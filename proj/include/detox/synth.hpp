#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "detox/evaluation.hpp"
#include "detox/probe.hpp"
#include "detox/vocab.hpp"
#include "json.hpp"

namespace detox {

// Desk-scale multilingual corpus. Every language renders the same concept
// inventory with its own surface tokens ("<lang>_c<k>"), sentences come from
// one shared concept-level grammar, and toxic concepts define the lexicons.
// Language 0 is the pivot: the only language with preference data.
struct SynthCorpusConfig {
    std::size_t n_languages = 2;
    std::size_t vocab_per_language = 48;  // concepts, each with one token per language
    std::size_t toxic_concepts = 6;
    std::size_t trigger_concepts = 3;
    // Fraction of a non-pivot language's pretraining documents that are
    // concept-aligned pairs with the pivot; entry 0 (pivot) is ignored.
    std::vector<double> parallel_ratio = {0.0, 0.5};
    std::size_t corpus_size = 2000;  // pretraining documents per language
    std::uint64_t seed = 0;

    std::size_t prompt_len = 5;
    std::size_t continuation_len = 20;
    std::size_t branching = 4;              // successors per concept in the shared chain
    double trigger_prompt_rate = 0.5;       // share of pretraining prompts carrying a trigger
    double toxic_given_trigger = 0.7;       // chance a triggered prompt continues toxically
    double toxic_token_rate = 0.8;          // toxic-token share inside a toxic continuation
    std::size_t n_preference = 400;         // pivot preference pairs (train + valid)
    std::size_t preference_continuation_len = 20;
    std::size_t n_eval_prompts = 24;        // per language, multiway parallel
    std::size_t n_parallel = 200;           // retrieval pairs per non-pivot language
    std::size_t n_probe = 1000;             // pivot labeled texts

    void validate() const;
    std::string language(std::size_t i) const;
};

nlohmann::ordered_json to_json(const SynthCorpusConfig& c);
SynthCorpusConfig synth_config_from_json(const nlohmann::json& j);

struct PreferenceText {
    std::string prompt, chosen, rejected;
};

struct ParallelPair {
    std::string id;
    std::string language;
    std::string text;
    std::string pivot_text;
};

struct SynthCorpus {
    SynthCorpusConfig config;
    std::vector<std::string> languages;  // languages[0] is the pivot
    Vocabulary vocab;
    std::map<std::string, std::vector<std::string>> pretrain;  // per language documents
    std::vector<PreferenceText> preferences;                  // pivot only
    std::vector<EvalPrompt> eval_prompts;                     // toxicity-eliciting, every language
    std::vector<ParallelPair> parallel;                       // non-pivot languages
    std::map<std::string, std::set<std::string>> lexicons;
    std::vector<LabeledText> probe_data;  // pivot only

    // Writes vocab.json, pretrain.txt, preferences.jsonl, prompts.jsonl,
    // parallel.jsonl, lexicons.json and probe.jsonl into `dir`.
    void save(const std::filesystem::path& dir) const;
};

inline constexpr std::string_view separator_token = "<sep>";

SynthCorpus synth_corpus(const SynthCorpusConfig& config);

// File-format helpers shared with the pipeline commands.
void write_preferences(const std::vector<PreferenceText>& prefs, const std::filesystem::path& path);
std::vector<PreferenceText> read_preferences(const std::filesystem::path& path);
void write_parallel(const std::vector<ParallelPair>& pairs, const std::filesystem::path& path);
std::vector<ParallelPair> read_parallel(const std::filesystem::path& path);
void write_labeled(const std::vector<LabeledText>& data, const std::filesystem::path& path);
std::vector<LabeledText> read_labeled(const std::filesystem::path& path);
void write_lexicons(const std::map<std::string, std::set<std::string>>& lex, const std::filesystem::path& path);
std::map<std::string, std::set<std::string>> read_lexicons(const std::filesystem::path& path);
// pretrain.txt: "<language>\t<document>" per line.
void write_pretrain(const std::map<std::string, std::vector<std::string>>& docs, const std::filesystem::path& path);
std::map<std::string, std::vector<std::string>> read_pretrain(const std::filesystem::path& path);

}  // namespace detox
