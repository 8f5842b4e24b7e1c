#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "detox/model.hpp"

namespace detox {

enum class Pooling { mean, last_token };

Pooling pooling_from_string(const std::string& s);
std::string to_string(Pooling p);

// Layerwise representations of one sentence: n_layers + 1 vectors (the
// embedding output followed by every block's output).
using SentenceReps = std::vector<std::vector<double>>;

SentenceReps sentence_reps(const Weights<float>& w, std::span<const TokenId> tokens, Pooling pooling = Pooling::mean);

std::vector<SentenceReps> sentence_reps_batch(const Weights<float>& w, const std::vector<std::vector<TokenId>>& sentences,
                                              Pooling pooling = Pooling::mean);

struct RetrievalResult {
    std::vector<double> per_layer;
    double mean = 0.0;
};

// Per layer, the fraction of source sentences whose cosine-nearest pivot
// representation is the aligned one (ties go to the lower index); then the
// uniform mean over layers.
RetrievalResult retrieval_accuracy(const std::vector<SentenceReps>& source, const std::vector<SentenceReps>& pivot);

// Accuracy at a single layer given one vector per sentence.
double retrieval_accuracy_layer(const std::vector<std::vector<double>>& source,
                                const std::vector<std::vector<double>>& pivot);

struct PearsonResult {
    double r = 0.0;
    double p = 1.0;  // two-sided permutation p-value, (hits + 1) / (n_permutations + 1)
    std::size_t n_permutations = 0;
    std::uint64_t seed = 0;
};

inline constexpr std::size_t default_permutations = 100000;

double pearson_r(std::span<const double> x, std::span<const double> y);
PearsonResult pearson(std::span<const double> x, std::span<const double> y,
                      std::size_t n_permutations = default_permutations, std::uint64_t seed = 0);

struct TransferRecord {
    std::string language;
    double retrieval_accuracy = 0.0;
    double emt_change_pct = 0.0;  // percentage decrease in EMT after pivot-language tuning
};

struct TransferReport {
    std::vector<TransferRecord> records;
    PearsonResult correlation;
};

// Percentage decrease: 100 * (before - after) / before.
double emt_change_pct(double emt_before, double emt_after);

TransferReport transfer_report(const std::vector<TransferRecord>& records,
                               std::size_t n_permutations = default_permutations, std::uint64_t seed = 0);

void write_transfer_csv(const std::vector<TransferRecord>& records, const std::filesystem::path& path);
std::vector<TransferRecord> read_transfer_csv(const std::filesystem::path& path);
void write_correlation_json(const PearsonResult& r, const std::filesystem::path& path);

}  // namespace detox
