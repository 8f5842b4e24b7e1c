#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "detox/model.hpp"

namespace detox {

// Which residual the probe reads: the last block's output after the final
// layer norm (default) or before it.
enum class ProbeFeature { post_final_norm, pre_final_norm };

std::string to_string(ProbeFeature f);
ProbeFeature probe_feature_from_string(const std::string& s);

struct LabeledText {
    std::string text;
    int label = 0;  // 1 = toxic
};

struct ToxicProbe {
    std::vector<double> weights;  // w_toxic, one entry per model dimension
    double bias = 0.0;
    std::string trained_on;  // dataset fingerprint
    ProbeFeature feature = ProbeFeature::post_final_norm;

    double logit(std::span<const double> x) const;
    double score(std::span<const double> x) const;  // sigmoid(logit)

    void save(const std::filesystem::path& dir) const;
    static ToxicProbe load(const std::filesystem::path& dir);
};

// Mean over positions of the last-layer residual stream.
std::vector<double> probe_features(const Weights<float>& w, std::span<const TokenId> tokens,
                                   ProbeFeature feature = ProbeFeature::post_final_norm);

// Feature extraction for many texts; runs across texts in parallel.
std::vector<std::vector<double>> probe_features_batch(const Weights<float>& w,
                                                      const std::vector<std::vector<TokenId>>& texts,
                                                      ProbeFeature feature = ProbeFeature::post_final_norm);

// Adam on binary cross-entropy; defaults are lr 1e-4, batch 10, 20 epochs.
struct ProbeTrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 10;
    std::size_t epochs = 20;
    std::uint64_t seed = 0;

    void validate() const;
};

ToxicProbe train_probe(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                       const ProbeTrainConfig& config);

struct ProbeEval {
    double accuracy = 0.0;  // at the 0.5 decision threshold
    double roc_auc = 0.0;
};

ProbeEval probe_eval(const ToxicProbe& probe, const std::vector<std::vector<double>>& features,
                     const std::vector<int>& labels);

// Seeded 90/10 style split; returns (train indices, held-out indices).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double holdout_fraction,
                                                                            std::uint64_t seed);

// Order-sensitive FNV-1a fingerprint of a labeled dataset.
std::string dataset_fingerprint(const std::vector<LabeledText>& data);

}  // namespace detox
