#include "detox/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "detox/checkpoint.hpp"
#include "detox/error.hpp"
#include "detox/metrics.hpp"
#include "detox/sampling.hpp"

namespace detox {

std::string to_string(ProbeFeature f) {
    return f == ProbeFeature::post_final_norm ? "post_final_norm" : "pre_final_norm";
}

ProbeFeature probe_feature_from_string(const std::string& s) {
    if (s == "post_final_norm") return ProbeFeature::post_final_norm;
    if (s == "pre_final_norm") return ProbeFeature::pre_final_norm;
    throw ConfigError("unknown probe feature '" + s + "'");
}

double ToxicProbe::logit(std::span<const double> x) const {
    if (x.size() != weights.size()) throw DataError("probe: feature dimension mismatch");
    double z = bias;
    for (std::size_t i = 0; i < x.size(); ++i) z += weights[i] * x[i];
    return z;
}

double ToxicProbe::score(std::span<const double> x) const {
    const double z = logit(x);
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

void ToxicProbe::save(const std::filesystem::path& dir) const {
    TensorContainer c;
    c.metadata["format"] = "detox-probe";
    c.metadata["version"] = 1;
    c.metadata["feature"] = to_string(feature);
    c.metadata["trained_on"] = trained_on;
    // The blob is f32; keep the exact double values in the manifest as well.
    c.metadata["weights_f64"] = weights;
    c.metadata["bias_f64"] = bias;
    std::vector<float> wf(weights.begin(), weights.end());
    c.tensors.push_back({"w_toxic", {weights.size()}, wf});
    c.tensors.push_back({"bias", {1}, {static_cast<float>(bias)}});
    c.save(dir);
}

ToxicProbe ToxicProbe::load(const std::filesystem::path& dir) {
    auto c = TensorContainer::load(dir);
    if (c.metadata.value("format", std::string()) != "detox-probe")
        throw DataError(dir.string() + ": not a probe container");
    ToxicProbe p;
    const auto* w = c.find("w_toxic");
    const auto* b = c.find("bias");
    if (!w) throw DataError("probe: missing tensor 'w_toxic'");
    if (!b || b->data.size() != 1) throw DataError("probe: missing tensor 'bias'");
    if (c.metadata.contains("weights_f64")) {
        p.weights = c.metadata["weights_f64"].get<std::vector<double>>();
        p.bias = c.metadata["bias_f64"].get<double>();
        if (p.weights.size() != w->data.size()) throw DataError("probe: f64 weights disagree with blob");
    } else {
        p.weights.assign(w->data.begin(), w->data.end());
        p.bias = b->data[0];
    }
    p.trained_on = c.metadata.value("trained_on", std::string());
    p.feature = probe_feature_from_string(c.metadata.value("feature", std::string("post_final_norm")));
    return p;
}

std::vector<double> probe_features(const Weights<float>& w, std::span<const TokenId> tokens, ProbeFeature feature) {
    if (tokens.empty()) throw DataError("probe_features: text has no tokens");
    const auto res = forward(w, tokens);
    const std::size_t d = w.config.d_model, n = tokens.size();
    const auto& src = feature == ProbeFeature::post_final_norm ? res.trace.final_out : res.trace.layers.back().resid_post;
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) out[c] += static_cast<double>(src[i * d + c]);
    for (auto& v : out) v /= static_cast<double>(n);
    return out;
}

std::vector<std::vector<double>> probe_features_batch(const Weights<float>& w,
                                                      const std::vector<std::vector<TokenId>>& texts,
                                                      ProbeFeature feature) {
    std::vector<std::vector<double>> out(texts.size());
    for (const auto& t : texts)
        if (t.empty()) throw DataError("probe_features: text has no tokens");
    const auto n = static_cast<std::ptrdiff_t>(texts.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i)
        out[static_cast<std::size_t>(i)] = probe_features(w, texts[static_cast<std::size_t>(i)], feature);
    return out;
}

void ProbeTrainConfig::validate() const {
    if (!(learning_rate > 0)) throw ConfigError("probe: learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("probe: batch_size must be >= 1");
}

ToxicProbe train_probe(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                       const ProbeTrainConfig& config) {
    config.validate();
    if (features.empty() || features.size() != labels.size())
        throw DataError("train_probe: features and labels must be non-empty and aligned");
    const bool has_pos = std::any_of(labels.begin(), labels.end(), [](int l) { return l != 0; });
    const bool has_neg = std::any_of(labels.begin(), labels.end(), [](int l) { return l == 0; });
    if (!has_pos || !has_neg) throw DataError("train_probe: both classes must be present");
    const std::size_t d = features[0].size();
    for (const auto& f : features)
        if (f.size() != d) throw DataError("train_probe: ragged feature matrix");

    // Parameters: weights then bias, Adam state alongside.
    std::vector<double> theta(d + 1, 0.0), m(d + 1, 0.0), v(d + 1, 0.0), g(d + 1);
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::size_t t = 0;
    Rng rng(config.seed);
    std::vector<std::size_t> order(features.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.next() % i]);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::fill(g.begin(), g.end(), 0.0);
            for (std::size_t b = start; b < end; ++b) {
                const auto& x = features[order[b]];
                double z = theta[d];
                for (std::size_t c = 0; c < d; ++c) z += theta[c] * x[c];
                const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
                const double err = p - (labels[order[b]] ? 1.0 : 0.0);  // d BCE / dz
                for (std::size_t c = 0; c < d; ++c) g[c] += err * x[c];
                g[d] += err;
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            ++t;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
            for (std::size_t c = 0; c <= d; ++c) {
                const double gc = g[c] * inv;
                m[c] = b1 * m[c] + (1 - b1) * gc;
                v[c] = b2 * v[c] + (1 - b2) * gc * gc;
                theta[c] -= config.learning_rate * (m[c] / c1) / (std::sqrt(v[c] / c2) + eps);
            }
        }
    }
    ToxicProbe probe;
    probe.weights.assign(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(d));
    probe.bias = theta[d];
    for (double x : probe.weights)
        if (!std::isfinite(x)) throw InvariantError("train_probe: non-finite weights");
    return probe;
}

ProbeEval probe_eval(const ToxicProbe& probe, const std::vector<std::vector<double>>& features,
                     const std::vector<int>& labels) {
    if (features.empty() || features.size() != labels.size())
        throw DataError("probe_eval: features and labels must be non-empty and aligned");
    std::vector<double> scores;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < features.size(); ++i) {
        const double s = probe.score(features[i]);
        scores.push_back(s);
        if ((s >= 0.5) == (labels[i] != 0)) ++correct;
    }
    ProbeEval out;
    out.accuracy = static_cast<double>(correct) / static_cast<double>(features.size());
    out.roc_auc = roc_auc(scores, labels);
    return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double holdout_fraction,
                                                                            std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.next() % i]);
    const auto held = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(n)));
    std::vector<std::size_t> hold(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(held));
    std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(held), idx.end());
    std::sort(hold.begin(), hold.end());
    std::sort(train.begin(), train.end());
    return {train, hold};
}

std::string dataset_fingerprint(const std::vector<LabeledText>& data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](unsigned char c) {
        h ^= c;
        h *= 0x100000001b3ULL;
    };
    for (const auto& ex : data) {
        for (char c : ex.text) mix(static_cast<unsigned char>(c));
        mix(0);
        mix(static_cast<unsigned char>(ex.label ? '1' : '0'));
        mix('\n');
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace detox
