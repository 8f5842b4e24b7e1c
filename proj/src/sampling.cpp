#include "detox/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "detox/error.hpp"

namespace detox {

void GenerationConfig::validate() const {
    if (k < 1) throw ConfigError("generation: k must be >= 1");
    if (length < 1) throw ConfigError("generation: length must be >= 1");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("generation: top_p must be in (0, 1]");
    if (!(temperature >= 0.0)) throw ConfigError("generation: temperature must be >= 0");
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) {
    for (int i = 0; i < 4; ++i) s_[i] = mix_seed(seed, static_cast<std::uint64_t>(i));
}

std::uint64_t Rng::next() {
    auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

NucleusSupport nucleus_from_probs(std::span<const double> probs, double top_p) {
    std::vector<TokenId> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
        return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
    });
    NucleusSupport out;
    double cum = 0.0;
    for (auto id : order) {
        const double p = probs[static_cast<std::size_t>(id)];
        out.ids.push_back(id);
        out.probs.push_back(p);
        cum += p;
        if (cum + nucleus_mass_slack >= top_p) break;
    }
    out.mass = cum;
    for (auto& p : out.probs) p /= cum;
    return out;
}

NucleusSupport nucleus_support(std::span<const float> logits, double temperature, double top_p) {
    if (temperature <= 0.0) {
        const TokenId best = argmax_token(logits);
        return {{best}, {1.0}, 1.0};
    }
    double mx = -INFINITY;
    for (float l : logits) mx = std::max(mx, static_cast<double>(l));
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return nucleus_from_probs(p, top_p);
}

TokenId argmax_token(std::span<const float> logits) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

TokenId sample_token(std::span<const float> logits, double temperature, double top_p, Rng& rng) {
    if (temperature <= 0.0) return argmax_token(logits);
    const auto support = nucleus_support(logits, temperature, top_p);
    const double u = rng.uniform();
    double cum = 0.0;
    for (std::size_t i = 0; i < support.ids.size(); ++i) {
        cum += support.probs[i];
        if (u < cum) return support.ids[i];
    }
    return support.ids.back();
}

std::vector<TokenId> generate(const Weights<float>& w, std::span<const TokenId> prompt, std::size_t length,
                              double temperature, double top_p, Rng& rng, const InterventionSpec* intervention) {
    check_tokens(w.config, prompt);
    Decoder<float> dec(w, intervention);
    auto logits = dec.feed(prompt);
    std::vector<TokenId> out;
    for (std::size_t t = 0; t < length; ++t) {
        const TokenId next = sample_token(logits, temperature, top_p, rng);
        out.push_back(next);
        if (t + 1 == length || dec.position() >= w.config.max_seq_len) break;
        logits = dec.step(next);
    }
    return out;
}

std::vector<TokenId> greedy_generate(const Weights<float>& w, std::span<const TokenId> prompt, std::size_t length,
                                     const InterventionSpec* intervention) {
    Rng unused(0);
    return generate(w, prompt, length, 0.0, 1.0, unused, intervention);
}

std::vector<std::vector<TokenId>> sample_continuations(const Weights<float>& w, std::span<const TokenId> prompt,
                                                       const GenerationConfig& config, std::uint64_t stream,
                                                       const InterventionSpec* intervention) {
    config.validate();
    Rng rng(mix_seed(config.seed, stream));
    std::vector<std::vector<TokenId>> out;
    out.reserve(config.k);
    for (std::size_t s = 0; s < config.k; ++s)
        out.push_back(generate(w, prompt, config.length, config.temperature, config.top_p, rng, intervention));
    return out;
}

}  // namespace detox
