#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "detox/vocab.hpp"
#include "detox/weights.hpp"

namespace testing {

inline detox::ModelConfig tiny_config(std::size_t layers = 2, std::size_t d = 8, std::size_t d_mlp = 16,
                                      std::size_t heads = 2, std::size_t vocab = 12, std::size_t seq = 16) {
    detox::ModelConfig c;
    c.n_layers = layers;
    c.d_model = d;
    c.d_mlp = d_mlp;
    c.n_heads = heads;
    c.vocab_size = vocab;
    c.max_seq_len = seq;
    return c;
}

// Larger-than-init weights so activations are not all tiny.
template <class T = float>
detox::Weights<T> random_weights(const detox::ModelConfig& c, unsigned seed, double scale = 0.5) {
    auto w = detox::Weights<T>::zeros(c);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    w.visit([&](const std::string& name, const std::vector<std::size_t>&, std::vector<T>& data) {
        const bool gain = name.find("gain") != std::string::npos;
        for (auto& x : data) x = static_cast<T>(gain ? 1.0 + 0.1 * n(rng) : n(rng));
    });
    return w;
}

inline std::vector<float> random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(d(rng));
    return v;
}

inline std::vector<detox::TokenId> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
    std::vector<detox::TokenId> t(n);
    for (auto& x : t) x = static_cast<detox::TokenId>(rng() % vocab);
    return t;
}

// Independent GELU for oracles.
inline double gelu_ref(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

}  // namespace testing
