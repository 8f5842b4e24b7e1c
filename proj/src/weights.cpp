#include "detox/weights.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace detox {

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (n_layers < 1) fail("n_layers must be >= 1");
    if (d_model < 1) fail("d_model must be >= 1");
    if (d_mlp < 1) fail("d_mlp must be >= 1");
    if (n_heads < 1) fail("n_heads must be >= 1");
    if (max_seq_len < 1) fail("max_seq_len must be >= 1");
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (activation != "gelu") fail("unsupported activation '" + activation + "'");
}

template <class T>
Weights<T> Weights<T>::zeros(const ModelConfig& config) {
    config.validate();
    Weights<T> w;
    w.config = config;
    w.layers.resize(config.n_layers);
    w.visit([](const std::string& name, const std::vector<std::size_t>& shape, std::vector<T>& data) {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        const bool gain = name.ends_with(".gain");
        data.assign(n, gain ? T(1) : T(0));
    });
    return w;
}

template <class T>
Weights<T> Weights<T>::zeros_like_state(const ModelConfig& config) {
    auto w = zeros(config);
    w.visit([](const std::string&, const std::vector<std::size_t>&, std::vector<T>& data) {
        std::fill(data.begin(), data.end(), T(0));
    });
    return w;
}

template <class T>
std::size_t Weights<T>::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const std::vector<std::size_t>&, const std::vector<T>& data) { n += data.size(); });
    return n;
}

template <class T>
std::vector<T> Weights<T>::value_vector(std::size_t layer, std::size_t neuron) const {
    const std::size_t d = config.d_model, m = config.d_mlp;
    std::vector<T> v(d);
    const auto& wd = layers.at(layer).w_down;
    for (std::size_t c = 0; c < d; ++c) v[c] = wd[c * m + neuron];
    return v;
}

Weights<float> init_weights(const ModelConfig& config, std::uint64_t seed) {
    auto w = Weights<float>::zeros(config);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
    w.visit([&](const std::string& name, const std::vector<std::size_t>&, std::vector<float>& data) {
        if (name.ends_with(".gain")) return;
        const bool resid_out = name.ends_with("attn.w_o") || name.ends_with("mlp.w_down");
        for (auto& x : data) x = static_cast<float>(normal(rng) * (resid_out ? resid_scale : 1.0));
    });
    return w;
}

template struct Weights<float>;
template struct Weights<double>;

}  // namespace detox
