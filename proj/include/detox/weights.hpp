#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "detox/error.hpp"

namespace detox {

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 128;
    std::size_t d_mlp = 512;
    std::size_t n_heads = 4;
    std::size_t vocab_size = 512;
    std::size_t max_seq_len = 64;
    std::string activation = "gelu";

    std::size_t head_dim() const { return d_model / n_heads; }

    // Throws ConfigError on the first violated invariant.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct LayerWeights {
    std::vector<T> ln1_gain;  // [d]
    std::vector<T> w_q;       // [d, d]
    std::vector<T> w_k;       // [d, d]
    std::vector<T> w_v;       // [d, d]
    std::vector<T> w_o;       // [d, d]
    std::vector<T> ln2_gain;  // [d]
    std::vector<T> w_up;      // [d_mlp, d], row j is the key vector of neuron j
    std::vector<T> w_down;    // [d, d_mlp], column j is the value vector of neuron j

    bool operator==(const LayerWeights&) const = default;
};

// All trainable tensors of the model. Attention and MLP blocks carry no bias
// terms and layer norms carry only a gain, so the MLP output is exactly
// W_down * gelu(W_up * x).
template <class T>
struct Weights {
    ModelConfig config;
    std::vector<T> token_embedding;       // [vocab, d]
    std::vector<T> positional_embedding;  // [max_seq_len, d]
    std::vector<LayerWeights<T>> layers;
    std::vector<T> final_gain;   // [d]
    std::vector<T> unembedding;  // [vocab, d]

    // Zero-filled tensors with the shapes `config` implies; layer norm gains too.
    static Weights zeros(const ModelConfig& config);
    // All-zero tensors including gains; used for gradients and optimizer state.
    static Weights zeros_like_state(const ModelConfig& config);

    // Visits every tensor in canonical (checkpoint) order as
    // f(name, shape, std::vector<T>&).
    template <class F>
    void visit(F&& f);
    template <class F>
    void visit(F&& f) const;

    std::size_t parameter_count() const;

    // Value vector of neuron j in `layer` (strided column of W_down).
    std::vector<T> value_vector(std::size_t layer, std::size_t neuron) const;

    template <class U>
    Weights<U> cast() const;

    bool operator==(const Weights&) const = default;
};

// Pointers to every tensor in canonical order.
template <class T>
std::vector<std::vector<T>*> tensor_refs(Weights<T>& w) {
    std::vector<std::vector<T>*> out;
    w.visit([&](const std::string&, const std::vector<std::size_t>&, std::vector<T>& data) { out.push_back(&data); });
    return out;
}

template <class T>
std::vector<const std::vector<T>*> tensor_refs(const Weights<T>& w) {
    std::vector<const std::vector<T>*> out;
    w.visit([&](const std::string&, const std::vector<std::size_t>&, const std::vector<T>& data) { out.push_back(&data); });
    return out;
}

// Deterministic GPT-2 style initialization: N(0, 0.02) for matrices, residual
// output projections scaled by 1/sqrt(2 * n_layers), gains at one.
Weights<float> init_weights(const ModelConfig& config, std::uint64_t seed);

template <class T>
template <class F>
void Weights<T>::visit(F&& f) {
    const std::size_t d = config.d_model, v = config.vocab_size;
    f(std::string("wte"), std::vector<std::size_t>{v, d}, token_embedding);
    f(std::string("wpe"), std::vector<std::size_t>{config.max_seq_len, d}, positional_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto& L = layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        f(p + "ln1.gain", std::vector<std::size_t>{d}, L.ln1_gain);
        f(p + "attn.w_q", std::vector<std::size_t>{d, d}, L.w_q);
        f(p + "attn.w_k", std::vector<std::size_t>{d, d}, L.w_k);
        f(p + "attn.w_v", std::vector<std::size_t>{d, d}, L.w_v);
        f(p + "attn.w_o", std::vector<std::size_t>{d, d}, L.w_o);
        f(p + "ln2.gain", std::vector<std::size_t>{d}, L.ln2_gain);
        f(p + "mlp.w_up", std::vector<std::size_t>{config.d_mlp, d}, L.w_up);
        f(p + "mlp.w_down", std::vector<std::size_t>{d, config.d_mlp}, L.w_down);
    }
    f(std::string("lnf.gain"), std::vector<std::size_t>{d}, final_gain);
    f(std::string("unembed"), std::vector<std::size_t>{v, d}, unembedding);
}

template <class T>
template <class F>
void Weights<T>::visit(F&& f) const {
    const_cast<Weights*>(this)->visit([&](const std::string& name, const std::vector<std::size_t>& shape,
                                          std::vector<T>& data) { f(name, shape, static_cast<const std::vector<T>&>(data)); });
}

template <class T>
template <class U>
Weights<U> Weights<T>::cast() const {
    Weights<U> out = Weights<U>::zeros(config);
    std::vector<const std::vector<T>*> src;
    visit([&](const std::string&, const std::vector<std::size_t>&, const std::vector<T>& data) { src.push_back(&data); });
    std::size_t i = 0;
    out.visit([&](const std::string&, const std::vector<std::size_t>&, std::vector<U>& data) {
        const auto& s = *src[i++];
        for (std::size_t k = 0; k < s.size(); ++k) data[k] = static_cast<U>(s[k]);
    });
    return out;
}

}  // namespace detox
