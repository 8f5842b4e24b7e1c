#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "detox/vocab.hpp"
#include "detox/weights.hpp"

namespace detox {

struct NeuronRef {
    std::size_t layer = 0;
    std::size_t neuron = 0;

    auto operator<=>(const NeuronRef&) const = default;
};

enum class InterventionMode { add_offset, clamp_nonpositive };

// Edits MLP activations a -> a + gamma (add_offset) or a -> min(a, 0)
// (clamp_nonpositive) on every targeted neuron at every position, before the
// activation scales its value vector.
struct InterventionSpec {
    std::vector<NeuronRef> targets;
    double gamma = 0.0;
    InterventionMode mode = InterventionMode::add_offset;

    // Throws ConfigError for out-of-range or duplicated targets.
    void validate(const ModelConfig& config) const;
};

// Everything a forward pass computes, per layer and position. Doubles as the
// backprop tape. Matrices are row-major [seq_len, width].
template <class T>
struct LayerTrace {
    std::vector<T> resid_pre;  // x^l
    std::vector<T> ln1_out, ln1_xhat, ln1_rstd;
    std::vector<T> q, k, v;
    std::vector<T> att;         // [n_heads, seq, seq], causal softmax probabilities
    std::vector<T> att_concat;  // heads concatenated, before w_o
    std::vector<T> attn_out;
    std::vector<T> resid_mid;  // x^l + attn_out
    std::vector<T> ln2_out, ln2_xhat, ln2_rstd;
    std::vector<T> pre_act;      // W_up * ln2_out
    std::vector<T> activations;  // a_{i,j}, after any intervention; [seq, d_mlp]
    std::vector<T> mlp_out;
    std::vector<T> resid_post;  // x^{l+1} = resid_mid + mlp_out
};

template <class T>
struct ResidualTrace {
    std::size_t seq_len = 0;
    std::vector<TokenId> tokens;
    std::vector<LayerTrace<T>> layers;
    std::vector<T> final_out, final_xhat, final_rstd;  // final layer norm
    bool intervened = false;

    // x^l at position i for l in [0, n_layers]; l == n_layers is the last
    // block's output (pre final norm).
    std::span<const T> residual(std::size_t layer, std::size_t pos, std::size_t d) const;
};

template <class T>
struct ForwardResult {
    std::vector<T> logits;  // [seq_len, vocab]
    ResidualTrace<T> trace;
};

// Validates token ids and length against the config; throws DataError.
void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens);

template <class T>
ForwardResult<T> forward(const Weights<T>& w, std::span<const TokenId> tokens,
                         const InterventionSpec* intervention = nullptr);

// Accumulates d(loss)/d(weights) into `grads` given d(loss)/d(logits).
template <class T>
void backward(const Weights<T>& w, const ResidualTrace<T>& trace, std::span<const T> dlogits, Weights<T>& grads);

// Incremental decoding with cached keys/values. Produces logits identical to
// the last row of a full forward() over the same prefix.
template <class T>
class Decoder {
public:
    explicit Decoder(const Weights<T>& w, const InterventionSpec* intervention = nullptr);

    // Appends one token and returns the next-token logits.
    std::span<const T> step(TokenId token);
    std::span<const T> feed(std::span<const TokenId> tokens);

    std::size_t position() const { return pos_; }
    // Activations of the most recent position, one row of d_mlp per layer.
    std::span<const T> last_activations(std::size_t layer) const;

private:
    const Weights<T>& w_;
    std::vector<std::vector<char>> mask_;
    const InterventionSpec* spec_;
    std::size_t pos_ = 0;
    std::vector<std::vector<T>> k_cache_, v_cache_;
    std::vector<std::vector<T>> acts_;
    std::vector<T> x_, h_, q_, att_, concat_, tmp_, up_, logits_;
};

struct SubUpdate {
    double activation = 0.0;           // a_j
    std::vector<double> contribution;  // a_j * w_down,j
};

// Per-neuron decomposition of one MLP block applied to the MLP input `x`
// (already normalized). Throws DataError for a bad layer index.
std::vector<SubUpdate> mlp_sub_updates(const Weights<float>& w, std::size_t layer, std::span<const float> x);

// W_down * gelu(W_up * x) evaluated as a single matrix chain.
std::vector<float> mlp_output(const Weights<float>& w, std::size_t layer, std::span<const float> x);

// Per-(layer, neuron) edit lookup table.
std::vector<std::vector<char>> intervention_mask(const ModelConfig& config, const InterventionSpec* spec);

}  // namespace detox
