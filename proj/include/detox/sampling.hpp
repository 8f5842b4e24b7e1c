#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "detox/model.hpp"

namespace detox {

struct GenerationConfig {
    std::size_t k = 25;
    std::size_t length = 20;
    double temperature = 0.9;
    double top_p = 0.8;
    std::uint64_t seed = 0;

    void validate() const;
};

// splitmix64 finalizer; derives independent per-prompt streams from a master seed.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// Small portable generator (xoshiro256**) seeded through splitmix64.
class Rng {
public:
    explicit Rng(std::uint64_t seed);
    std::uint64_t next();
    double uniform();  // [0, 1) with 53 random bits
    std::uint64_t operator()() { return next(); }

private:
    std::uint64_t s_[4];
};

// Tokens kept by nucleus filtering, ordered by descending probability (ties by
// ascending id), with their renormalized probabilities. The prefix is the
// smallest one whose cumulative mass reaches top_p; the crossing token is kept.
struct NucleusSupport {
    std::vector<TokenId> ids;
    std::vector<double> probs;
    double mass = 0.0;  // pre-renormalization mass of the kept prefix
};

// Exact mass comparisons use this slack to absorb round-off in the running sum.
inline constexpr double nucleus_mass_slack = 1e-12;

NucleusSupport nucleus_from_probs(std::span<const double> probs, double top_p);
NucleusSupport nucleus_support(std::span<const float> logits, double temperature, double top_p);

TokenId argmax_token(std::span<const float> logits);

// Temperature 0 means greedy decoding.
TokenId sample_token(std::span<const float> logits, double temperature, double top_p, Rng& rng);

// Generates up to `length` tokens after the prompt (fewer when max_seq_len binds).
std::vector<TokenId> generate(const Weights<float>& w, std::span<const TokenId> prompt, std::size_t length,
                              double temperature, double top_p, Rng& rng, const InterventionSpec* intervention = nullptr);

std::vector<TokenId> greedy_generate(const Weights<float>& w, std::span<const TokenId> prompt, std::size_t length,
                                     const InterventionSpec* intervention = nullptr);

// k continuations of one prompt. `stream` distinguishes prompts under the same
// master seed so prompts can be processed in any order or concurrently.
std::vector<std::vector<TokenId>> sample_continuations(const Weights<float>& w, std::span<const TokenId> prompt,
                                                       const GenerationConfig& config, std::uint64_t stream,
                                                       const InterventionSpec* intervention = nullptr);

}  // namespace detox
