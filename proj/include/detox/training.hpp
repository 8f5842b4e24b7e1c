#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "detox/model.hpp"

namespace detox {

struct PreferenceExample {
    std::vector<TokenId> prompt;
    std::vector<TokenId> chosen;    // preferred (non-toxic) continuation
    std::vector<TokenId> rejected;  // dispreferred (toxic) continuation

    void validate(const ModelConfig& config) const;
};

struct DpoConfig {
    double beta = 0.1;
    double learning_rate = 1e-5;
    std::size_t batch_size = 4;
    std::size_t grad_accum = 1;
    double max_grad_norm = 10.0;
    std::size_t epochs = 5;
    std::size_t patience = 10;
    std::uint64_t seed = 0;
    // Validation cadence in optimizer steps; 0 means once per epoch.
    std::size_t eval_every = 0;

    void validate() const;
};

struct PretrainConfig {
    double learning_rate = 3e-3;
    std::size_t batch_size = 16;
    std::size_t epochs = 4;
    double max_grad_norm = 1.0;
    std::uint64_t seed = 0;
    // Linear decay of the learning rate to this fraction over training.
    double final_lr_fraction = 0.1;

    void validate() const;
};

struct LossRecord {
    std::size_t step = 0;
    double train_loss = 0.0;
    double valid_loss = 0.0;
};

// Sum over continuation tokens of log p(token | prompt, earlier continuation).
template <class T>
double sequence_logprob(const Weights<T>& w, std::span<const TokenId> prompt, std::span<const TokenId> continuation);

// Forward pass kept for backprop of a continuation log-probability.
template <class T>
struct LogprobTape {
    ForwardResult<T> result;
    std::size_t prompt_len = 0;
    double logprob = 0.0;
};

template <class T>
LogprobTape<T> logprob_tape(const Weights<T>& w, std::span<const TokenId> prompt, std::span<const TokenId> continuation);

// Accumulates coeff * d(tape.logprob)/d(weights) into grads.
template <class T>
void accumulate_logprob_grad(const Weights<T>& w, const LogprobTape<T>& tape, double coeff, Weights<T>& grads);

// Same as sequence_logprob, and accumulates coeff * d(logprob)/d(weights) into `grads`.
template <class T>
double sequence_logprob_grad(const Weights<T>& w, std::span<const TokenId> prompt,
                             std::span<const TokenId> continuation, double coeff, Weights<T>& grads);

// Numerically stable -log(sigmoid(z)).
double neg_log_sigmoid(double z);

// -log sigmoid(beta * ((chosen - ref_chosen) - (rejected - ref_rejected)))
double dpo_loss(double policy_chosen_lp, double policy_rejected_lp, double ref_chosen_lp, double ref_rejected_lp,
                double beta);

struct DpoTerms {
    double loss = 0.0;
    double d_chosen = 0.0;    // d loss / d policy_chosen_lp
    double d_rejected = 0.0;  // d loss / d policy_rejected_lp
};
DpoTerms dpo_terms(double policy_chosen_lp, double policy_rejected_lp, double ref_chosen_lp, double ref_rejected_lp,
                   double beta);

// DPO loss of one example with its gradient scaled by `scale` accumulated into grads.
template <class T>
double dpo_example_grad(const Weights<T>& policy, const PreferenceExample& ex, double ref_chosen_lp,
                        double ref_rejected_lp, double beta, double scale, Weights<T>& grads);

template <class T>
double global_grad_norm(const Weights<T>& grads);

// Rescales grads in place so their global L2 norm is at most max_norm; returns
// the pre-clip norm.
template <class T>
double clip_grad_norm(Weights<T>& grads, double max_norm);

// RMSProp without momentum: v = decay*v + (1-decay)*g^2; w -= lr*g/sqrt(v+eps).
template <class T>
class RmsProp {
public:
    static constexpr double decay = 0.99;
    static constexpr double eps = 1e-8;

    explicit RmsProp(const ModelConfig& config) : square_avg_(Weights<T>::zeros_like_state(config)) {}
    void step(Weights<T>& w, const Weights<T>& grads, double lr);

private:
    Weights<T> square_avg_;
};

template <class T>
class Adam {
public:
    static constexpr double beta1 = 0.9;
    static constexpr double beta2 = 0.999;
    static constexpr double eps = 1e-8;

    explicit Adam(const ModelConfig& config);
    void step(Weights<T>& w, const Weights<T>& grads, double lr);

private:
    Weights<T> m_, v_;
    std::size_t t_ = 0;
};

struct DpoResult {
    Weights<float> weights;  // best-validation checkpoint
    std::vector<LossRecord> history;
    std::size_t best_step = 0;
    double best_valid_loss = 0.0;
    bool early_stopped = false;
};

// Preference tuning against a frozen reference. Validation runs before the
// first step and then every `eval_every` steps (or per epoch).
DpoResult train_dpo(const Weights<float>& policy, const Weights<float>& reference,
                    const std::vector<PreferenceExample>& train, const std::vector<PreferenceExample>& valid,
                    const DpoConfig& config);

double dpo_dataset_loss(const Weights<float>& policy, const std::vector<PreferenceExample>& data,
                        const std::vector<std::pair<double, double>>& ref_lps, double beta);

struct PretrainResult {
    Weights<float> weights;
    std::vector<double> epoch_loss;
};

// Next-token cross-entropy training with Adam.
PretrainResult pretrain_lm(const Weights<float>& init, const std::vector<std::vector<TokenId>>& corpus,
                           const PretrainConfig& config);

// Mean next-token cross-entropy over a corpus (nats per predicted token).
double corpus_cross_entropy(const Weights<float>& w, const std::vector<std::vector<TokenId>>& corpus);

void write_loss_history_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path);

}  // namespace detox
