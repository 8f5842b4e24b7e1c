#include "detox/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "detox/error.hpp"
#include "detox/kernels.hpp"

namespace detox {

namespace {

std::vector<TokenId> concat(std::span<const TokenId> a, std::span<const TokenId> b) {
    std::vector<TokenId> out(a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

// Fisher-Yates with raw 64-bit draws so the order is stdlib-independent.
template <class Rng>
void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(idx[i - 1], idx[j]);
    }
}

template <class T>
void zero(Weights<T>& w) {
    for (auto* t : tensor_refs(w)) std::fill(t->begin(), t->end(), T(0));
}

}  // namespace

void PreferenceExample::validate(const ModelConfig& config) const {
    if (prompt.empty() || chosen.empty() || rejected.empty())
        throw DataError("preference example: prompt, chosen and rejected must be non-empty");
    if (chosen == rejected) throw DataError("preference example: chosen equals rejected");
    if (prompt.size() + std::max(chosen.size(), rejected.size()) > config.max_seq_len)
        throw DataError("preference example: prompt + continuation exceeds max_seq_len");
    check_tokens(config, prompt);
    check_tokens(config, chosen);
    check_tokens(config, rejected);
}

void DpoConfig::validate() const {
    if (!(beta >= 0)) throw ConfigError("dpo: beta must be >= 0");
    if (!(learning_rate >= 0)) throw ConfigError("dpo: learning_rate must be >= 0");
    if (batch_size < 1 || grad_accum < 1) throw ConfigError("dpo: batch_size and grad_accum must be >= 1");
    if (!(max_grad_norm > 0)) throw ConfigError("dpo: max_grad_norm must be > 0");
    if (patience < 1) throw ConfigError("dpo: patience must be >= 1");
}

void PretrainConfig::validate() const {
    if (!(learning_rate >= 0)) throw ConfigError("pretrain: learning_rate must be >= 0");
    if (batch_size < 1) throw ConfigError("pretrain: batch_size must be >= 1");
    if (!(max_grad_norm > 0)) throw ConfigError("pretrain: max_grad_norm must be > 0");
    if (final_lr_fraction < 0 || final_lr_fraction > 1) throw ConfigError("pretrain: final_lr_fraction in [0,1]");
}

template <class T>
double sequence_logprob(const Weights<T>& w, std::span<const TokenId> prompt, std::span<const TokenId> continuation) {
    if (prompt.empty()) throw DataError("sequence_logprob: empty prompt");
    if (continuation.empty()) return 0.0;
    const auto seq = concat(prompt, continuation);
    if (seq.size() > w.config.max_seq_len)
        throw DataError("sequence_logprob: prompt + continuation length " + std::to_string(seq.size()) +
                        " exceeds max_seq_len");
    auto res = forward(w, seq);
    const std::size_t V = w.config.vocab_size;
    double lp = 0.0;
    for (std::size_t t = 0; t < continuation.size(); ++t) {
        const std::size_t pos = prompt.size() - 1 + t;
        const T* row = res.logits.data() + pos * V;
        lp += static_cast<double>(row[static_cast<std::size_t>(continuation[t])]) -
              static_cast<double>(kernels::log_sum_exp(row, V));
    }
    return lp;
}

template <class T>
LogprobTape<T> logprob_tape(const Weights<T>& w, std::span<const TokenId> prompt,
                            std::span<const TokenId> continuation) {
    if (prompt.empty()) throw DataError("sequence_logprob: empty prompt");
    if (continuation.empty()) throw DataError("sequence_logprob: empty continuation");
    const auto seq = concat(prompt, continuation);
    if (seq.size() > w.config.max_seq_len)
        throw DataError("sequence_logprob: prompt + continuation length " + std::to_string(seq.size()) +
                        " exceeds max_seq_len");
    LogprobTape<T> tape{forward(w, seq), prompt.size(), 0.0};
    const std::size_t V = w.config.vocab_size;
    for (std::size_t t = 0; t < continuation.size(); ++t) {
        const T* row = tape.result.logits.data() + (prompt.size() - 1 + t) * V;
        tape.logprob += static_cast<double>(row[static_cast<std::size_t>(continuation[t])]) -
                        static_cast<double>(kernels::log_sum_exp(row, V));
    }
    return tape;
}

template <class T>
void accumulate_logprob_grad(const Weights<T>& w, const LogprobTape<T>& tape, double coeff, Weights<T>& grads) {
    if (coeff == 0.0) return;
    const std::size_t V = w.config.vocab_size;
    const auto& tokens = tape.result.trace.tokens;
    std::vector<T> dlogits(tape.result.logits.size(), T(0));
    std::vector<T> p(V);
    for (std::size_t pos = tape.prompt_len - 1; pos + 1 < tokens.size(); ++pos) {
        const auto y = static_cast<std::size_t>(tokens[pos + 1]);
        std::copy_n(tape.result.logits.data() + pos * V, V, p.data());
        kernels::softmax_inplace(p.data(), V);
        T* d = dlogits.data() + pos * V;
        for (std::size_t v = 0; v < V; ++v) d[v] = static_cast<T>(-coeff) * p[v];
        d[y] += static_cast<T>(coeff);
    }
    backward(w, tape.result.trace, std::span<const T>(dlogits), grads);
}

template <class T>
double sequence_logprob_grad(const Weights<T>& w, std::span<const TokenId> prompt,
                             std::span<const TokenId> continuation, double coeff, Weights<T>& grads) {
    if (continuation.empty()) return 0.0;
    const auto tape = logprob_tape(w, prompt, continuation);
    accumulate_logprob_grad(w, tape, coeff, grads);
    return tape.logprob;
}

double neg_log_sigmoid(double z) {
    // -log(sigmoid(z)) = log(1 + exp(-z))
    if (z >= 0) return std::log1p(std::exp(-z));
    return -z + std::log1p(std::exp(z));
}

double dpo_loss(double pc, double pr, double rc, double rr, double beta) {
    return neg_log_sigmoid(beta * ((pc - rc) - (pr - rr)));
}

DpoTerms dpo_terms(double pc, double pr, double rc, double rr, double beta) {
    const double z = beta * ((pc - rc) - (pr - rr));
    // d/dz [-log sigmoid(z)] = -sigmoid(-z)
    const double s = z >= 0 ? std::exp(-z) / (1.0 + std::exp(-z)) : 1.0 / (1.0 + std::exp(z));
    return {neg_log_sigmoid(z), -beta * s, beta * s};
}

template <class T>
double dpo_example_grad(const Weights<T>& policy, const PreferenceExample& ex, double rc, double rr, double beta,
                        double scale, Weights<T>& grads) {
    const auto chosen = logprob_tape(policy, ex.prompt, ex.chosen);
    const auto rejected = logprob_tape(policy, ex.prompt, ex.rejected);
    const auto terms = dpo_terms(chosen.logprob, rejected.logprob, rc, rr, beta);
    accumulate_logprob_grad(policy, chosen, scale * terms.d_chosen, grads);
    accumulate_logprob_grad(policy, rejected, scale * terms.d_rejected, grads);
    return terms.loss;
}

template <class T>
double global_grad_norm(const Weights<T>& grads) {
    double sq = 0.0;
    for (const auto* t : tensor_refs(grads))
        for (auto g : *t) sq += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(sq);
}

template <class T>
double clip_grad_norm(Weights<T>& grads, double max_norm) {
    const double norm = global_grad_norm(grads);
    if (norm > max_norm && norm > 0) {
        const double s = max_norm / norm;
        for (auto* t : tensor_refs(grads))
            for (auto& g : *t) g = static_cast<T>(static_cast<double>(g) * s);
    }
    return norm;
}

template <class T>
void RmsProp<T>::step(Weights<T>& w, const Weights<T>& grads, double lr) {
    auto ws = tensor_refs(w);
    auto gs = tensor_refs(grads);
    auto vs = tensor_refs(square_avg_);
    for (std::size_t t = 0; t < ws.size(); ++t) {
        auto& wt = *ws[t];
        const auto& gt = *gs[t];
        auto& vt = *vs[t];
        for (std::size_t i = 0; i < wt.size(); ++i) {
            const double g = gt[i];
            const double v = decay * static_cast<double>(vt[i]) + (1.0 - decay) * g * g;
            vt[i] = static_cast<T>(v);
            wt[i] = static_cast<T>(static_cast<double>(wt[i]) - lr * g / std::sqrt(v + eps));
        }
    }
}

template <class T>
Adam<T>::Adam(const ModelConfig& config)
    : m_(Weights<T>::zeros_like_state(config)), v_(Weights<T>::zeros_like_state(config)) {}

template <class T>
void Adam<T>::step(Weights<T>& w, const Weights<T>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    auto ws = tensor_refs(w);
    auto gs = tensor_refs(grads);
    auto ms = tensor_refs(m_);
    auto vs = tensor_refs(v_);
    for (std::size_t t = 0; t < ws.size(); ++t) {
        auto& wt = *ws[t];
        const auto& gt = *gs[t];
        auto& mt = *ms[t];
        auto& vt = *vs[t];
        for (std::size_t i = 0; i < wt.size(); ++i) {
            const double g = gt[i];
            const double m = beta1 * mt[i] + (1 - beta1) * g;
            const double v = beta2 * vt[i] + (1 - beta2) * g * g;
            mt[i] = static_cast<T>(m);
            vt[i] = static_cast<T>(v);
            wt[i] = static_cast<T>(wt[i] - lr * (m / c1) / (std::sqrt(v / c2) + eps));
        }
    }
}

double dpo_dataset_loss(const Weights<float>& policy, const std::vector<PreferenceExample>& data,
                        const std::vector<std::pair<double, double>>& ref_lps, double beta) {
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double pc = sequence_logprob(policy, data[i].prompt, data[i].chosen);
        const double pr = sequence_logprob(policy, data[i].prompt, data[i].rejected);
        total += dpo_loss(pc, pr, ref_lps[i].first, ref_lps[i].second, beta);
    }
    return total / static_cast<double>(data.size());
}

DpoResult train_dpo(const Weights<float>& policy, const Weights<float>& reference,
                    const std::vector<PreferenceExample>& train, const std::vector<PreferenceExample>& valid,
                    const DpoConfig& config) {
    config.validate();
    if (train.empty()) throw DataError("train_dpo: empty training set");
    if (valid.empty()) throw DataError("train_dpo: empty validation set");
    if (!(policy.config == reference.config)) throw DataError("train_dpo: reference model config differs from policy");
    for (const auto& ex : train) ex.validate(policy.config);
    for (const auto& ex : valid) ex.validate(policy.config);

    auto ref_lps = [&](const std::vector<PreferenceExample>& data) {
        std::vector<std::pair<double, double>> out;
        out.reserve(data.size());
        for (const auto& ex : data)
            out.emplace_back(sequence_logprob(reference, ex.prompt, ex.chosen),
                             sequence_logprob(reference, ex.prompt, ex.rejected));
        return out;
    };
    const auto train_ref = ref_lps(train);
    const auto valid_ref = ref_lps(valid);

    DpoResult result{policy, {}, 0, 0.0, false};
    Weights<float> w = policy;
    Weights<float> grads = Weights<float>::zeros_like_state(policy.config);
    RmsProp<float> opt(policy.config);
    std::mt19937_64 rng(config.seed);

    double best = dpo_dataset_loss(w, valid, valid_ref, config.beta);
    if (!std::isfinite(best)) throw InvariantError("train_dpo: initial validation loss is not finite");
    result.best_valid_loss = best;
    result.history.push_back({0, dpo_dataset_loss(w, train, train_ref, config.beta), best});

    std::size_t step = 0, stalls = 0;
    double running = 0.0;
    std::size_t running_n = 0;
    const std::size_t per_step = config.batch_size * config.grad_accum;
    const std::size_t steps_per_epoch = (train.size() + per_step - 1) / per_step;
    const std::size_t eval_every = config.eval_every ? config.eval_every : steps_per_epoch;

    std::vector<std::size_t> order(train.size());
    for (std::size_t epoch = 0; epoch < config.epochs && !result.early_stopped; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle_indices(order, rng);
        for (std::size_t start = 0; start < order.size(); start += per_step) {
            const std::size_t end = std::min(order.size(), start + per_step);
            zero(grads);
            const double scale = 1.0 / static_cast<double>(end - start);
            for (std::size_t b = start; b < end; ++b) {
                const auto i = order[b];
                running += dpo_example_grad(w, train[i], train_ref[i].first, train_ref[i].second, config.beta, scale,
                                            grads);
                ++running_n;
            }
            clip_grad_norm(grads, config.max_grad_norm);
            opt.step(w, grads, config.learning_rate);
            ++step;

            if (step % eval_every == 0) {
                const double vl = dpo_dataset_loss(w, valid, valid_ref, config.beta);
                if (!std::isfinite(vl))
                    throw InvariantError("train_dpo: validation loss diverged (non-finite) at step " +
                                         std::to_string(step));
                result.history.push_back({step, running / static_cast<double>(running_n), vl});
                running = 0.0;
                running_n = 0;
                if (vl < best) {
                    best = vl;
                    result.weights = w;
                    result.best_step = step;
                    result.best_valid_loss = vl;
                    stalls = 0;
                } else if (++stalls >= config.patience) {
                    result.early_stopped = true;
                    break;
                }
            }
        }
    }
    return result;
}

double corpus_cross_entropy(const Weights<float>& w, const std::vector<std::vector<TokenId>>& corpus) {
    double nll = 0.0;
    std::size_t count = 0;
    for (const auto& seq : corpus) {
        if (seq.size() < 2) continue;
        const std::span<const TokenId> s(seq);
        nll -= sequence_logprob(w, s.first(1), s.subspan(1));
        count += seq.size() - 1;
    }
    if (count == 0) throw DataError("corpus_cross_entropy: no predictable tokens");
    return nll / static_cast<double>(count);
}

PretrainResult pretrain_lm(const Weights<float>& init, const std::vector<std::vector<TokenId>>& corpus,
                           const PretrainConfig& config) {
    config.validate();
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (corpus[i].size() >= 2) {
            check_tokens(init.config, corpus[i]);
            usable.push_back(i);
        }
    }
    if (usable.empty()) throw DataError("pretrain_lm: empty corpus");

    PretrainResult result{init, {}};
    auto& w = result.weights;
    Weights<float> grads = Weights<float>::zeros_like_state(init.config);
    Adam<float> opt(init.config);
    std::mt19937_64 rng(config.seed);
    const std::size_t steps_per_epoch = (usable.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * config.epochs;
    std::size_t step = 0;
    std::vector<std::size_t> order = usable;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_indices(order, rng);
        double epoch_nll = 0.0;
        std::size_t epoch_tokens = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::size_t tokens = 0;
            for (std::size_t b = start; b < end; ++b) tokens += corpus[order[b]].size() - 1;
            zero(grads);
            const double coeff = -1.0 / static_cast<double>(tokens);  // gradient of mean NLL
            for (std::size_t b = start; b < end; ++b) {
                const std::span<const TokenId> s(corpus[order[b]]);
                epoch_nll -= sequence_logprob_grad(w, s.first(1), s.subspan(1), coeff, grads);
            }
            epoch_tokens += tokens;
            clip_grad_norm(grads, config.max_grad_norm);
            const double frac = total_steps > 1 ? static_cast<double>(step) / static_cast<double>(total_steps - 1) : 0.0;
            const double lr = config.learning_rate * (1.0 - (1.0 - config.final_lr_fraction) * frac);
            if (lr != 0.0) opt.step(w, grads, lr);
            ++step;
        }
        result.epoch_loss.push_back(epoch_nll / static_cast<double>(epoch_tokens));
    }
    return result;
}

void write_loss_history_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << "step,train_loss,valid_loss\n";
    f.precision(17);
    for (const auto& r : history) f << r.step << ',' << r.train_loss << ',' << r.valid_loss << '\n';
}

template double sequence_logprob<float>(const Weights<float>&, std::span<const TokenId>, std::span<const TokenId>);
template double sequence_logprob<double>(const Weights<double>&, std::span<const TokenId>, std::span<const TokenId>);
template double sequence_logprob_grad<float>(const Weights<float>&, std::span<const TokenId>, std::span<const TokenId>,
                                             double, Weights<float>&);
template double sequence_logprob_grad<double>(const Weights<double>&, std::span<const TokenId>,
                                              std::span<const TokenId>, double, Weights<double>&);
template LogprobTape<float> logprob_tape<float>(const Weights<float>&, std::span<const TokenId>,
                                                std::span<const TokenId>);
template LogprobTape<double> logprob_tape<double>(const Weights<double>&, std::span<const TokenId>,
                                                  std::span<const TokenId>);
template void accumulate_logprob_grad<float>(const Weights<float>&, const LogprobTape<float>&, double, Weights<float>&);
template void accumulate_logprob_grad<double>(const Weights<double>&, const LogprobTape<double>&, double, Weights<double>&);
template double dpo_example_grad<float>(const Weights<float>&, const PreferenceExample&, double, double, double,
                                        double, Weights<float>&);
template double dpo_example_grad<double>(const Weights<double>&, const PreferenceExample&, double, double, double,
                                         double, Weights<double>&);
template double global_grad_norm<float>(const Weights<float>&);
template double global_grad_norm<double>(const Weights<double>&);
template double clip_grad_norm<float>(Weights<float>&, double);
template double clip_grad_norm<double>(Weights<double>&, double);
template class RmsProp<float>;
template class RmsProp<double>;
template class Adam<float>;
template class Adam<double>;

}  // namespace detox
