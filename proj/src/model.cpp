#include "detox/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "detox/error.hpp"
#include "detox/kernels.hpp"

namespace detox {

namespace k = kernels;

void InterventionSpec::validate(const ModelConfig& config) const {
    std::set<NeuronRef> seen;
    for (const auto& t : targets) {
        if (t.layer >= config.n_layers || t.neuron >= config.d_mlp)
            throw ConfigError("intervention target (" + std::to_string(t.layer) + ", " + std::to_string(t.neuron) +
                              ") out of range");
        if (!seen.insert(t).second)
            throw ConfigError("intervention target (" + std::to_string(t.layer) + ", " + std::to_string(t.neuron) +
                              ") duplicated");
    }
    if (!std::isfinite(gamma)) throw ConfigError("intervention gamma must be finite");
}

std::vector<std::vector<char>> intervention_mask(const ModelConfig& config, const InterventionSpec* spec) {
    std::vector<std::vector<char>> mask;
    if (!spec || spec->targets.empty()) return mask;
    spec->validate(config);
    mask.assign(config.n_layers, std::vector<char>(config.d_mlp, 0));
    for (const auto& t : spec->targets) mask[t.layer][t.neuron] = 1;
    return mask;
}

namespace {

template <class T>
void apply_intervention(T* acts, const std::vector<char>& mask, const InterventionSpec& spec) {
    const T gamma = static_cast<T>(spec.gamma);
    for (std::size_t j = 0; j < mask.size(); ++j) {
        if (!mask[j]) continue;
        if (spec.mode == InterventionMode::add_offset)
            acts[j] += gamma;
        else
            acts[j] = std::min(acts[j], T(0));
    }
}

template <class T>
void layer_norm_backward(const T* dy, const T* xhat, T rstd, const T* gain, T* dgain, T* dx, std::size_t d) {
    // y = gain * xhat;  dx = rstd * (g - mean(g) - xhat * mean(g * xhat)) with g = dy * gain
    T mean_g = 0, mean_gx = 0;
    for (std::size_t c = 0; c < d; ++c) {
        const T g = dy[c] * gain[c];
        dgain[c] += dy[c] * xhat[c];
        mean_g += g;
        mean_gx += g * xhat[c];
    }
    mean_g /= static_cast<T>(d);
    mean_gx /= static_cast<T>(d);
    for (std::size_t c = 0; c < d; ++c) dx[c] += rstd * (dy[c] * gain[c] - mean_g - xhat[c] * mean_gx);
}

}  // namespace

void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens) {
    if (tokens.empty()) throw DataError("forward: empty token sequence");
    if (tokens.size() > config.max_seq_len)
        throw DataError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                        std::to_string(config.max_seq_len));
    for (auto t : tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size)
            throw DataError("forward: token id " + std::to_string(t) + " out of range");
}

template <class T>
std::span<const T> ResidualTrace<T>::residual(std::size_t layer, std::size_t pos, std::size_t d) const {
    const auto& v = layer < layers.size() ? layers[layer].resid_pre : layers.back().resid_post;
    return {v.data() + pos * d, d};
}

template <class T>
ForwardResult<T> forward(const Weights<T>& w, std::span<const TokenId> tokens, const InterventionSpec* intervention) {
    const auto& cfg = w.config;
    check_tokens(cfg, tokens);
    const auto mask = intervention_mask(cfg, intervention);
    const std::size_t n = tokens.size(), d = cfg.d_model, m = cfg.d_mlp, H = cfg.n_heads, hd = cfg.head_dim();
    const std::size_t V = cfg.vocab_size;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    ForwardResult<T> out;
    auto& tr = out.trace;
    tr.seq_len = n;
    tr.tokens.assign(tokens.begin(), tokens.end());
    tr.intervened = !mask.empty();
    tr.layers.resize(cfg.n_layers);

    std::vector<T> x(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        const T* te = w.token_embedding.data() + static_cast<std::size_t>(tokens[i]) * d;
        const T* pe = w.positional_embedding.data() + i * d;
        for (std::size_t c = 0; c < d; ++c) x[i * d + c] = te[c] + pe[c];
    }

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& L = w.layers[l];
        auto& lt = tr.layers[l];
        lt.resid_pre = x;
        lt.ln1_out.resize(n * d);
        lt.ln1_xhat.resize(n * d);
        lt.ln1_rstd.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            lt.ln1_rstd[i] = k::layer_norm_row(&x[i * d], L.ln1_gain.data(), &lt.ln1_out[i * d], &lt.ln1_xhat[i * d], d);
        lt.q.resize(n * d);
        lt.k.resize(n * d);
        lt.v.resize(n * d);
        k::matmul_nt(lt.ln1_out.data(), L.w_q.data(), lt.q.data(), n, d, d);
        k::matmul_nt(lt.ln1_out.data(), L.w_k.data(), lt.k.data(), n, d, d);
        k::matmul_nt(lt.ln1_out.data(), L.w_v.data(), lt.v.data(), n, d, d);

        lt.att.assign(H * n * n, T(0));
        lt.att_concat.assign(n * d, T(0));
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < n; ++i) {
                T* p = &lt.att[(h * n + i) * n];
                const T* qi = &lt.q[i * d + h * hd];
                for (std::size_t s = 0; s <= i; ++s) p[s] = k::dot(qi, &lt.k[s * d + h * hd], hd) * scale;
                k::softmax_inplace(p, i + 1);
                T* o = &lt.att_concat[i * d + h * hd];
                for (std::size_t s = 0; s <= i; ++s) {
                    const T* vs = &lt.v[s * d + h * hd];
                    for (std::size_t c = 0; c < hd; ++c) o[c] += p[s] * vs[c];
                }
            }
        }
        lt.attn_out.resize(n * d);
        k::matmul_nt(lt.att_concat.data(), L.w_o.data(), lt.attn_out.data(), n, d, d);
        lt.resid_mid.resize(n * d);
        for (std::size_t i = 0; i < n * d; ++i) lt.resid_mid[i] = x[i] + lt.attn_out[i];

        lt.ln2_out.resize(n * d);
        lt.ln2_xhat.resize(n * d);
        lt.ln2_rstd.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            lt.ln2_rstd[i] =
                k::layer_norm_row(&lt.resid_mid[i * d], L.ln2_gain.data(), &lt.ln2_out[i * d], &lt.ln2_xhat[i * d], d);
        lt.pre_act.resize(n * m);
        k::matmul_nt(lt.ln2_out.data(), L.w_up.data(), lt.pre_act.data(), n, d, m);
        lt.activations.resize(n * m);
        for (std::size_t i = 0; i < n * m; ++i) lt.activations[i] = k::gelu(lt.pre_act[i]);
        if (!mask.empty())
            for (std::size_t i = 0; i < n; ++i) apply_intervention(&lt.activations[i * m], mask[l], *intervention);
        lt.mlp_out.resize(n * d);
        k::matmul_nt(lt.activations.data(), L.w_down.data(), lt.mlp_out.data(), n, m, d);
        lt.resid_post.resize(n * d);
        for (std::size_t i = 0; i < n * d; ++i) lt.resid_post[i] = lt.resid_mid[i] + lt.mlp_out[i];
        x = lt.resid_post;
    }

    tr.final_out.resize(n * d);
    tr.final_xhat.resize(n * d);
    tr.final_rstd.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        tr.final_rstd[i] = k::layer_norm_row(&x[i * d], w.final_gain.data(), &tr.final_out[i * d], &tr.final_xhat[i * d], d);
    out.logits.resize(n * V);
    k::matmul_nt(tr.final_out.data(), w.unembedding.data(), out.logits.data(), n, d, V);
    return out;
}

template <class T>
void backward(const Weights<T>& w, const ResidualTrace<T>& tr, std::span<const T> dlogits, Weights<T>& g) {
    if (tr.layers.size() != w.config.n_layers || tr.seq_len == 0)
        throw InvariantError("backward: trace does not match model (tape missing?)");
    if (tr.intervened) throw InvariantError("backward: cannot differentiate an intervened forward pass");
    const auto& cfg = w.config;
    const std::size_t n = tr.seq_len, d = cfg.d_model, m = cfg.d_mlp, H = cfg.n_heads, hd = cfg.head_dim();
    const std::size_t V = cfg.vocab_size;
    if (dlogits.size() != n * V) throw InvariantError("backward: dlogits has wrong size");
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    std::vector<T> dfinal(n * d, T(0));
    k::matmul_tn_acc(dlogits.data(), tr.final_out.data(), g.unembedding.data(), n, V, d);
    k::matmul_nn_acc(dlogits.data(), w.unembedding.data(), dfinal.data(), n, V, d);

    std::vector<T> dres(n * d, T(0));
    for (std::size_t i = 0; i < n; ++i)
        layer_norm_backward(&dfinal[i * d], &tr.final_xhat[i * d], tr.final_rstd[i], w.final_gain.data(),
                            g.final_gain.data(), &dres[i * d], d);

    std::vector<T> dact(n * m), dln(n * d), dconcat(n * d), dq(n * d), dk(n * d), dv(n * d), dp(n);
    for (std::size_t l = cfg.n_layers; l-- > 0;) {
        const auto& L = w.layers[l];
        auto& G = g.layers[l];
        const auto& lt = tr.layers[l];

        // MLP: dres is d(resid_post), and flows unchanged into resid_mid.
        std::fill(dact.begin(), dact.end(), T(0));
        k::matmul_nn_acc(dres.data(), L.w_down.data(), dact.data(), n, d, m);
        k::matmul_tn_acc(dres.data(), lt.activations.data(), G.w_down.data(), n, d, m);
        for (std::size_t i = 0; i < n * m; ++i) dact[i] *= k::gelu_grad(lt.pre_act[i]);
        k::matmul_tn_acc(dact.data(), lt.ln2_out.data(), G.w_up.data(), n, m, d);
        std::fill(dln.begin(), dln.end(), T(0));
        k::matmul_nn_acc(dact.data(), L.w_up.data(), dln.data(), n, m, d);
        for (std::size_t i = 0; i < n; ++i)
            layer_norm_backward(&dln[i * d], &lt.ln2_xhat[i * d], lt.ln2_rstd[i], L.ln2_gain.data(), G.ln2_gain.data(),
                                &dres[i * d], d);

        // Attention.
        k::matmul_tn_acc(dres.data(), lt.att_concat.data(), G.w_o.data(), n, d, d);
        std::fill(dconcat.begin(), dconcat.end(), T(0));
        k::matmul_nn_acc(dres.data(), L.w_o.data(), dconcat.data(), n, d, d);
        std::fill(dq.begin(), dq.end(), T(0));
        std::fill(dk.begin(), dk.end(), T(0));
        std::fill(dv.begin(), dv.end(), T(0));
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < n; ++i) {
                const T* p = &lt.att[(h * n + i) * n];
                const T* dout = &dconcat[i * d + h * hd];
                T dot_pp = 0;
                for (std::size_t s = 0; s <= i; ++s) {
                    dp[s] = k::dot(dout, &lt.v[s * d + h * hd], hd);
                    dot_pp += dp[s] * p[s];
                    T* dvs = &dv[s * d + h * hd];
                    for (std::size_t c = 0; c < hd; ++c) dvs[c] += p[s] * dout[c];
                }
                T* dqi = &dq[i * d + h * hd];
                const T* qi = &lt.q[i * d + h * hd];
                for (std::size_t s = 0; s <= i; ++s) {
                    const T ds = p[s] * (dp[s] - dot_pp) * scale;
                    if (ds == T(0)) continue;
                    const T* ks = &lt.k[s * d + h * hd];
                    T* dks = &dk[s * d + h * hd];
                    for (std::size_t c = 0; c < hd; ++c) {
                        dqi[c] += ds * ks[c];
                        dks[c] += ds * qi[c];
                    }
                }
            }
        }
        k::matmul_tn_acc(dq.data(), lt.ln1_out.data(), G.w_q.data(), n, d, d);
        k::matmul_tn_acc(dk.data(), lt.ln1_out.data(), G.w_k.data(), n, d, d);
        k::matmul_tn_acc(dv.data(), lt.ln1_out.data(), G.w_v.data(), n, d, d);
        std::fill(dln.begin(), dln.end(), T(0));
        k::matmul_nn_acc(dq.data(), L.w_q.data(), dln.data(), n, d, d);
        k::matmul_nn_acc(dk.data(), L.w_k.data(), dln.data(), n, d, d);
        k::matmul_nn_acc(dv.data(), L.w_v.data(), dln.data(), n, d, d);
        for (std::size_t i = 0; i < n; ++i)
            layer_norm_backward(&dln[i * d], &lt.ln1_xhat[i * d], lt.ln1_rstd[i], L.ln1_gain.data(), G.ln1_gain.data(),
                                &dres[i * d], d);
    }

    for (std::size_t i = 0; i < n; ++i) {
        T* te = g.token_embedding.data() + static_cast<std::size_t>(tr.tokens[i]) * d;
        T* pe = g.positional_embedding.data() + i * d;
        for (std::size_t c = 0; c < d; ++c) {
            te[c] += dres[i * d + c];
            pe[c] += dres[i * d + c];
        }
    }
}

template <class T>
Decoder<T>::Decoder(const Weights<T>& w, const InterventionSpec* intervention)
    : w_(w), mask_(intervention_mask(w.config, intervention)), spec_(intervention) {
    const auto& cfg = w.config;
    const std::size_t d = cfg.d_model;
    k_cache_.assign(cfg.n_layers, std::vector<T>(cfg.max_seq_len * d));
    v_cache_.assign(cfg.n_layers, std::vector<T>(cfg.max_seq_len * d));
    acts_.assign(cfg.n_layers, std::vector<T>(cfg.d_mlp));
    x_.resize(d);
    h_.resize(d);
    q_.resize(d);
    att_.resize(cfg.max_seq_len);
    concat_.resize(d);
    tmp_.resize(d);
    up_.resize(cfg.d_mlp);
    logits_.resize(cfg.vocab_size);
}

template <class T>
std::span<const T> Decoder<T>::step(TokenId token) {
    const auto& cfg = w_.config;
    if (pos_ >= cfg.max_seq_len) throw DataError("decoder: max_seq_len exceeded");
    if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size)
        throw DataError("decoder: token id " + std::to_string(token) + " out of range");
    const std::size_t d = cfg.d_model, m = cfg.d_mlp, hd = cfg.head_dim(), i = pos_;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const T* te = w_.token_embedding.data() + static_cast<std::size_t>(token) * d;
    const T* pe = w_.positional_embedding.data() + i * d;
    for (std::size_t c = 0; c < d; ++c) x_[c] = te[c] + pe[c];

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& L = w_.layers[l];
        k::layer_norm_row(x_.data(), L.ln1_gain.data(), h_.data(), static_cast<T*>(nullptr), d);
        k::matmul_nt(h_.data(), L.w_q.data(), q_.data(), 1, d, d);
        k::matmul_nt(h_.data(), L.w_k.data(), &k_cache_[l][i * d], 1, d, d);
        k::matmul_nt(h_.data(), L.w_v.data(), &v_cache_[l][i * d], 1, d, d);
        std::fill(concat_.begin(), concat_.end(), T(0));
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            for (std::size_t s = 0; s <= i; ++s) att_[s] = k::dot(&q_[h * hd], &k_cache_[l][s * d + h * hd], hd) * scale;
            k::softmax_inplace(att_.data(), i + 1);
            T* o = &concat_[h * hd];
            for (std::size_t s = 0; s <= i; ++s) {
                const T* vs = &v_cache_[l][s * d + h * hd];
                for (std::size_t c = 0; c < hd; ++c) o[c] += att_[s] * vs[c];
            }
        }
        k::matmul_nt(concat_.data(), L.w_o.data(), tmp_.data(), 1, d, d);
        for (std::size_t c = 0; c < d; ++c) x_[c] = x_[c] + tmp_[c];
        k::layer_norm_row(x_.data(), L.ln2_gain.data(), h_.data(), static_cast<T*>(nullptr), d);
        k::matmul_nt(h_.data(), L.w_up.data(), up_.data(), 1, d, m);
        auto& a = acts_[l];
        for (std::size_t j = 0; j < m; ++j) a[j] = k::gelu(up_[j]);
        if (!mask_.empty()) apply_intervention(a.data(), mask_[l], *spec_);
        k::matmul_nt(a.data(), L.w_down.data(), tmp_.data(), 1, m, d);
        for (std::size_t c = 0; c < d; ++c) x_[c] = x_[c] + tmp_[c];
    }
    k::layer_norm_row(x_.data(), w_.final_gain.data(), h_.data(), static_cast<T*>(nullptr), d);
    k::matmul_nt(h_.data(), w_.unembedding.data(), logits_.data(), 1, d, cfg.vocab_size);
    ++pos_;
    return logits_;
}

template <class T>
std::span<const T> Decoder<T>::feed(std::span<const TokenId> tokens) {
    if (tokens.empty()) throw DataError("decoder: empty prompt");
    std::span<const T> out;
    for (auto t : tokens) out = step(t);
    return out;
}

template <class T>
std::span<const T> Decoder<T>::last_activations(std::size_t layer) const {
    return acts_.at(layer);
}

std::vector<SubUpdate> mlp_sub_updates(const Weights<float>& w, std::size_t layer, std::span<const float> x) {
    const auto& cfg = w.config;
    if (layer >= cfg.n_layers) throw DataError("mlp_sub_updates: layer " + std::to_string(layer) + " out of range");
    if (x.size() != cfg.d_model) throw DataError("mlp_sub_updates: input has wrong dimension");
    const std::size_t d = cfg.d_model, m = cfg.d_mlp;
    const auto& L = w.layers[layer];
    std::vector<SubUpdate> out(m);
    for (std::size_t j = 0; j < m; ++j) {
        const float a = k::gelu(k::dot(L.w_up.data() + j * d, x.data(), d));
        out[j].activation = a;
        out[j].contribution.resize(d);
        for (std::size_t c = 0; c < d; ++c)
            out[j].contribution[c] = static_cast<double>(a) * static_cast<double>(L.w_down[c * m + j]);
    }
    return out;
}

std::vector<float> mlp_output(const Weights<float>& w, std::size_t layer, std::span<const float> x) {
    const auto& cfg = w.config;
    if (layer >= cfg.n_layers) throw DataError("mlp_output: layer " + std::to_string(layer) + " out of range");
    const std::size_t d = cfg.d_model, m = cfg.d_mlp;
    const auto& L = w.layers[layer];
    std::vector<float> u(m), out(d);
    k::matmul_nt(x.data(), L.w_up.data(), u.data(), 1, d, m);
    for (auto& v : u) v = k::gelu(v);
    k::matmul_nt(u.data(), L.w_down.data(), out.data(), 1, m, d);
    return out;
}

template struct ResidualTrace<float>;
template struct ResidualTrace<double>;
template ForwardResult<float> forward<float>(const Weights<float>&, std::span<const TokenId>, const InterventionSpec*);
template ForwardResult<double> forward<double>(const Weights<double>&, std::span<const TokenId>, const InterventionSpec*);
template void backward<float>(const Weights<float>&, const ResidualTrace<float>&, std::span<const float>, Weights<float>&);
template void backward<double>(const Weights<double>&, const ResidualTrace<double>&, std::span<const double>,
                               Weights<double>&);
template class Decoder<float>;
template class Decoder<double>;

}  // namespace detox
