#include "detox/mechanism.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "detox/error.hpp"
#include "detox/kernels.hpp"

namespace detox {

std::vector<SubUpdateRecord> rank_value_vectors(const Weights<float>& w, std::span<const double> probe,
                                                std::size_t top_k) {
    const auto& cfg = w.config;
    if (probe.size() != cfg.d_model)
        throw DataError("rank_value_vectors: probe dimension " + std::to_string(probe.size()) + " != d_model " +
                        std::to_string(cfg.d_model));
    double probe_norm = 0.0;
    for (double p : probe) probe_norm += p * p;
    probe_norm = std::sqrt(probe_norm);

    const std::size_t d = cfg.d_model, m = cfg.d_mlp;
    std::vector<SubUpdateRecord> all;
    all.reserve(cfg.n_layers * m);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& wd = w.layers[l].w_down;
        for (std::size_t j = 0; j < m; ++j) {
            double dotp = 0.0, norm = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double v = wd[c * m + j];
                dotp += v * probe[c];
                norm += v * v;
            }
            norm = std::sqrt(norm);
            double cos = (norm > 0 && probe_norm > 0) ? dotp / (norm * probe_norm) : 0.0;
            cos = std::clamp(cos, -1.0, 1.0);
            all.push_back({l, j, cos, std::nullopt, {}});
        }
    }
    std::stable_sort(all.begin(), all.end(), [](const SubUpdateRecord& a, const SubUpdateRecord& b) {
        return a.cosine_to_probe > b.cosine_to_probe;
    });
    if (all.size() > top_k) all.resize(top_k);
    return all;
}

std::vector<PromotedToken> project_to_vocab(const Weights<float>& w, const Vocabulary& vocab, std::size_t layer,
                                            std::size_t neuron, std::size_t top_n) {
    const auto& cfg = w.config;
    if (layer >= cfg.n_layers || neuron >= cfg.d_mlp)
        throw DataError("project_to_vocab: (" + std::to_string(layer) + ", " + std::to_string(neuron) +
                        ") out of range");
    const auto value = w.value_vector(layer, neuron);
    const std::size_t V = cfg.vocab_size, d = cfg.d_model;
    std::vector<PromotedToken> out(V);
    for (std::size_t t = 0; t < V; ++t) {
        double s = 0.0;
        const float* row = w.unembedding.data() + t * d;
        for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(row[c]) * static_cast<double>(value[c]);
        out[t] = {static_cast<TokenId>(t), t < vocab.size() ? vocab.token(static_cast<TokenId>(t)) : std::string(), s};
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const PromotedToken& a, const PromotedToken& b) { return a.score > b.score; });
    if (out.size() > top_n) out.resize(top_n);
    return out;
}

double ActivationProfile::mean(const std::string& language, NeuronRef target) const {
    const auto it = means.find(language);
    if (it == means.end()) throw DataError("activation profile: no language '" + language + "'");
    for (std::size_t i = 0; i < targets.size(); ++i)
        if (targets[i] == target) return it->second[i];
    throw DataError("activation profile: target not profiled");
}

ActivationProfile collect_activations(const Weights<float>& w,
                                      const std::map<std::string, std::vector<std::vector<TokenId>>>& prompts,
                                      const std::vector<NeuronRef>& targets, const ProfileOptions& options,
                                      const std::string& phase) {
    if (targets.empty()) throw DataError("collect_activations: no targets");
    if (options.horizon < 1) throw ConfigError("collect_activations: horizon must be >= 1");
    for (const auto& t : targets)
        if (t.layer >= w.config.n_layers || t.neuron >= w.config.d_mlp)
            throw DataError("collect_activations: target out of range");
    ActivationProfile profile;
    profile.phase = phase;
    profile.horizon = options.horizon;
    profile.targets = targets;

    for (const auto& [lang, plist] : prompts) {
        if (plist.empty()) throw DataError("collect_activations: no prompts for '" + lang + "'");
        std::vector<std::vector<double>> per_prompt(plist.size(), std::vector<double>(targets.size(), 0.0));
        std::vector<char> cut(plist.size(), 0);
        const auto np = static_cast<std::ptrdiff_t>(plist.size());
#pragma omp parallel for schedule(dynamic)
        for (std::ptrdiff_t pi = 0; pi < np; ++pi) {
            const auto p = static_cast<std::size_t>(pi);
            const auto& prompt = plist[p];
            check_tokens(w.config, prompt);
            Rng rng(mix_seed(options.sampling.seed, p));
            Decoder<float> dec(w);
            auto logits = dec.feed(prompt);
            auto& sums = per_prompt[p];
            std::size_t counted = 0;
            for (std::size_t h = 0; h < options.horizon; ++h) {
                if (dec.position() >= w.config.max_seq_len) break;
                const TokenId next = options.decode == ProfileDecode::greedy
                                         ? argmax_token(logits)
                                         : sample_token(logits, options.sampling.temperature, options.sampling.top_p, rng);
                logits = dec.step(next);  // activations now belong to the generated token's position
                for (std::size_t t = 0; t < targets.size(); ++t)
                    sums[t] += static_cast<double>(dec.last_activations(targets[t].layer)[targets[t].neuron]);
                ++counted;
            }
            if (counted < options.horizon) cut[p] = 1;
            for (auto& s : sums) s = counted ? s / static_cast<double>(counted) : 0.0;
        }
        std::vector<double> mean(targets.size(), 0.0);
        for (const auto& row : per_prompt)
            for (std::size_t t = 0; t < targets.size(); ++t) mean[t] += row[t];
        for (auto& v : mean) v /= static_cast<double>(plist.size());
        profile.means[lang] = std::move(mean);
        profile.truncated = profile.truncated || std::any_of(cut.begin(), cut.end(), [](char c) { return c != 0; });
    }
    return profile;
}

std::vector<SubUpdateRecord> actual_sources(const std::vector<SubUpdateRecord>& potential,
                                            const ActivationProfile& profile, const std::string& language) {
    std::vector<SubUpdateRecord> out;
    for (const auto& r : potential) {
        const double a = profile.mean(language, r.ref());
        if (a > 0.0) {
            auto kept = r;
            kept.mean_activation = a;
            out.push_back(std::move(kept));
        }
    }
    return out;
}

std::vector<TokenId> intervene_generate(const Weights<float>& w, const InterventionSpec& spec,
                                        std::span<const TokenId> prompt, std::size_t length) {
    spec.validate(w.config);
    return greedy_generate(w, prompt, length, &spec);
}

std::vector<SweepRow> intervention_sweep(const Weights<float>& w, const Vocabulary& vocab,
                                         const std::vector<NeuronRef>& targets, const std::vector<double>& gammas,
                                         const std::map<std::string, std::vector<std::vector<TokenId>>>& prompts,
                                         ToxicityScorer& scorer, const SweepOptions& options) {
    std::vector<SweepRow> rows;
    auto gen = options.generation;
    gen.length = options.length;
    for (double gamma : gammas) {
        InterventionSpec spec{targets, gamma, options.mode};
        spec.validate(w.config);
        for (const auto& [lang, plist] : prompts) {
            std::vector<std::string> texts;
            std::vector<std::vector<std::string>> per_prompt(plist.size());
            const auto np = static_cast<std::ptrdiff_t>(plist.size());
#pragma omp parallel for schedule(dynamic)
            for (std::ptrdiff_t pi = 0; pi < np; ++pi) {
                const auto p = static_cast<std::size_t>(pi);
                for (const auto& c : sample_continuations(w, plist[p], gen, p, &spec))
                    per_prompt[p].push_back(vocab.detokenize(c));
            }
            for (auto& v : per_prompt) texts.insert(texts.end(), v.begin(), v.end());
            const auto scores = scorer.score(texts, lang);
            SweepRow row{gamma, lang, 0.0, 0, 0};
            for (const auto& s : scores) {
                if (s.ok()) {
                    row.avg_toxicity += *s.score;
                    ++row.n_scored;
                } else {
                    ++row.n_errors;
                }
            }
            if (row.n_scored) row.avg_toxicity /= static_cast<double>(row.n_scored);
            rows.push_back(row);
        }
    }
    return rows;
}

nlohmann::ordered_json to_json(const SubUpdateRecord& r) {
    nlohmann::ordered_json j;
    j["layer"] = r.layer;
    j["neuron"] = r.neuron;
    j["cosine_to_probe"] = r.cosine_to_probe;
    j["mean_activation"] = r.mean_activation ? nlohmann::ordered_json(*r.mean_activation) : nlohmann::ordered_json(nullptr);
    auto toks = nlohmann::ordered_json::array();
    for (const auto& t : r.promoted_tokens) toks.push_back({{"id", t.id}, {"token", t.token}, {"score", t.score}});
    j["promoted_tokens"] = toks;
    return j;
}

SubUpdateRecord sub_update_from_json(const nlohmann::json& j) {
    SubUpdateRecord r;
    r.layer = j.at("layer").get<std::size_t>();
    r.neuron = j.at("neuron").get<std::size_t>();
    r.cosine_to_probe = j.at("cosine_to_probe").get<double>();
    if (j.contains("mean_activation") && !j["mean_activation"].is_null())
        r.mean_activation = j["mean_activation"].get<double>();
    if (j.contains("promoted_tokens"))
        for (const auto& t : j["promoted_tokens"])
            r.promoted_tokens.push_back({t.at("id").get<TokenId>(), t.at("token").get<std::string>(),
                                         t.at("score").get<double>()});
    return r;
}

void write_records_jsonl(const std::vector<SubUpdateRecord>& records, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    for (const auto& r : records) f << to_json(r).dump() << '\n';
}

std::vector<SubUpdateRecord> read_records_jsonl(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("missing records file " + path.string());
    std::vector<SubUpdateRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(sub_update_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ": " + e.what());
        }
    }
    return out;
}

void write_profiles_csv(const std::vector<ActivationProfile>& profiles, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f.precision(17);
    f << "language,layer,neuron,phase,mean_activation\n";
    for (const auto& p : profiles)
        for (const auto& [lang, means] : p.means)
            for (std::size_t t = 0; t < p.targets.size(); ++t)
                f << lang << ',' << p.targets[t].layer << ',' << p.targets[t].neuron << ',' << p.phase << ','
                  << means[t] << '\n';
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f.precision(17);
    f << "gamma,language,avg_toxicity,n_scored,n_errors\n";
    for (const auto& r : rows)
        f << r.gamma << ',' << r.language << ',' << r.avg_toxicity << ',' << r.n_scored << ',' << r.n_errors << '\n';
}

}  // namespace detox
