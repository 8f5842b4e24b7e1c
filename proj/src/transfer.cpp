#include "detox/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "detox/error.hpp"
#include "detox/sampling.hpp"
#include "json.hpp"

namespace detox {

Pooling pooling_from_string(const std::string& s) {
    if (s == "mean") return Pooling::mean;
    if (s == "last_token" || s == "last") return Pooling::last_token;
    throw ConfigError("unknown pooling '" + s + "'");
}

std::string to_string(Pooling p) { return p == Pooling::mean ? "mean" : "last_token"; }

SentenceReps sentence_reps(const Weights<float>& w, std::span<const TokenId> tokens, Pooling pooling) {
    if (tokens.empty()) throw DataError("sentence_reps: sentence has no tokens");
    const auto res = forward(w, tokens);
    const std::size_t d = w.config.d_model, n = tokens.size(), L = w.config.n_layers;
    SentenceReps reps(L + 1, std::vector<double>(d, 0.0));
    for (std::size_t l = 0; l <= L; ++l) {
        if (pooling == Pooling::last_token) {
            const auto row = res.trace.residual(l, n - 1, d);
            for (std::size_t c = 0; c < d; ++c) reps[l][c] = row[c];
            continue;
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = res.trace.residual(l, i, d);
            for (std::size_t c = 0; c < d; ++c) reps[l][c] += static_cast<double>(row[c]);
        }
        for (auto& v : reps[l]) v /= static_cast<double>(n);
    }
    return reps;
}

std::vector<SentenceReps> sentence_reps_batch(const Weights<float>& w, const std::vector<std::vector<TokenId>>& sentences,
                                              Pooling pooling) {
    std::vector<SentenceReps> out(sentences.size());
    for (const auto& s : sentences)
        if (s.empty()) throw DataError("sentence_reps: sentence has no tokens");
    const auto n = static_cast<std::ptrdiff_t>(sentences.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i)
        out[static_cast<std::size_t>(i)] = sentence_reps(w, sentences[static_cast<std::size_t>(i)], pooling);
    return out;
}

double retrieval_accuracy_layer(const std::vector<std::vector<double>>& source,
                                const std::vector<std::vector<double>>& pivot) {
    if (source.size() != pivot.size()) throw DataError("retrieval: source and pivot counts differ");
    if (source.empty()) throw DataError("retrieval: empty sentence set");
    auto normalized = [](const std::vector<std::vector<double>>& vs) {
        auto out = vs;
        for (auto& v : out) {
            double n = 0.0;
            for (double x : v) n += x * x;
            n = std::sqrt(n);
            if (n > 0)
                for (auto& x : v) x /= n;
        }
        return out;
    };
    const auto src = normalized(source);
    const auto piv = normalized(pivot);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < src.size(); ++i) {
        std::size_t best = 0;
        double best_sim = -INFINITY;
        for (std::size_t j = 0; j < piv.size(); ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < src[i].size(); ++c) s += src[i][c] * piv[j][c];
            if (s > best_sim) {
                best_sim = s;
                best = j;
            }
        }
        if (best == i) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(src.size());
}

RetrievalResult retrieval_accuracy(const std::vector<SentenceReps>& source, const std::vector<SentenceReps>& pivot) {
    if (source.size() != pivot.size()) throw DataError("retrieval: source and pivot counts differ");
    if (source.empty()) throw DataError("retrieval: empty sentence set");
    const std::size_t layers = source[0].size();
    RetrievalResult out;
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<std::vector<double>> s, p;
        for (std::size_t i = 0; i < source.size(); ++i) {
            if (source[i].size() != layers || pivot[i].size() != layers)
                throw DataError("retrieval: inconsistent layer counts");
            s.push_back(source[i][l]);
            p.push_back(pivot[i][l]);
        }
        out.per_layer.push_back(retrieval_accuracy_layer(s, p));
    }
    out.mean = std::accumulate(out.per_layer.begin(), out.per_layer.end(), 0.0) / static_cast<double>(layers);
    return out;
}

double pearson_r(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DataError("pearson: x and y differ in length");
    if (x.size() < 3) throw DataError("pearson: need at least 3 points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw DataError("pearson: zero variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

PearsonResult pearson(std::span<const double> x, std::span<const double> y, std::size_t n_permutations,
                      std::uint64_t seed) {
    PearsonResult out;
    out.r = pearson_r(x, y);
    out.n_permutations = n_permutations;
    out.seed = seed;
    if (n_permutations == 0) return out;
    Rng rng(seed);
    std::vector<double> perm(y.begin(), y.end());
    std::size_t hits = 0;
    const double observed = std::abs(out.r) - 1e-12;
    for (std::size_t k = 0; k < n_permutations; ++k) {
        for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.next() % i]);
        if (std::abs(pearson_r(x, perm)) >= observed) ++hits;
    }
    out.p = static_cast<double>(hits + 1) / static_cast<double>(n_permutations + 1);
    return out;
}

double emt_change_pct(double before, double after) {
    if (before == 0.0) throw DataError("emt_change_pct: baseline EMT is zero");
    return 100.0 * (before - after) / before;
}

TransferReport transfer_report(const std::vector<TransferRecord>& records, std::size_t n_permutations,
                               std::uint64_t seed) {
    if (records.size() < 3) throw DataError("transfer_report: need at least 3 languages");
    std::vector<double> x, y;
    for (const auto& r : records) {
        if (r.retrieval_accuracy < 0.0 || r.retrieval_accuracy > 1.0)
            throw DataError("transfer_report: retrieval accuracy outside [0,1] for " + r.language);
        x.push_back(r.retrieval_accuracy);
        y.push_back(r.emt_change_pct);
    }
    return {records, pearson(x, y, n_permutations, seed)};
}

void write_transfer_csv(const std::vector<TransferRecord>& records, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f.precision(17);
    f << "language,accuracy,emt_change_pct\n";
    for (const auto& r : records) f << r.language << ',' << r.retrieval_accuracy << ',' << r.emt_change_pct << '\n';
}

std::vector<TransferRecord> read_transfer_csv(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("missing transfer CSV " + path.string());
    std::string line;
    std::getline(f, line);
    if (line != "language,accuracy,emt_change_pct") throw DataError(path.string() + ": unexpected header");
    std::vector<TransferRecord> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string lang, acc, pct;
        if (!std::getline(ss, lang, ',') || !std::getline(ss, acc, ',') || !std::getline(ss, pct))
            throw DataError(path.string() + ": malformed row '" + line + "'");
        try {
            out.push_back({lang, std::stod(acc), std::stod(pct)});
        } catch (const std::exception&) {
            throw DataError(path.string() + ": malformed number in '" + line + "'");
        }
    }
    return out;
}

void write_correlation_json(const PearsonResult& r, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    nlohmann::ordered_json j;
    j["r"] = r.r;
    j["p"] = r.p;
    j["n_permutations"] = r.n_permutations;
    j["seed"] = r.seed;
    f << j.dump(2) << '\n';
}

}  // namespace detox
