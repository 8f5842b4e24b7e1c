#include "detox/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "detox/error.hpp"
#include "detox/metrics.hpp"
#include "detox/training.hpp"

namespace detox {

const LanguageMetrics& EvalReport::at(const std::string& language) const {
    for (const auto& l : languages)
        if (l.language == language) return l;
    throw DataError("eval report: no language '" + language + "'");
}

namespace {

nlohmann::ordered_json metrics_json(const LanguageMetrics& m) {
    nlohmann::ordered_json j;
    j["language"] = m.language;
    j["n_prompts"] = m.n_prompts;
    j["n_continuations"] = m.n_continuations;
    j["n_errors"] = m.n_errors;
    j["emt"] = m.emt;
    j["tox_prob"] = m.tox_prob;
    j["avg_tox"] = m.avg_tox;
    j["median_ppl"] = m.median_ppl;
    j["dist_1"] = m.dist_1;
    j["dist_2"] = m.dist_2;
    j["dist_3"] = m.dist_3;
    return j;
}

double dist_or_zero(const std::vector<std::vector<std::vector<std::string>>>& grams, std::size_t n) {
    try {
        return distinct_n(grams, n);
    } catch (const DataError&) {
        return 0.0;
    }
}

}  // namespace

nlohmann::ordered_json EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["metadata"] = metadata;
    j["partial"] = partial;
    auto langs = nlohmann::ordered_json::array();
    for (const auto& l : languages) langs.push_back(metrics_json(l));
    j["languages"] = langs;
    j["average"] = metrics_json(average);
    return j;
}

void EvalReport::write_csv(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f.precision(17);
    f << "language,emt,tox_prob,avg_tox,median_ppl,dist_1,dist_2,dist_3\n";
    auto row = [&](const LanguageMetrics& m) {
        f << m.language << ',' << m.emt << ',' << m.tox_prob << ',' << m.avg_tox << ',' << m.median_ppl << ','
          << m.dist_1 << ',' << m.dist_2 << ',' << m.dist_3 << '\n';
    };
    for (const auto& l : languages) row(l);
    row(average);
}

EvalReport aggregate_report(const std::vector<DumpRecord>& dump, const EvalOptions& options) {
    if (dump.empty()) throw DataError("aggregate_report: empty dump");
    // language -> prompt id -> records, in first-appearance order of prompts.
    std::map<std::string, std::vector<std::string>> prompt_order;
    std::map<std::string, std::map<std::string, std::vector<const DumpRecord*>>> grouped;
    for (const auto& r : dump) {
        auto& by_prompt = grouped[r.language];
        if (!by_prompt.contains(r.prompt_id)) prompt_order[r.language].push_back(r.prompt_id);
        by_prompt[r.prompt_id].push_back(&r);
    }

    EvalReport report;
    for (const auto& [lang, ids] : prompt_order) {
        LanguageMetrics m;
        m.language = lang;
        PromptScores scores;
        std::vector<std::vector<std::vector<std::string>>> grams;
        std::vector<double> ppls;
        std::vector<double> prompt_medians;
        for (const auto& id : ids) {
            const auto& recs = grouped[lang][id];
            std::vector<double> s;
            std::vector<std::vector<std::string>> conts;
            std::vector<double> p;
            for (const auto* r : recs) {
                ++m.n_continuations;
                conts.push_back(split_whitespace(r->text));
                if (r->n_tokens > 0) p.push_back(std::exp(r->nll));
                if (r->score)
                    s.push_back(*r->score);
                else
                    ++m.n_errors;
            }
            grams.push_back(std::move(conts));
            ppls.insert(ppls.end(), p.begin(), p.end());
            if (!p.empty()) prompt_medians.push_back(median(p));
            if (!s.empty()) scores.push_back(std::move(s));
        }
        m.n_prompts = ids.size();
        if (!scores.empty()) {
            m.emt = expected_max_toxicity(scores);
            m.tox_prob = toxicity_probability(scores, options.threshold);
            m.avg_tox = average_toxicity(scores);
        }
        if (!ppls.empty()) {
            if (options.ppl == PplAggregation::language_median) {
                m.median_ppl = median(ppls);
            } else {
                double sum = 0.0;
                for (double v : prompt_medians) sum += v;
                m.median_ppl = sum / static_cast<double>(prompt_medians.size());
            }
        }
        m.dist_1 = dist_or_zero(grams, 1);
        m.dist_2 = dist_or_zero(grams, 2);
        m.dist_3 = dist_or_zero(grams, 3);
        if (m.n_errors) report.partial = true;
        report.languages.push_back(m);
    }

    auto& avg = report.average;
    avg.language = "average";
    const double n = static_cast<double>(report.languages.size());
    for (const auto& m : report.languages) {
        avg.n_prompts += m.n_prompts;
        avg.n_continuations += m.n_continuations;
        avg.n_errors += m.n_errors;
        avg.emt += m.emt / n;
        avg.tox_prob += m.tox_prob / n;
        avg.avg_tox += m.avg_tox / n;
        avg.median_ppl += m.median_ppl / n;
        avg.dist_1 += m.dist_1 / n;
        avg.dist_2 += m.dist_2 / n;
        avg.dist_3 += m.dist_3 / n;
    }
    report.metadata["threshold"] = options.threshold;
    report.metadata["threshold_rule"] = ">=";
    report.metadata["ppl_aggregation"] =
        options.ppl == PplAggregation::language_median ? "language_median" : "prompt_median_mean";
    report.metadata["avg_tox"] = "grand_mean";
    report.metadata["distinct_n"] = "pooled_per_prompt";
    return report;
}

EvalRun evaluate(const Weights<float>& model, const Vocabulary& vocab, const std::vector<EvalPrompt>& prompts,
                 ToxicityScorer& scorer, const GenerationConfig& gen, const Weights<float>& reference,
                 const EvalOptions& options, const InterventionSpec* intervention) {
    gen.validate();
    if (prompts.empty()) throw DataError("evaluate: no prompts");
    if (model.config.vocab_size != reference.config.vocab_size)
        throw DataError("evaluate: reference model vocabulary differs from the evaluated model");

    std::vector<std::vector<TokenId>> prompt_ids(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        prompt_ids[i] = vocab.tokenize(prompts[i].prompt);
        if (prompt_ids[i].empty()) throw DataError("evaluate: prompt '" + prompts[i].id + "' has no tokens");
        if (prompt_ids[i].size() >= model.config.max_seq_len)
            throw DataError("evaluate: prompt '" + prompts[i].id + "' leaves no room for a continuation");
    }

    std::vector<std::vector<std::vector<TokenId>>> samples(prompts.size());
    std::vector<std::vector<double>> nlls(prompts.size());
    const auto np = static_cast<std::ptrdiff_t>(prompts.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t pi = 0; pi < np; ++pi) {
        const auto i = static_cast<std::size_t>(pi);
        samples[i] = sample_continuations(model, prompt_ids[i], gen, i, intervention);
        for (const auto& c : samples[i]) {
            const auto room = reference.config.max_seq_len - prompt_ids[i].size();
            const std::span<const TokenId> cont(c.data(), std::min(c.size(), room));
            nlls[i].push_back(cont.empty() ? 0.0
                                           : -sequence_logprob(reference, prompt_ids[i], cont) /
                                                 static_cast<double>(cont.size()));
        }
    }

    EvalRun run;
    std::map<std::string, std::vector<std::size_t>> by_language;
    for (std::size_t i = 0; i < prompts.size(); ++i) by_language[prompts[i].language].push_back(i);
    std::vector<std::vector<ScoreResult>> scores(prompts.size());
    for (const auto& [lang, idx] : by_language) {
        std::vector<std::string> texts;
        for (auto i : idx)
            for (const auto& c : samples[i]) texts.push_back(vocab.detokenize(c));
        const auto res = scorer.score(texts, lang);
        std::size_t r = 0;
        for (auto i : idx)
            for (std::size_t s = 0; s < samples[i].size(); ++s) scores[i].push_back(res[r++]);
    }
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        for (std::size_t s = 0; s < samples[i].size(); ++s) {
            DumpRecord rec;
            rec.prompt_id = prompts[i].id;
            rec.language = prompts[i].language;
            rec.sample_idx = s;
            rec.text = vocab.detokenize(samples[i][s]);
            rec.score = scores[i][s].score;
            rec.error = scores[i][s].error;
            rec.nll = nlls[i][s];
            rec.n_tokens = std::min(samples[i][s].size(), reference.config.max_seq_len - prompt_ids[i].size());
            run.dump.push_back(std::move(rec));
        }
    }
    run.report = aggregate_report(run.dump, options);
    run.report.metadata["scorer"] = scorer.name();
    run.report.metadata["k"] = gen.k;
    run.report.metadata["length"] = gen.length;
    run.report.metadata["temperature"] = gen.temperature;
    run.report.metadata["top_p"] = gen.top_p;
    run.report.metadata["seed"] = gen.seed;
    return run;
}

void write_dump(const std::vector<DumpRecord>& dump, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    for (const auto& r : dump) {
        nlohmann::ordered_json j;
        j["prompt_id"] = r.prompt_id;
        j["language"] = r.language;
        j["sample_idx"] = r.sample_idx;
        j["text"] = r.text;
        j["score"] = r.score ? nlohmann::ordered_json(*r.score) : nlohmann::ordered_json(nullptr);
        if (!r.error.empty()) j["error"] = r.error;
        j["nll"] = r.nll;
        j["n_tokens"] = r.n_tokens;
        f << j.dump() << '\n';
    }
}

std::vector<DumpRecord> read_dump(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("missing dump " + path.string());
    std::vector<DumpRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            DumpRecord r;
            r.prompt_id = j.at("prompt_id").get<std::string>();
            r.language = j.value("language", std::string("und"));
            r.sample_idx = j.at("sample_idx").get<std::size_t>();
            r.text = j.at("text").get<std::string>();
            if (!j.at("score").is_null()) r.score = j.at("score").get<double>();
            r.error = j.value("error", std::string());
            r.nll = j.at("nll").get<double>();
            r.n_tokens = j.value("n_tokens", split_whitespace(r.text).size());
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<EvalPrompt> read_prompts(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("missing prompts file " + path.string());
    std::vector<EvalPrompt> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            EvalPrompt p;
            p.language = j.at("language").get<std::string>();
            p.prompt = j.at("prompt").get<std::string>();
            p.id = j.contains("id") ? (j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump())
                                    : std::to_string(lineno);
            out.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_prompts(const std::vector<EvalPrompt>& prompts, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    for (const auto& p : prompts) {
        nlohmann::ordered_json j;
        j["language"] = p.language;
        j["prompt"] = p.prompt;
        j["id"] = p.id;
        f << j.dump() << '\n';
    }
}

}  // namespace detox
