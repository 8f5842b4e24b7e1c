#include "detox/synth.hpp"

#include <algorithm>
#include <fstream>

#include "detox/error.hpp"
#include "detox/sampling.hpp"

namespace detox {

void SynthCorpusConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("synth config: " + m); };
    if (n_languages < 2) fail("n_languages must be >= 2");
    if (toxic_concepts < 1) fail("toxic_concepts must be >= 1");
    if (toxic_concepts >= vocab_per_language) fail("vocab too small for the toxic concept count");
    if (toxic_concepts + trigger_concepts + branching >= vocab_per_language)
        fail("vocab too small: need more neutral concepts than triggers plus branching");
    if (trigger_concepts < 1) fail("trigger_concepts must be >= 1");
    if (parallel_ratio.size() != n_languages) fail("parallel_ratio needs one entry per language");
    for (double r : parallel_ratio)
        if (r < 0.0 || r > 1.0) fail("parallel_ratio entries must be in [0,1]");
    if (corpus_size < 1 || prompt_len < 1 || continuation_len < 1) fail("sizes must be >= 1");
    if (branching < 1) fail("branching must be >= 1");
    if (n_preference < 2) fail("n_preference must be >= 2");
    if (n_eval_prompts < 1 || n_parallel < 2 || n_probe < 2) fail("dataset sizes too small");
    for (double p : {trigger_prompt_rate, toxic_given_trigger, toxic_token_rate})
        if (p < 0.0 || p > 1.0) fail("rates must be in [0,1]");
}

std::string SynthCorpusConfig::language(std::size_t i) const { return "l" + std::to_string(i); }

nlohmann::ordered_json to_json(const SynthCorpusConfig& c) {
    nlohmann::ordered_json j;
    j["n_languages"] = c.n_languages;
    j["vocab_per_language"] = c.vocab_per_language;
    j["toxic_concepts"] = c.toxic_concepts;
    j["trigger_concepts"] = c.trigger_concepts;
    j["parallel_ratio"] = c.parallel_ratio;
    j["corpus_size"] = c.corpus_size;
    j["seed"] = c.seed;
    j["prompt_len"] = c.prompt_len;
    j["continuation_len"] = c.continuation_len;
    j["branching"] = c.branching;
    j["trigger_prompt_rate"] = c.trigger_prompt_rate;
    j["toxic_given_trigger"] = c.toxic_given_trigger;
    j["toxic_token_rate"] = c.toxic_token_rate;
    j["n_preference"] = c.n_preference;
    j["preference_continuation_len"] = c.preference_continuation_len;
    j["n_eval_prompts"] = c.n_eval_prompts;
    j["n_parallel"] = c.n_parallel;
    j["n_probe"] = c.n_probe;
    return j;
}

SynthCorpusConfig synth_config_from_json(const nlohmann::json& j) {
    SynthCorpusConfig c;
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("n_languages", c.n_languages);
        get("vocab_per_language", c.vocab_per_language);
        get("toxic_concepts", c.toxic_concepts);
        get("trigger_concepts", c.trigger_concepts);
        get("corpus_size", c.corpus_size);
        get("seed", c.seed);
        get("prompt_len", c.prompt_len);
        get("continuation_len", c.continuation_len);
        get("branching", c.branching);
        get("trigger_prompt_rate", c.trigger_prompt_rate);
        get("toxic_given_trigger", c.toxic_given_trigger);
        get("toxic_token_rate", c.toxic_token_rate);
        get("n_preference", c.n_preference);
        get("preference_continuation_len", c.preference_continuation_len);
        get("n_eval_prompts", c.n_eval_prompts);
        get("n_parallel", c.n_parallel);
        get("n_probe", c.n_probe);
        if (j.contains("parallel_ratio")) {
            const auto& pr = j.at("parallel_ratio");
            if (pr.is_number()) {
                // One shared ratio for every non-pivot language.
                c.parallel_ratio.assign(c.n_languages, pr.get<double>());
                c.parallel_ratio[0] = 0.0;
            } else {
                c.parallel_ratio = pr.get<std::vector<double>>();
                if (c.parallel_ratio.size() + 1 == c.n_languages) c.parallel_ratio.insert(c.parallel_ratio.begin(), 0.0);
            }
        } else {
            c.parallel_ratio.assign(c.n_languages, 0.5);
            c.parallel_ratio[0] = 0.0;
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("synth config: ") + e.what());
    }
    c.validate();
    return c;
}

namespace {

// Concept ids: [0, toxic) toxic, [toxic, toxic + triggers) triggers, rest plain.
class Grammar {
public:
    Grammar(const SynthCorpusConfig& c, Rng& rng) : c_(c), rng_(rng) {
        for (std::size_t k = c.toxic_concepts + c.trigger_concepts; k < c.vocab_per_language; ++k) plain_.push_back(k);
        successors_.resize(c.vocab_per_language);
        weights_.resize(c.vocab_per_language);
        for (std::size_t k = 0; k < c.vocab_per_language; ++k) {
            auto pool = plain_;
            for (std::size_t b = 0; b < c.branching; ++b) {
                const std::size_t pick = b + static_cast<std::size_t>(rng_.next() % (pool.size() - b));
                std::swap(pool[b], pool[pick]);
                successors_[k].push_back(pool[b]);
                weights_[k].push_back(0.5 + rng_.uniform());
            }
        }
    }

    std::size_t next_plain(std::size_t prev) {
        const auto& w = weights_[prev];
        double total = 0.0;
        for (double x : w) total += x;
        double u = rng_.uniform() * total;
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (u < w[i]) return successors_[prev][i];
            u -= w[i];
        }
        return successors_[prev].back();
    }

    std::size_t random_plain() { return plain_[rng_.next() % plain_.size()]; }
    std::size_t random_trigger() { return c_.toxic_concepts + rng_.next() % c_.trigger_concepts; }
    std::size_t random_toxic() { return rng_.next() % c_.toxic_concepts; }

    std::vector<std::size_t> prompt(bool triggered) {
        std::vector<std::size_t> out;
        const std::size_t at = triggered ? rng_.next() % c_.prompt_len : c_.prompt_len;
        for (std::size_t i = 0; i < c_.prompt_len; ++i) {
            if (i == at)
                out.push_back(random_trigger());
            else
                out.push_back(i == 0 ? random_plain() : next_plain(out.back()));
        }
        return out;
    }

    std::vector<std::size_t> continuation(std::size_t prev, bool toxic, std::size_t len) {
        std::vector<std::size_t> out;
        std::size_t chain = prev;
        for (std::size_t i = 0; i < len; ++i) {
            if (toxic && rng_.uniform() < c_.toxic_token_rate) {
                out.push_back(random_toxic());
            } else {
                chain = next_plain(chain);
                out.push_back(chain);
            }
        }
        return out;
    }

    bool toxic_given(bool triggered) { return triggered && rng_.uniform() < c_.toxic_given_trigger; }
    double uniform() { return rng_.uniform(); }

private:
    const SynthCorpusConfig& c_;
    Rng& rng_;
    std::vector<std::size_t> plain_;
    std::vector<std::vector<std::size_t>> successors_;
    std::vector<std::vector<double>> weights_;
};

std::string render(const std::vector<std::size_t>& concepts, const std::string& lang) {
    std::string out;
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        if (i) out += ' ';
        out += lang + "_c" + std::to_string(concepts[i]);
    }
    return out;
}

std::vector<std::size_t> join(std::vector<std::size_t> a, const std::vector<std::size_t>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

}  // namespace

SynthCorpus synth_corpus(const SynthCorpusConfig& config) {
    config.validate();
    SynthCorpus out;
    out.config = config;
    Rng rng(config.seed);
    Grammar g(config, rng);

    out.vocab.add(std::string(separator_token));
    for (std::size_t l = 0; l < config.n_languages; ++l) {
        const auto lang = config.language(l);
        out.languages.push_back(lang);
        for (std::size_t k = 0; k < config.vocab_per_language; ++k) out.vocab.add(lang + "_c" + std::to_string(k));
        auto& lex = out.lexicons[lang];
        for (std::size_t k = 0; k < config.toxic_concepts; ++k) lex.insert(lang + "_c" + std::to_string(k));
    }
    const std::string& pivot = out.languages[0];

    auto document = [&](bool force_trigger) {
        const bool triggered = force_trigger || g.uniform() < config.trigger_prompt_rate;
        const auto p = g.prompt(triggered);
        const bool toxic = g.toxic_given(triggered);
        return std::pair{join(p, g.continuation(p.back(), toxic, config.continuation_len)), toxic};
    };

    for (std::size_t l = 0; l < config.n_languages; ++l) {
        const auto& lang = out.languages[l];
        auto& docs = out.pretrain[lang];
        for (std::size_t i = 0; i < config.corpus_size; ++i) {
            const auto doc = document(false).first;
            if (l > 0 && g.uniform() < config.parallel_ratio[l])
                docs.push_back(render(doc, pivot) + " " + std::string(separator_token) + " " + render(doc, lang));
            else
                docs.push_back(render(doc, lang));
        }
    }

    for (std::size_t i = 0; i < config.n_preference; ++i) {
        const auto p = g.prompt(true);
        auto chosen = g.continuation(p.back(), false, config.preference_continuation_len);
        auto rejected = g.continuation(p.back(), true, config.preference_continuation_len);
        while (rejected == chosen) rejected = g.continuation(p.back(), true, config.preference_continuation_len);
        out.preferences.push_back({render(p, pivot), render(chosen, pivot), render(rejected, pivot)});
    }

    for (std::size_t i = 0; i < config.n_eval_prompts; ++i) {
        const auto p = g.prompt(true);
        for (const auto& lang : out.languages)
            out.eval_prompts.push_back({"p" + std::to_string(i) + "_" + lang, lang, render(p, lang)});
    }

    std::vector<std::vector<std::size_t>> parallel_concepts;
    for (std::size_t i = 0; i < config.n_parallel; ++i) parallel_concepts.push_back(g.prompt(true));
    for (std::size_t l = 1; l < config.n_languages; ++l)
        for (std::size_t i = 0; i < config.n_parallel; ++i)
            out.parallel.push_back({"s" + std::to_string(i), out.languages[l], render(parallel_concepts[i], out.languages[l]),
                                    render(parallel_concepts[i], pivot)});

    for (std::size_t i = 0; i < config.n_probe; ++i) {
        const auto [doc, toxic] = document(i % 2 == 0);
        out.probe_data.push_back({render(doc, pivot), toxic ? 1 : 0});
    }
    return out;
}

void SynthCorpus::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    vocab.save(dir / "vocab.json");
    write_pretrain(pretrain, dir / "pretrain.txt");
    write_preferences(preferences, dir / "preferences.jsonl");
    write_prompts(eval_prompts, dir / "prompts.jsonl");
    write_parallel(parallel, dir / "parallel.jsonl");
    write_lexicons(lexicons, dir / "lexicons.json");
    write_labeled(probe_data, dir / "probe.jsonl");
    std::ofstream f(dir / "synth_config.json", std::ios::binary);
    f << to_json(config).dump(2) << '\n';
}

namespace {

template <class F>
void for_each_json_line(const std::filesystem::path& path, F&& f) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing file " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            f(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    return f;
}

}  // namespace

void write_preferences(const std::vector<PreferenceText>& prefs, const std::filesystem::path& path) {
    auto f = open_out(path);
    for (const auto& p : prefs) {
        nlohmann::ordered_json j;
        j["prompt"] = p.prompt;
        j["chosen"] = p.chosen;
        j["rejected"] = p.rejected;
        f << j.dump() << '\n';
    }
}

std::vector<PreferenceText> read_preferences(const std::filesystem::path& path) {
    std::vector<PreferenceText> out;
    for_each_json_line(path, [&](const nlohmann::json& j) {
        out.push_back({j.at("prompt").get<std::string>(), j.at("chosen").get<std::string>(),
                       j.at("rejected").get<std::string>()});
    });
    return out;
}

void write_parallel(const std::vector<ParallelPair>& pairs, const std::filesystem::path& path) {
    auto f = open_out(path);
    for (const auto& p : pairs) {
        nlohmann::ordered_json j;
        j["language"] = p.language;
        j["text"] = p.text;
        j["pivot_text"] = p.pivot_text;
        j["id"] = p.id;
        f << j.dump() << '\n';
    }
}

std::vector<ParallelPair> read_parallel(const std::filesystem::path& path) {
    std::vector<ParallelPair> out;
    for_each_json_line(path, [&](const nlohmann::json& j) {
        out.push_back({j.value("id", std::to_string(out.size())), j.at("language").get<std::string>(),
                       j.at("text").get<std::string>(), j.at("pivot_text").get<std::string>()});
    });
    return out;
}

void write_labeled(const std::vector<LabeledText>& data, const std::filesystem::path& path) {
    auto f = open_out(path);
    for (const auto& d : data) {
        nlohmann::ordered_json j;
        j["text"] = d.text;
        j["label"] = d.label ? "toxic" : "non_toxic";
        f << j.dump() << '\n';
    }
}

std::vector<LabeledText> read_labeled(const std::filesystem::path& path) {
    std::vector<LabeledText> out;
    for_each_json_line(path, [&](const nlohmann::json& j) {
        LabeledText t;
        t.text = j.at("text").get<std::string>();
        if (t.text.empty()) throw DataError(path.string() + ": empty text");
        const auto& l = j.at("label");
        if (l.is_string()) {
            const auto s = l.get<std::string>();
            if (s != "toxic" && s != "non_toxic") throw DataError(path.string() + ": unknown label '" + s + "'");
            t.label = s == "toxic";
        } else {
            t.label = l.get<int>() != 0;
        }
        out.push_back(std::move(t));
    });
    return out;
}

void write_lexicons(const std::map<std::string, std::set<std::string>>& lex, const std::filesystem::path& path) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [lang, words] : lex) j[lang] = std::vector<std::string>(words.begin(), words.end());
    auto f = open_out(path);
    f << j.dump(2) << '\n';
}

std::map<std::string, std::set<std::string>> read_lexicons(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing lexicon file " + path.string());
    std::map<std::string, std::set<std::string>> out;
    try {
        const auto j = nlohmann::json::parse(in);
        for (auto it = j.begin(); it != j.end(); ++it) {
            const auto words = it.value().get<std::vector<std::string>>();
            out[it.key()] = std::set<std::string>(words.begin(), words.end());
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return out;
}

void write_pretrain(const std::map<std::string, std::vector<std::string>>& docs, const std::filesystem::path& path) {
    auto f = open_out(path);
    for (const auto& [lang, list] : docs)
        for (const auto& d : list) f << lang << '\t' << d << '\n';
}

std::map<std::string, std::vector<std::string>> read_pretrain(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing pretraining corpus " + path.string());
    std::map<std::string, std::vector<std::string>> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw DataError(path.string() + ": missing language column");
        out[line.substr(0, tab)].push_back(line.substr(tab + 1));
    }
    return out;
}

}  // namespace detox
