#include "detox/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "detox/checkpoint.hpp"
#include "detox/error.hpp"
#include "detox/manifest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace detox {

namespace {

// Reads one config object, remembering which keys were consumed so leftovers
// can be reported as schema violations.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("config: " + label() + " must be an object");
    }

    bool has(const char* key) const { return j_.contains(key); }

    template <class T>
    void get(const char* key, T& out) {
        if (!j_.contains(key)) return;
        used_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config: " + label(key) + " has the wrong type");
        }
    }

    Section sub(const char* key) {
        used_.insert(key);
        return Section(j_.contains(key) ? j_.at(key) : empty(), path_.empty() ? key : path_ + "." + key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) throw ConfigError("config: unknown key " + label(it.key()));
    }

private:
    static const json& empty() {
        static const json e = json::object();
        return e;
    }
    std::string label(const std::string& key = "") const {
        if (key.empty()) return path_.empty() ? "<root>" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }

    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

template <class E>
E parse_enum(const std::string& where, const std::string& value, std::initializer_list<std::pair<const char*, E>> table) {
    for (const auto& [name, e] : table)
        if (value == name) return e;
    std::string opts;
    for (const auto& [name, e] : table) opts += std::string(opts.empty() ? "" : ", ") + name;
    throw ConfigError("config: " + where + " must be one of {" + opts + "}, got '" + value + "'");
}

const char* to_string(ScorerKind k) {
    switch (k) {
        case ScorerKind::lexicon: return "lexicon";
        case ScorerKind::probe: return "probe";
        case ScorerKind::remote: return "remote";
    }
    return "?";
}

const char* to_string(PplAggregation p) {
    return p == PplAggregation::language_median ? "language_median" : "prompt_median_mean";
}

fs::path stage_path(const PipelineConfig& cfg, const char* stage) { return cfg.run_dir / stage; }

// Checks that an upstream stage ran and its outputs are untouched.
void require_stage(const PipelineConfig& cfg, const char* stage) {
    const auto m = stage_path(cfg, stage) / run_manifest_name;
    if (!fs::exists(m))
        throw DataError("missing input: stage '" + std::string(stage) + "' has not produced " + m.string());
    verify_manifest(m, cfg.run_dir);
}

fs::path fresh_stage_dir(const PipelineConfig& cfg, const char* stage) {
    const auto dir = stage_path(cfg, stage);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<fs::path> files_in(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != run_manifest_name) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

void finish_stage(const PipelineConfig& cfg, const char* stage, const std::vector<const char*>& upstream) {
    RunManifest m(stage, cfg.run_dir);
    m.set_config(cfg.to_json());
    m.add_seed("seed", cfg.seed);
    // Upstream artifacts rather than upstream manifests: the manifests carry a
    // timestamp, and inputs must hash the same on every rerun.
    for (const char* up : upstream)
        for (const auto& f : files_in(stage_path(cfg, up))) m.add_input(f);
    for (const auto& f : files_in(stage_path(cfg, stage))) m.add_output(f);
    m.write(stage_path(cfg, stage) / run_manifest_name);
}

void log(const char* stage, const std::string& msg) { std::cerr << "[" << stage << "] " << msg << '\n'; }

std::ofstream open_out(const fs::path& p) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw DataError("cannot write " + p.string());
    f.precision(17);
    return f;
}

void write_json(const ordered_json& j, const fs::path& p) {
    auto f = open_out(p);
    f << j.dump(2) << '\n';
}

json read_json(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("missing input " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(p.string() + ": " + e.what());
    }
}

std::vector<TokenId> encode(const Vocabulary& vocab, const std::string& text, const std::string& where) {
    auto ids = vocab.tokenize(text);
    if (ids.empty()) throw DataError(where + ": empty text");
    return ids;
}

Vocabulary load_vocab(const PipelineConfig& cfg) { return Vocabulary::load(stage_path(cfg, stage_dir::data) / "vocab.json"); }

std::string pivot_language(const PipelineConfig& cfg) { return cfg.synth.language(0); }

EvalOptions eval_options(const PipelineConfig& cfg) { return {cfg.scorer.threshold, cfg.ppl}; }

}  // namespace

void PipelineConfig::propagate_seed() {
    synth.seed = seed;
    pretrain.seed = seed;
    dpo.seed = seed;
    probe.seed = seed;
    generation.seed = seed;
    profile.sampling.seed = seed;
}

void PipelineConfig::validate() const {
    synth.validate();
    ModelConfig m = model;
    m.vocab_size = 3 + synth.n_languages * synth.vocab_per_language;
    m.validate();
    pretrain.validate();
    dpo.validate();
    probe.validate();
    generation.validate();
    const std::size_t doc = synth.prompt_len + synth.continuation_len;
    const bool any_parallel = std::any_of(synth.parallel_ratio.begin() + 1, synth.parallel_ratio.end(),
                                          [](double r) { return r > 0.0; });
    if ((any_parallel ? 2 * doc + 1 : doc) > model.max_seq_len)
        throw ConfigError("config: model.max_seq_len " + std::to_string(model.max_seq_len) +
                          " is shorter than the longest pretraining document");
    if (synth.prompt_len + synth.preference_continuation_len > model.max_seq_len)
        throw ConfigError("config: preference pairs exceed model.max_seq_len");
    if (!(dpo_valid_fraction > 0.0 && dpo_valid_fraction < 1.0)) throw ConfigError("config: dpo.valid_fraction in (0,1)");
    if (!(probe_holdout_fraction > 0.0 && probe_holdout_fraction < 1.0))
        throw ConfigError("config: probe.holdout_fraction in (0,1)");
    if (!(scorer.threshold >= 0.0 && scorer.threshold <= 1.0)) throw ConfigError("config: scorer.threshold in [0,1]");
    if (potential_sources < 1) throw ConfigError("config: locate.potential_sources must be >= 1");
    if (potential_sources > model.n_layers * model.d_mlp)
        throw ConfigError("config: locate.potential_sources exceeds the number of value vectors");
    if (profile.horizon < 1) throw ConfigError("config: locate.horizon must be >= 1");
    if (promoted_tokens < 1) throw ConfigError("config: project.promoted_tokens must be >= 1");
    if (gammas.empty()) throw ConfigError("config: intervene.gammas must be non-empty");
    if (intervene_length < 1) throw ConfigError("config: intervene.length must be >= 1");
    if (n_permutations < 1) throw ConfigError("config: report.n_permutations must be >= 1");
    if (sweep_learning_rates.empty()) throw ConfigError("config: lr_sweep.learning_rates must be non-empty");
    for (double lr : sweep_learning_rates)
        if (!(lr >= 0.0)) throw ConfigError("config: lr_sweep.learning_rates must be >= 0");
    if (scorer.kind == ScorerKind::remote && scorer.remote.base_url.empty())
        throw ConfigError("config: scorer.remote.base_url is required for the remote scorer");
}

ordered_json PipelineConfig::to_json() const {
    ordered_json j;
    j["schema_version"] = config_schema_version;
    j["run_dir"] = run_dir.generic_string();
    j["seed"] = seed;
    auto s = detox::to_json(synth);
    s.erase("seed");
    j["synth"] = s;
    auto m = config_to_json(model);
    m.erase("vocab_size");
    j["model"] = m;
    j["pretrain"] = {{"learning_rate", pretrain.learning_rate},
                     {"batch_size", pretrain.batch_size},
                     {"epochs", pretrain.epochs},
                     {"max_grad_norm", pretrain.max_grad_norm},
                     {"final_lr_fraction", pretrain.final_lr_fraction}};
    j["dpo"] = {{"beta", dpo.beta},
                {"learning_rate", dpo.learning_rate},
                {"batch_size", dpo.batch_size},
                {"grad_accum", dpo.grad_accum},
                {"max_grad_norm", dpo.max_grad_norm},
                {"epochs", dpo.epochs},
                {"patience", dpo.patience},
                {"eval_every", dpo.eval_every},
                {"valid_fraction", dpo_valid_fraction}};
    j["probe"] = {{"learning_rate", probe.learning_rate},
                  {"batch_size", probe.batch_size},
                  {"epochs", probe.epochs},
                  {"feature", detox::to_string(probe_feature)},
                  {"holdout_fraction", probe_holdout_fraction}};
    j["generation"] = {{"k", generation.k},
                       {"length", generation.length},
                       {"temperature", generation.temperature},
                       {"top_p", generation.top_p}};
    ordered_json remote = {{"base_url", scorer.remote.base_url},
                           {"path", scorer.remote.path},
                           {"api_key_env", scorer.api_key_env},
                           {"protocol", scorer.remote.protocol == RemoteProtocol::simple ? "simple" : "perspective"},
                           {"max_in_flight", scorer.remote.max_in_flight},
                           {"max_retries", scorer.remote.max_retries},
                           {"initial_backoff_ms", scorer.remote.initial_backoff_ms},
                           {"backoff_factor", scorer.remote.backoff_factor},
                           {"timeout_seconds", scorer.remote.timeout_seconds}};
    j["scorer"] = {{"kind", to_string(scorer.kind)}, {"threshold", scorer.threshold}, {"remote", remote}};
    j["eval"] = {{"ppl_aggregation", to_string(ppl)}};
    j["locate"] = {{"potential_sources", potential_sources},
                   {"horizon", profile.horizon},
                   {"decode", profile.decode == ProfileDecode::greedy ? "greedy" : "sample"}};
    j["project"] = {{"promoted_tokens", promoted_tokens}};
    j["intervene"] = {{"gammas", gammas}, {"length", intervene_length}};
    j["retrieve"] = {{"pooling", detox::to_string(pooling)}};
    j["report"] = {{"n_permutations", n_permutations}};
    j["lr_sweep"] = {{"learning_rates", sweep_learning_rates}};
    return j;
}

PipelineConfig parse_pipeline_config(const json& j) {
    PipelineConfig c;
    Section root(j, "");
    if (!root.has("schema_version")) throw ConfigError("config: schema_version is required");
    int version = 0;
    root.get("schema_version", version);
    if (version != config_schema_version)
        throw ConfigError("config: unsupported schema_version " + std::to_string(version) + " (expected " +
                          std::to_string(config_schema_version) + ")");
    std::string run_dir = c.run_dir.string();
    root.get("run_dir", run_dir);
    c.run_dir = run_dir;
    root.get("seed", c.seed);

    {
        auto s = root.sub("synth");
        auto& y = c.synth;
        s.get("n_languages", y.n_languages);
        s.get("vocab_per_language", y.vocab_per_language);
        s.get("toxic_concepts", y.toxic_concepts);
        s.get("trigger_concepts", y.trigger_concepts);
        s.get("corpus_size", y.corpus_size);
        s.get("prompt_len", y.prompt_len);
        s.get("continuation_len", y.continuation_len);
        s.get("branching", y.branching);
        s.get("trigger_prompt_rate", y.trigger_prompt_rate);
        s.get("toxic_given_trigger", y.toxic_given_trigger);
        s.get("toxic_token_rate", y.toxic_token_rate);
        s.get("n_preference", y.n_preference);
        s.get("preference_continuation_len", y.preference_continuation_len);
        s.get("n_eval_prompts", y.n_eval_prompts);
        s.get("n_parallel", y.n_parallel);
        s.get("n_probe", y.n_probe);
        y.parallel_ratio.assign(y.n_languages, 0.5);
        y.parallel_ratio[0] = 0.0;
        if (s.has("parallel_ratio")) {
            std::vector<double> r;
            double shared = 0.0;
            try {
                s.get("parallel_ratio", r);
            } catch (const ConfigError&) {
                s.get("parallel_ratio", shared);
                r.assign(y.n_languages - 1, shared);
            }
            // Either one ratio per non-pivot language or one per language.
            if (r.size() + 1 == y.n_languages) r.insert(r.begin(), 0.0);
            y.parallel_ratio = r;
        }
        s.finish();
    }
    {
        auto s = root.sub("model");
        s.get("n_layers", c.model.n_layers);
        s.get("d_model", c.model.d_model);
        s.get("d_mlp", c.model.d_mlp);
        s.get("n_heads", c.model.n_heads);
        s.get("max_seq_len", c.model.max_seq_len);
        s.get("activation", c.model.activation);
        s.finish();
    }
    {
        auto s = root.sub("pretrain");
        s.get("learning_rate", c.pretrain.learning_rate);
        s.get("batch_size", c.pretrain.batch_size);
        s.get("epochs", c.pretrain.epochs);
        s.get("max_grad_norm", c.pretrain.max_grad_norm);
        s.get("final_lr_fraction", c.pretrain.final_lr_fraction);
        s.finish();
    }
    {
        auto s = root.sub("dpo");
        s.get("beta", c.dpo.beta);
        s.get("learning_rate", c.dpo.learning_rate);
        s.get("batch_size", c.dpo.batch_size);
        s.get("grad_accum", c.dpo.grad_accum);
        s.get("max_grad_norm", c.dpo.max_grad_norm);
        s.get("epochs", c.dpo.epochs);
        s.get("patience", c.dpo.patience);
        s.get("eval_every", c.dpo.eval_every);
        s.get("valid_fraction", c.dpo_valid_fraction);
        s.finish();
    }
    {
        auto s = root.sub("probe");
        s.get("learning_rate", c.probe.learning_rate);
        s.get("batch_size", c.probe.batch_size);
        s.get("epochs", c.probe.epochs);
        s.get("holdout_fraction", c.probe_holdout_fraction);
        std::string feature = detox::to_string(c.probe_feature);
        s.get("feature", feature);
        try {
            c.probe_feature = probe_feature_from_string(feature);
        } catch (const Error&) {
            throw ConfigError("config: probe.feature must be post_final_norm or pre_final_norm");
        }
        s.finish();
    }
    {
        auto s = root.sub("generation");
        s.get("k", c.generation.k);
        s.get("length", c.generation.length);
        s.get("temperature", c.generation.temperature);
        s.get("top_p", c.generation.top_p);
        s.finish();
    }
    {
        auto s = root.sub("scorer");
        std::string kind = to_string(c.scorer.kind);
        s.get("kind", kind);
        c.scorer.kind = parse_enum<ScorerKind>(
            "scorer.kind", kind,
            {{"lexicon", ScorerKind::lexicon}, {"probe", ScorerKind::probe}, {"remote", ScorerKind::remote}});
        s.get("threshold", c.scorer.threshold);
        auto r = s.sub("remote");
        auto& rc = c.scorer.remote;
        r.get("base_url", rc.base_url);
        r.get("path", rc.path);
        r.get("api_key_env", c.scorer.api_key_env);
        std::string protocol = "simple";
        r.get("protocol", protocol);
        rc.protocol = parse_enum<RemoteProtocol>(
            "scorer.remote.protocol", protocol,
            {{"simple", RemoteProtocol::simple}, {"perspective", RemoteProtocol::perspective}});
        r.get("max_in_flight", rc.max_in_flight);
        r.get("max_retries", rc.max_retries);
        r.get("initial_backoff_ms", rc.initial_backoff_ms);
        r.get("backoff_factor", rc.backoff_factor);
        r.get("timeout_seconds", rc.timeout_seconds);
        r.finish();
        s.finish();
    }
    {
        auto s = root.sub("eval");
        std::string ppl = to_string(c.ppl);
        s.get("ppl_aggregation", ppl);
        c.ppl = parse_enum<PplAggregation>("eval.ppl_aggregation", ppl,
                                           {{"language_median", PplAggregation::language_median},
                                            {"prompt_median_mean", PplAggregation::prompt_median_mean}});
        s.finish();
    }
    {
        auto s = root.sub("locate");
        s.get("potential_sources", c.potential_sources);
        s.get("horizon", c.profile.horizon);
        std::string decode = "greedy";
        s.get("decode", decode);
        c.profile.decode =
            parse_enum<ProfileDecode>("locate.decode", decode, {{"greedy", ProfileDecode::greedy}, {"sample", ProfileDecode::sample}});
        s.finish();
    }
    {
        auto s = root.sub("project");
        s.get("promoted_tokens", c.promoted_tokens);
        s.finish();
    }
    {
        auto s = root.sub("intervene");
        s.get("gammas", c.gammas);
        s.get("length", c.intervene_length);
        s.finish();
    }
    {
        auto s = root.sub("retrieve");
        std::string pooling = detox::to_string(c.pooling);
        s.get("pooling", pooling);
        try {
            c.pooling = pooling_from_string(pooling);
        } catch (const Error&) {
            throw ConfigError("config: retrieve.pooling must be mean or last_token");
        }
        s.finish();
    }
    {
        auto s = root.sub("report");
        s.get("n_permutations", c.n_permutations);
        s.finish();
    }
    {
        auto s = root.sub("lr_sweep");
        s.get("learning_rates", c.sweep_learning_rates);
        s.finish();
    }
    root.finish();
    c.propagate_seed();
    c.profile.sampling = c.generation;
    c.validate();
    return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config file not found: " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return parse_pipeline_config(j);
}

std::unique_ptr<ToxicityScorer> make_scorer(const PipelineConfig& cfg) {
    switch (cfg.scorer.kind) {
        case ScorerKind::lexicon:
            return std::make_unique<LexiconScorer>(read_lexicons(stage_path(cfg, stage_dir::data) / "lexicons.json"));
        case ScorerKind::probe: {
            require_stage(cfg, stage_dir::probe);
            auto ckpt = load_checkpoint(stage_path(cfg, stage_dir::pretrain));
            auto probe = ToxicProbe::load(stage_path(cfg, stage_dir::probe));
            return std::make_unique<ProbeScorer>(ckpt.weights, ckpt.vocab, std::move(probe));
        }
        case ScorerKind::remote: {
            auto rc = cfg.scorer.remote;
            if (!cfg.scorer.api_key_env.empty()) {
                const char* key = std::getenv(cfg.scorer.api_key_env.c_str());
                if (!key) throw ConfigError("scorer: environment variable " + cfg.scorer.api_key_env + " is not set");
                rc.api_key = key;
            }
            return std::make_unique<RemoteScorer>(rc);
        }
    }
    throw InvariantError("unknown scorer kind");
}

std::map<std::string, std::vector<std::vector<TokenId>>> prompts_by_language(const std::vector<EvalPrompt>& prompts,
                                                                             const Vocabulary& vocab) {
    std::map<std::string, std::vector<std::vector<TokenId>>> out;
    for (const auto& p : prompts) out[p.language].push_back(encode(vocab, p.prompt, "prompt " + p.id));
    return out;
}

std::pair<std::vector<PreferenceExample>, std::vector<PreferenceExample>> load_preference_split(
    const PipelineConfig& cfg, const Vocabulary& vocab) {
    const auto prefs = read_preferences(stage_path(cfg, stage_dir::data) / "preferences.jsonl");
    std::vector<PreferenceExample> all;
    for (std::size_t i = 0; i < prefs.size(); ++i) {
        const auto where = "preference " + std::to_string(i);
        all.push_back({encode(vocab, prefs[i].prompt, where), encode(vocab, prefs[i].chosen, where),
                       encode(vocab, prefs[i].rejected, where)});
    }
    const auto [tr, va] = split_indices(all.size(), cfg.dpo_valid_fraction, cfg.seed);
    if (tr.empty() || va.empty()) throw DataError("dpo: preference set too small for a train/valid split");
    std::pair<std::vector<PreferenceExample>, std::vector<PreferenceExample>> out;
    for (auto i : tr) out.first.push_back(all[i]);
    for (auto i : va) out.second.push_back(all[i]);
    return out;
}

void run_synth_data(const PipelineConfig& cfg) {
    const auto dir = fresh_stage_dir(cfg, stage_dir::data);
    const auto corpus = synth_corpus(cfg.synth);
    corpus.save(dir);
    log(stage_dir::data, std::to_string(corpus.vocab.size()) + " tokens, " + std::to_string(corpus.languages.size()) +
                             " languages");
    finish_stage(cfg, stage_dir::data, {});
}

void run_pretrain(const PipelineConfig& cfg) {
    require_stage(cfg, stage_dir::data);
    const auto vocab = load_vocab(cfg);
    const auto docs = read_pretrain(stage_path(cfg, stage_dir::data) / "pretrain.txt");
    std::vector<std::vector<TokenId>> corpus;
    for (const auto& [lang, list] : docs)
        for (const auto& d : list) corpus.push_back(encode(vocab, d, "pretraining document (" + lang + ")"));
    ModelConfig m = cfg.model;
    m.vocab_size = vocab.size();
    m.validate();
    const auto dir = fresh_stage_dir(cfg, stage_dir::pretrain);
    auto result = pretrain_lm(init_weights(m, cfg.seed), corpus, cfg.pretrain);
    save_checkpoint(ModelCheckpoint{std::move(result.weights), vocab}, dir);
    auto f = open_out(dir / "epoch_loss.csv");
    f << "epoch,train_loss\n";
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
        f << e + 1 << ',' << result.epoch_loss[e] << '\n';
        log(stage_dir::pretrain, "epoch " + std::to_string(e + 1) + " loss " + std::to_string(result.epoch_loss[e]));
    }
    f.close();
    finish_stage(cfg, stage_dir::pretrain, {stage_dir::data});
}

void run_dpo(const PipelineConfig& cfg) {
    require_stage(cfg, stage_dir::data);
    require_stage(cfg, stage_dir::pretrain);
    const auto ref = load_checkpoint(stage_path(cfg, stage_dir::pretrain));
    const auto [train, valid] = load_preference_split(cfg, ref.vocab);
    const auto dir = fresh_stage_dir(cfg, stage_dir::dpo);
    auto result = train_dpo(ref.weights, ref.weights, train, valid, cfg.dpo);
    save_checkpoint(ModelCheckpoint{std::move(result.weights), ref.vocab}, dir);
    write_loss_history_csv(result.history, dir / "loss_history.csv");
    ordered_json s;
    s["best_step"] = result.best_step;
    s["best_valid_loss"] = result.best_valid_loss;
    s["early_stopped"] = result.early_stopped;
    s["n_train"] = train.size();
    s["n_valid"] = valid.size();
    write_json(s, dir / "summary.json");
    log(stage_dir::dpo, "best step " + std::to_string(result.best_step) + " valid loss " +
                            std::to_string(result.best_valid_loss));
    finish_stage(cfg, stage_dir::dpo, {stage_dir::data, stage_dir::pretrain});
}

void run_probe(const PipelineConfig& cfg) {
    require_stage(cfg, stage_dir::data);
    require_stage(cfg, stage_dir::pretrain);
    const auto ckpt = load_checkpoint(stage_path(cfg, stage_dir::pretrain));
    const auto data = read_labeled(stage_path(cfg, stage_dir::data) / "probe.jsonl");
    std::vector<std::vector<TokenId>> texts;
    std::vector<int> labels;
    for (std::size_t i = 0; i < data.size(); ++i) {
        texts.push_back(encode(ckpt.vocab, data[i].text, "labeled text " + std::to_string(i)));
        labels.push_back(data[i].label);
    }
    const auto feats = probe_features_batch(ckpt.weights, texts, cfg.probe_feature);
    const auto [tr, te] = split_indices(feats.size(), cfg.probe_holdout_fraction, cfg.seed);
    std::vector<std::vector<double>> ftr, fte;
    std::vector<int> ltr, lte;
    std::vector<LabeledText> train_texts;
    for (auto i : tr) {
        ftr.push_back(feats[i]);
        ltr.push_back(labels[i]);
        train_texts.push_back(data[i]);
    }
    for (auto i : te) {
        fte.push_back(feats[i]);
        lte.push_back(labels[i]);
    }
    auto probe = train_probe(ftr, ltr, cfg.probe);
    probe.feature = cfg.probe_feature;
    probe.trained_on = dataset_fingerprint(train_texts);
    const auto ev = probe_eval(probe, fte, lte);
    const auto dir = fresh_stage_dir(cfg, stage_dir::probe);
    probe.save(dir);
    ordered_json s;
    s["accuracy"] = ev.accuracy;
    s["roc_auc"] = ev.roc_auc;
    s["n_train"] = ftr.size();
    s["n_test"] = fte.size();
    write_json(s, dir / "probe_eval.json");
    log(stage_dir::probe, "held-out accuracy " + std::to_string(ev.accuracy) + " auc " + std::to_string(ev.roc_auc));
    finish_stage(cfg, stage_dir::probe, {stage_dir::data, stage_dir::pretrain});
}

void run_locate(const PipelineConfig& cfg) {
    require_stage(cfg, stage_dir::data);
    require_stage(cfg, stage_dir::pretrain);
    require_stage(cfg, stage_dir::dpo);
    require_stage(cfg, stage_dir::probe);
    const auto pre = load_checkpoint(stage_path(cfg, stage_dir::pretrain));
    const auto post = load_checkpoint(stage_path(cfg, stage_dir::dpo));
    const auto probe = ToxicProbe::load(stage_path(cfg, stage_dir::probe));
    const auto prompts =
        prompts_by_language(read_prompts(stage_path(cfg, stage_dir::data) / "prompts.jsonl"), pre.vocab);
    const auto pivot = pivot_language(cfg);
    if (!prompts.count(pivot)) throw DataError("locate: no prompts in pivot language " + pivot);

    auto potential = rank_value_vectors(pre.weights, probe.weights, cfg.potential_sources);
    std::vector<NeuronRef> targets;
    for (const auto& r : potential) targets.push_back(r.ref());
    const auto before = collect_activations(pre.weights, prompts, targets, cfg.profile, "pre_dpo");
    const auto after = collect_activations(post.weights, prompts, targets, cfg.profile, "post_dpo");
    for (auto& r : potential) r.mean_activation = before.mean(pivot, r.ref());
    const auto actual = actual_sources(potential, before, pivot);

    const auto dir = fresh_stage_dir(cfg, stage_dir::locate);
    write_records_jsonl(potential, dir / "potential.jsonl");
    write_records_jsonl(actual, dir / "actual.jsonl");
    write_profiles_csv({before, after}, dir / "profiles.csv");
    ordered_json s;
    s["pivot"] = pivot;
    s["n_potential"] = potential.size();
    s["n_actual"] = actual.size();
    s["horizon"] = cfg.profile.horizon;
    s["truncated"] = before.truncated || after.truncated;
    write_json(s, dir / "summary.json");
    log(stage_dir::locate, std::to_string(actual.size()) + " of " + std::to_string(potential.size()) +
                               " potential sources are active on " + pivot + " prompts");
    finish_stage(cfg, stage_dir::locate, {stage_dir::data, stage_dir::pretrain, stage_dir::dpo, stage_dir::probe});
}

void run_project(const PipelineConfig& cfg) {
    require_stage(cfg, stage_dir::pretrain);
    require_stage(cfg, stage_dir::locate);
    const auto ckpt = load_checkpoint(stage_path(cfg, stage_dir::pretrain));
    auto actual = read_records_jsonl(stage_path(cfg, stage_dir::locate) / "actual.jsonl");
    for (auto& r : actual) r.promoted_tokens = project_to_vocab(ckpt.weights, ckpt.vocab, r.layer, r.neuron, cfg.promoted_tokens);
    const auto dir = fresh_stage_dir(cfg, stage_dir::project);
    write_records_jsonl(actual, dir / "projections.jsonl");
    finish_stage(cfg, stage_dir::project, {stage_dir::pretrain, stage_dir::locate});
}

void run_intervene(const PipelineConfig& cfg) {
    require_stage(cfg, stage_dir::data);
    require_stage(cfg, stage_dir::pretrain);
    require_stage(cfg, stage_dir::locate);
    const auto ckpt = load_checkpoint(stage_path(cfg, stage_dir::pretrain));
    const auto actual = read_records_jsonl(stage_path(cfg, stage_dir::locate) / "actual.jsonl");
    const auto prompts =
        prompts_by_language(read_prompts(stage_path(cfg, stage_dir::data) / "prompts.jsonl"), ckpt.vocab);
    auto scorer = make_scorer(cfg);
    std::vector<NeuronRef> targets;
    for (const auto& r : actual) targets.push_back(r.ref());

    SweepOptions opt;
    opt.length = cfg.intervene_length;
    opt.generation.seed = cfg.seed;
    const auto sweep = intervention_sweep(ckpt.weights, ckpt.vocab, targets, cfg.gammas, prompts, *scorer, opt);
    const auto baseline = intervention_sweep(ckpt.weights, ckpt.vocab, targets, {0.0}, prompts, *scorer, opt);
    opt.mode = InterventionMode::clamp_nonpositive;
    const auto clamped = intervention_sweep(ckpt.weights, ckpt.vocab, targets, {0.0}, prompts, *scorer, opt);

    const auto dir = fresh_stage_dir(cfg, stage_dir::intervene);
    write_sweep_csv(sweep, dir / "sweep.csv");
    auto f = open_out(dir / "clamp.csv");
    f << "language,n_targets,baseline_avg_tox,clamped_avg_tox\n";
    for (std::size_t i = 0; i < baseline.size(); ++i)
        f << baseline[i].language << ',' << targets.size() << ',' << baseline[i].avg_toxicity << ','
          << clamped[i].avg_toxicity << '\n';
    f.close();
    finish_stage(cfg, stage_dir::intervene, {stage_dir::data, stage_dir::pretrain, stage_dir::locate});
}

void run_eval(const PipelineConfig& cfg) {
    require_stage(cfg, stage_dir::data);
    require_stage(cfg, stage_dir::pretrain);
    require_stage(cfg, stage_dir::dpo);
    const auto pre = load_checkpoint(stage_path(cfg, stage_dir::pretrain));
    const auto post = load_checkpoint(stage_path(cfg, stage_dir::dpo));
    const auto prompts = read_prompts(stage_path(cfg, stage_dir::data) / "prompts.jsonl");
    auto scorer = make_scorer(cfg);
    const auto opt = eval_options(cfg);
    const auto before = evaluate(pre.weights, pre.vocab, prompts, *scorer, cfg.generation, pre.weights, opt);
    const auto after = evaluate(post.weights, post.vocab, prompts, *scorer, cfg.generation, pre.weights, opt);
    const auto dir = fresh_stage_dir(cfg, stage_dir::eval);
    write_dump(before.dump, dir / "dump_pre.jsonl");
    write_dump(after.dump, dir / "dump_post.jsonl");
    write_json(before.report.to_json(), dir / "report_pre.json");
    write_json(after.report.to_json(), dir / "report_post.json");
    for (const auto& m : after.report.languages)
        log(stage_dir::eval, m.language + " toxprob " + std::to_string(before.report.at(m.language).tox_prob) + " -> " +
                                 std::to_string(m.tox_prob));
    std::vector<const char*> up = {stage_dir::data, stage_dir::pretrain, stage_dir::dpo};
    if (cfg.scorer.kind == ScorerKind::probe) up.push_back(stage_dir::probe);
    finish_stage(cfg, stage_dir::eval, up);
}

void run_retrieve(const PipelineConfig& cfg) {
    require_stage(cfg, stage_dir::data);
    require_stage(cfg, stage_dir::pretrain);
    const auto ckpt = load_checkpoint(stage_path(cfg, stage_dir::pretrain));
    const auto pairs = read_parallel(stage_path(cfg, stage_dir::data) / "parallel.jsonl");
    std::map<std::string, std::pair<std::vector<std::vector<TokenId>>, std::vector<std::vector<TokenId>>>> by_lang;
    for (const auto& p : pairs) {
        auto& [src, piv] = by_lang[p.language];
        src.push_back(encode(ckpt.vocab, p.text, "parallel " + p.id));
        piv.push_back(encode(ckpt.vocab, p.pivot_text, "parallel " + p.id));
    }
    const auto dir = fresh_stage_dir(cfg, stage_dir::retrieve);
    auto f = open_out(dir / "retrieval.csv");
    f << "language,layer,accuracy\n";
    ordered_json summary = ordered_json::object();
    for (const auto& [lang, sp] : by_lang) {
        const auto res = retrieval_accuracy(sentence_reps_batch(ckpt.weights, sp.first, cfg.pooling),
                                            sentence_reps_batch(ckpt.weights, sp.second, cfg.pooling));
        for (std::size_t l = 0; l < res.per_layer.size(); ++l) f << lang << ',' << l << ',' << res.per_layer[l] << '\n';
        f << lang << ",mean," << res.mean << '\n';
        summary[lang] = {{"per_layer", res.per_layer}, {"mean", res.mean}};
        log(stage_dir::retrieve, lang + " mean accuracy " + std::to_string(res.mean));
    }
    f.close();
    write_json(summary, dir / "retrieval.json");
    finish_stage(cfg, stage_dir::retrieve, {stage_dir::data, stage_dir::pretrain});
}

std::vector<ProfileRow> read_profiles_csv(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing activation profile " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "language,layer,neuron,phase,mean_activation") throw DataError(path.string() + ": unexpected header");
    std::vector<ProfileRow> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string lang, layer, neuron, phase, value;
        if (!std::getline(ss, lang, ',') || !std::getline(ss, layer, ',') || !std::getline(ss, neuron, ',') ||
            !std::getline(ss, phase, ',') || !std::getline(ss, value))
            throw DataError(path.string() + ": malformed row '" + line + "'");
        try {
            out.push_back({lang, {std::stoul(layer), std::stoul(neuron)}, phase, std::stod(value)});
        } catch (const std::exception&) {
            throw DataError(path.string() + ": malformed row '" + line + "'");
        }
    }
    return out;
}

namespace {

void write_table_rows(std::ostream& f, const std::string& model, const EvalReport& r) {
    auto row = [&](const LanguageMetrics& m) {
        f << model << ',' << m.language << ',' << m.emt << ',' << m.tox_prob << ',' << m.avg_tox << ',' << m.median_ppl
          << ',' << m.dist_1 << ',' << m.dist_2 << ',' << m.dist_3 << '\n';
    };
    for (const auto& m : r.languages) row(m);
    row(r.average);
}

}  // namespace

void run_report(const PipelineConfig& cfg) {
    require_stage(cfg, stage_dir::eval);
    require_stage(cfg, stage_dir::locate);
    require_stage(cfg, stage_dir::retrieve);
    const auto opt = eval_options(cfg);
    const auto before = aggregate_report(read_dump(stage_path(cfg, stage_dir::eval) / "dump_pre.jsonl"), opt);
    const auto after = aggregate_report(read_dump(stage_path(cfg, stage_dir::eval) / "dump_post.jsonl"), opt);
    const auto profiles = read_profiles_csv(stage_path(cfg, stage_dir::locate) / "profiles.csv");
    const auto actual = read_records_jsonl(stage_path(cfg, stage_dir::locate) / "actual.jsonl");
    const auto retrieval = read_json(stage_path(cfg, stage_dir::retrieve) / "retrieval.json");
    const auto pivot = pivot_language(cfg);

    const auto dir = fresh_stage_dir(cfg, stage_dir::report);
    {
        auto f = open_out(dir / "table.csv");
        f << "model,language,emt,tox_prob,avg_tox,median_ppl,dist_1,dist_2,dist_3\n";
        write_table_rows(f, "pre_dpo", before);
        write_table_rows(f, "post_dpo", after);
    }
    {
        std::set<NeuronRef> keep;
        for (const auto& r : actual) keep.insert(r.ref());
        std::map<std::pair<std::string, NeuronRef>, std::pair<double, double>> joined;
        for (const auto& p : profiles) {
            if (!keep.count(p.target)) continue;
            auto& slot = joined[{p.language, p.target}];
            (p.phase == "pre_dpo" ? slot.first : slot.second) = p.mean_activation;
        }
        auto f = open_out(dir / "activations.csv");
        f << "language,layer,neuron,pre_dpo,post_dpo,difference\n";
        for (const auto& [key, v] : joined)
            f << key.first << ',' << key.second.layer << ',' << key.second.neuron << ',' << v.first << ',' << v.second
              << ',' << v.second - v.first << '\n';
    }
    std::vector<TransferRecord> records;
    for (const auto& m : after.languages) {
        if (m.language == pivot || !retrieval.contains(m.language)) continue;
        records.push_back({m.language, retrieval.at(m.language).at("mean").get<double>(),
                           emt_change_pct(before.at(m.language).emt, m.emt)});
    }
    write_transfer_csv(records, dir / "transfer.csv");
    if (records.size() >= 3) {
        // A degenerate correlation is part of the result, not a stage failure.
        try {
            const auto rep = transfer_report(records, cfg.n_permutations, cfg.seed);
            write_correlation_json(rep.correlation, dir / "correlation.json");
        } catch (const DataError& e) {
            write_json({{"error", e.what()}}, dir / "correlation.json");
            log(stage_dir::report, std::string("correlation undefined: ") + e.what());
        }
    } else {
        log(stage_dir::report, "fewer than 3 non-pivot languages; skipping the correlation");
    }
    finish_stage(cfg, stage_dir::report, {stage_dir::eval, stage_dir::locate, stage_dir::retrieve});
}

std::vector<SweepPoint> lr_sweep(const Weights<float>& reference, const Vocabulary& vocab,
                                 const std::vector<PreferenceExample>& train,
                                 const std::vector<PreferenceExample>& valid, const std::vector<EvalPrompt>& prompts,
                                 ToxicityScorer& scorer, const std::vector<double>& learning_rates,
                                 const DpoConfig& dpo, const GenerationConfig& gen, const EvalOptions& options) {
    if (learning_rates.empty()) throw ConfigError("lr_sweep: no learning rates");
    std::vector<SweepPoint> out;
    for (double lr : learning_rates) {
        SweepPoint point;
        point.learning_rate = lr;
        try {
            DpoConfig c = dpo;
            c.learning_rate = lr;
            const auto tuned = train_dpo(reference, reference, train, valid, c);
            const auto run = evaluate(tuned.weights, vocab, prompts, scorer, gen, reference, options);
            point.metrics = run.report.average;
        } catch (const std::exception& e) {
            point.error = e.what();
        }
        out.push_back(std::move(point));
    }
    return out;
}

void write_tradeoff_csv(const std::vector<SweepPoint>& points, const fs::path& path) {
    auto f = open_out(path);
    f << "lr,emt,tox_prob,median_ppl,error\n";
    for (const auto& p : points) {
        f << p.learning_rate << ',';
        if (p.metrics)
            f << p.metrics->emt << ',' << p.metrics->tox_prob << ',' << p.metrics->median_ppl << ",\n";
        else
            f << ",,," << json(p.error).dump() << '\n';
    }
}

void run_lr_sweep(const PipelineConfig& cfg) {
    require_stage(cfg, stage_dir::data);
    require_stage(cfg, stage_dir::pretrain);
    const auto ref = load_checkpoint(stage_path(cfg, stage_dir::pretrain));
    const auto [train, valid] = load_preference_split(cfg, ref.vocab);
    const auto prompts = read_prompts(stage_path(cfg, stage_dir::data) / "prompts.jsonl");
    auto scorer = make_scorer(cfg);
    const auto points = lr_sweep(ref.weights, ref.vocab, train, valid, prompts, *scorer, cfg.sweep_learning_rates,
                                 cfg.dpo, cfg.generation, eval_options(cfg));
    const auto dir = fresh_stage_dir(cfg, stage_dir::lr_sweep);
    write_tradeoff_csv(points, dir / "tradeoff.csv");
    for (const auto& p : points)
        if (!p.error.empty()) log(stage_dir::lr_sweep, "lr " + std::to_string(p.learning_rate) + " failed: " + p.error);
    std::vector<const char*> up = {stage_dir::data, stage_dir::pretrain};
    if (cfg.scorer.kind == ScorerKind::probe) up.push_back(stage_dir::probe);
    finish_stage(cfg, stage_dir::lr_sweep, up);
}

const std::vector<std::string>& pipeline_stages() {
    static const std::vector<std::string> stages = {"synth-data", "pretrain",  "dpo",  "probe",    "locate",
                                                    "project",    "intervene", "eval", "retrieve", "report"};
    return stages;
}

void run_stage(const std::string& name, const PipelineConfig& cfg) {
    if (name == "synth-data") return run_synth_data(cfg);
    if (name == "pretrain") return run_pretrain(cfg);
    if (name == "dpo") return run_dpo(cfg);
    if (name == "probe") return run_probe(cfg);
    if (name == "locate") return run_locate(cfg);
    if (name == "project") return run_project(cfg);
    if (name == "intervene") return run_intervene(cfg);
    if (name == "eval") return run_eval(cfg);
    if (name == "retrieve") return run_retrieve(cfg);
    if (name == "report") return run_report(cfg);
    if (name == "lr-sweep") return run_lr_sweep(cfg);
    throw ConfigError("unknown stage '" + name + "'");
}

}  // namespace detox
