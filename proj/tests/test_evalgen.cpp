#include <cmath>
#include <map>
#include <random>
#include <thread>

#include "detox/error.hpp"
#include "detox/evaluation.hpp"
#include "detox/metrics.hpp"
#include "detox/model.hpp"
#include "detox/sampling.hpp"
#include "detox/scorer.hpp"
#include "doctest.h"
#include "httplib.h"
#include "support.hpp"

using namespace detox;

namespace {

Vocabulary vocab_of(std::size_t n) {
    Vocabulary v;
    while (v.size() < n) v.add("t" + std::to_string(v.size()));
    return v;
}

class ConstantScorer : public ToxicityScorer {
public:
    explicit ConstantScorer(double v) : v_(v) {}
    std::vector<ScoreResult> score(const std::vector<std::string>& texts, const std::string&) override {
        return std::vector<ScoreResult>(texts.size(), ScoreResult{v_, {}});
    }
    std::string name() const override { return "constant"; }

private:
    double v_;
};

PromptScores random_scores(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PromptScores s(1 + rng() % 40);
    for (auto& p : s) {
        p.resize(1 + rng() % 25);
        for (auto& v : p) v = (rng() % 5 == 0) ? 0.5 : u(rng);
    }
    return s;
}

// Local stand-in for the scoring service, driven by a scripted list of statuses.
struct MockServer {
    httplib::Server server;
    std::thread thread;
    int port = 0;
    std::vector<int> statuses;
    std::string ok_body = R"({"score": 0.25})";
    std::atomic<std::size_t> hits{0};

    MockServer() {
        server.Post("/score", [this](const httplib::Request&, httplib::Response& res) {
            const std::size_t i = hits++;
            const int status = i < statuses.size() ? statuses[i] : 200;
            res.status = status;
            res.set_content(status == 200 ? ok_body : std::string("{}"), "application/json");
        });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~MockServer() {
        server.stop();
        thread.join();
    }
    RemoteScorerConfig config() const {
        RemoteScorerConfig c;
        c.base_url = "http://127.0.0.1:" + std::to_string(port);
        c.initial_backoff_ms = 1;
        c.max_retries = 2;
        c.max_in_flight = 1;
        return c;
    }
};

}  // namespace

TEST_SUITE("evalgen") {
    TEST_CASE("nucleus keeps the minimal prefix and renormalizes") {
        const std::vector<double> p = {0.5, 0.3, 0.15, 0.05};
        const auto s = nucleus_from_probs(p, 0.8);
        REQUIRE(s.ids == std::vector<TokenId>{0, 1});
        CHECK(s.probs[0] == doctest::Approx(0.625).epsilon(1e-12));
        CHECK(s.probs[1] == doctest::Approx(0.375).epsilon(1e-12));
        CHECK(nucleus_from_probs(p, 1.0).ids.size() == 4);
        CHECK(nucleus_from_probs(p, 0.5).ids == std::vector<TokenId>{0});
    }

    TEST_CASE("sampled tokens lie in a prefix that is minimal") {
        std::mt19937_64 gen(2);
        Rng rng(2);
        std::normal_distribution<float> g(0.0f, 2.0f);
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<float> logits(12);
            for (auto& l : logits) l = g(gen);
            const double top_p = 0.05 + 0.9 * (trial % 19) / 18.0;
            const auto sup = nucleus_support(logits, 1.0, top_p);
            double mass = 0;
            const auto full = nucleus_support(logits, 1.0, 1.0);
            for (std::size_t i = 0; i < sup.ids.size(); ++i) mass += full.probs[i];
            CHECK(mass >= top_p - 1e-12);
            CHECK(mass - full.probs[sup.ids.size() - 1] < top_p);
            const auto t = sample_token(logits, 1.0, top_p, rng);
            CHECK(std::find(sup.ids.begin(), sup.ids.end(), t) != sup.ids.end());
        }
    }

    TEST_CASE("full-support sampling matches the softmax distribution") {
        const std::vector<float> logits = {1.0f, 0.5f, 0.0f, -0.5f, -1.0f, 2.0f};
        std::vector<double> p(logits.size());
        double z = 0;
        for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(double(logits[i]));
        for (auto& v : p) v /= z;
        Rng rng(17);
        const int n = 100000;
        std::vector<int> counts(p.size(), 0);
        for (int i = 0; i < n; ++i) ++counts[sample_token(logits, 1.0, 1.0, rng)];
        double chi2 = 0;
        for (std::size_t i = 0; i < p.size(); ++i) chi2 += std::pow(counts[i] - n * p[i], 2) / (n * p[i]);
        CHECK(chi2 < 15.086);  // chi-square 0.99 quantile, 5 degrees of freedom
    }

    TEST_CASE("temperature zero makes every continuation greedy") {
        const auto c = testing::tiny_config();
        const auto w = testing::random_weights(c, 1);
        GenerationConfig g;
        g.k = 5;
        g.length = 6;
        g.temperature = 0.0;
        const std::vector<TokenId> prompt = {2, 3};
        const auto conts = sample_continuations(w, prompt, g, 0);
        for (const auto& cont : conts) CHECK(cont == greedy_generate(w, prompt, 6));
    }

    TEST_CASE("seeded sampling is deterministic per stream") {
        const auto c = testing::tiny_config();
        const auto w = testing::random_weights(c, 2);
        GenerationConfig g;
        g.k = 4;
        g.length = 8;
        const std::vector<TokenId> prompt = {4};
        CHECK(sample_continuations(w, prompt, g, 3) == sample_continuations(w, prompt, g, 3));
        CHECK(sample_continuations(w, prompt, g, 3) != sample_continuations(w, prompt, g, 4));
    }

    TEST_CASE("toxicity metric examples") {
        CHECK(expected_max_toxicity({{0.1, 0.9}}) == doctest::Approx(0.9));
        CHECK(expected_max_toxicity({{0.1, 0.9}, {0.2, 0.3}}) == doctest::Approx(0.6));
        CHECK(toxicity_probability({{0.4, 0.49}}) == 0.0);
        CHECK(toxicity_probability({{0.6, 0.1}, {0.2, 0.3}}) == 0.5);
        CHECK(toxicity_probability({{0.5}}) == 1.0);
        CHECK(average_toxicity({{0.0}}) == 0.0);
        CHECK(average_toxicity({{0.2, 0.4}, {0.6}}) == doctest::Approx(0.4));
    }

    TEST_CASE("toxicity metrics match brute force on random inputs") {
        std::mt19937_64 rng(5);
        for (int trial = 0; trial < 50; ++trial) {
            const auto s = random_scores(rng);
            double emt = 0, hits = 0, sum = 0, count = 0;
            for (const auto& p : s) {
                double m = -1;
                for (double v : p) {
                    m = v > m ? v : m;
                    sum += v;
                    count += 1;
                }
                emt += m;
                hits += m >= 0.5 ? 1 : 0;
            }
            CHECK(std::abs(expected_max_toxicity(s) - emt / s.size()) <= 1e-9);
            CHECK(std::abs(toxicity_probability(s) - hits / s.size()) <= 1e-9);
            CHECK(std::abs(average_toxicity(s) - sum / count) <= 1e-9);
        }
    }

    TEST_CASE("distinct-n examples") {
        using Conts = std::vector<std::vector<std::vector<std::string>>>;
        CHECK(distinct_n(Conts{{{"a", "a", "a"}}}, 1) == doctest::Approx(1.0 / 3.0));
        CHECK(distinct_n(Conts{{{"a", "b", "c"}, {"d", "e"}}}, 1) == 1.0);
        CHECK(distinct_n(Conts{{{"a", "b", "a", "b"}}}, 2) == doctest::Approx(2.0 / 3.0));
        CHECK(distinct_n(Conts{{{"a"}}, {{"a", "b"}}}, 2) == 1.0);  // short prompt contributes nothing
        CHECK_THROWS_AS(distinct_n(Conts{{{"a"}}}, 2), DataError);
        CHECK_THROWS_AS(distinct_n(Conts{{{"a"}}}, 0), DataError);
    }

    TEST_CASE("distinct-n matches brute force") {
        std::mt19937_64 rng(6);
        for (int trial = 0; trial < 30; ++trial) {
            std::vector<std::vector<std::vector<int>>> conts(1 + rng() % 10);
            for (auto& p : conts) {
                p.resize(1 + rng() % 5);
                for (auto& c : p) {
                    c.resize(3 + rng() % 10);
                    for (auto& t : c) t = static_cast<int>(rng() % 4);
                }
            }
            for (std::size_t n = 1; n <= 3; ++n) {
                double sum = 0;
                for (const auto& p : conts) {
                    std::vector<std::vector<int>> grams;
                    for (const auto& c : p)
                        for (std::size_t i = 0; i + n <= c.size(); ++i) grams.emplace_back(c.begin() + i, c.begin() + i + n);
                    std::size_t uniq = 0;
                    for (std::size_t i = 0; i < grams.size(); ++i)
                        if (std::find(grams.begin(), grams.begin() + i, grams[i]) == grams.begin() + i) ++uniq;
                    sum += double(uniq) / grams.size();
                }
                CHECK(std::abs(distinct_n(conts, n) - sum / conts.size()) <= 1e-9);
            }
        }
    }

    TEST_CASE("perplexity examples") {
        CHECK(perplexity_from_logprob(std::log(0.5) + std::log(0.25), 2) == doctest::Approx(2.828427).epsilon(1e-6));
        CHECK(perplexity_from_logprob(0.0, 7) == 1.0);
        CHECK(perplexity_from_logprob(5 * std::log(1.0 / 16), 5) == doctest::Approx(16.0).epsilon(1e-12));
        CHECK(median({3, 1, 2}) == 2);
        CHECK(median({4, 1, 2, 3}) == 2.5);
    }

    TEST_CASE("uniform reference model gives perplexity equal to the vocabulary size") {
        const auto c = testing::tiny_config(1, 8, 16, 2, 16, 32);
        const auto ref = Weights<float>::zeros(c);
        const auto model = testing::random_weights(c, 3);
        const auto vocab = vocab_of(16);
        ConstantScorer zero(0.0);
        GenerationConfig g;
        g.k = 3;
        g.length = 5;
        const auto run = evaluate(model, vocab, {{"p0", "x", "t2 t3"}, {"p1", "x", "t4"}}, zero, g, ref);
        CHECK(run.report.at("x").median_ppl == doctest::Approx(16.0).epsilon(1e-5));
        CHECK(run.report.at("x").emt == 0.0);
        CHECK(run.report.at("x").tox_prob == 0.0);
        CHECK(run.report.at("x").avg_tox == 0.0);
    }

    TEST_CASE("lexicon scorer examples") {
        LexiconScorer s(std::map<std::string, std::set<std::string>>{{"en", {"bad"}}});
        const auto r = s.score({"good good bad", "good", ""}, "en");
        CHECK(*r[0].score == doctest::Approx(1.0 / 3.0));
        CHECK(*r[1].score == 0.0);
        CHECK(*r[2].score == 0.0);
        const auto missing = s.score({"bad"}, "fr");
        CHECK_FALSE(missing[0].ok());
    }

    TEST_CASE("remote scorer parses the mock reply and retries transient failures") {
        MockServer mock;
        mock.statuses = {500, 200};
        RemoteScorer scorer(mock.config());
        const auto r = scorer.score({"some text"}, "en");
        REQUIRE(r[0].ok());
        CHECK(*r[0].score == 0.25);
        CHECK(scorer.attempts() == 2);
    }

    TEST_CASE("remote scorer isolates per-text failures") {
        MockServer mock;
        mock.statuses = {429, 429, 429, 200};
        RemoteScorer scorer(mock.config());
        const auto r = scorer.score({"a", "b"}, "en");
        CHECK_FALSE(r[0].ok());
        CHECK(r[0].error.find("429") != std::string::npos);
        REQUIRE(r[1].ok());
        CHECK(*r[1].score == 0.25);

        MockServer bad;
        bad.ok_body = R"({"score": 1.5})";
        RemoteScorer out_of_range(bad.config());
        CHECK_FALSE(out_of_range.score({"a"}, "en")[0].ok());

        MockServer reject;
        reject.statuses = {400};
        RemoteScorer rejected(reject.config());
        CHECK_FALSE(rejected.score({"a"}, "en")[0].ok());
        CHECK(rejected.attempts() == 1);
    }

    TEST_CASE("perspective protocol round trip") {
        const auto req = nlohmann::json::parse(remote_protocol::encode_request(RemoteProtocol::perspective, "hi", "de"));
        CHECK(req["comment"]["text"] == "hi");
        CHECK(req["languages"][0] == "de");
        const std::string body = R"({"attributeScores":{"TOXICITY":{"summaryScore":{"value":0.7}}}})";
        CHECK(remote_protocol::decode_response(RemoteProtocol::perspective, body) == 0.7);
        CHECK_THROWS_AS(remote_protocol::decode_response(RemoteProtocol::simple, "{}"), DataError);
    }

    TEST_CASE("report recomputes from the persisted dump") {
        const auto c = testing::tiny_config(1, 8, 16, 2, 12, 32);
        const auto model = testing::random_weights(c, 4);
        const auto vocab = vocab_of(12);
        LexiconScorer scorer(std::map<std::string, std::set<std::string>>{{"a", {"t3", "t5"}}, {"b", {"t4"}}});
        GenerationConfig g;
        g.k = 6;
        g.length = 8;
        const std::vector<EvalPrompt> prompts = {{"p0", "a", "t2"}, {"p1", "a", "t6 t7"}, {"p2", "b", "t8"}};
        const auto run = evaluate(model, vocab, prompts, scorer, g, model);
        const auto path = std::filesystem::temp_directory_path() / "detox_test_dump.jsonl";
        write_dump(run.dump, path);
        const auto back = read_dump(path);
        const auto again = aggregate_report(back);
        CHECK(again.to_json().dump() == aggregate_report(run.dump).to_json().dump());

        // Independent recomputation of language "a" from the raw records.
        std::map<std::string, std::vector<double>> by_prompt;
        std::vector<double> ppl;
        std::vector<std::vector<std::vector<std::string>>> conts(2);
        for (const auto& r : back) {
            if (r.language != "a") continue;
            by_prompt[r.prompt_id].push_back(*r.score);
            ppl.push_back(std::exp(r.nll));
            conts[r.prompt_id == "p0" ? 0 : 1].push_back(split_whitespace(r.text));
        }
        PromptScores s;
        for (auto& [id, v] : by_prompt) s.push_back(v);
        const auto& m = again.at("a");
        CHECK(std::abs(m.emt - expected_max_toxicity(s)) <= 1e-9);
        CHECK(std::abs(m.tox_prob - toxicity_probability(s)) <= 1e-9);
        CHECK(std::abs(m.avg_tox - average_toxicity(s)) <= 1e-9);
        CHECK(std::abs(m.median_ppl - median(ppl)) <= 1e-9);
        CHECK(std::abs(m.dist_2 - distinct_n(conts, 2)) <= 1e-9);

        const auto rerun = evaluate(model, vocab, prompts, scorer, g, model);
        CHECK(rerun.report.to_json().dump() == run.report.to_json().dump());
    }
}
