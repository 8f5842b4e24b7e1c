#pragma once

#include <atomic>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "detox/probe.hpp"
#include "detox/vocab.hpp"

namespace detox {

// One score in [0, 1], or an error message for that text alone.
struct ScoreResult {
    std::optional<double> score;
    std::string error;

    bool ok() const { return score.has_value(); }
};

class ToxicityScorer {
public:
    virtual ~ToxicityScorer() = default;
    // Results are aligned with `texts`; failures never abort the batch.
    virtual std::vector<ScoreResult> score(const std::vector<std::string>& texts, const std::string& language) = 0;
    virtual std::string name() const = 0;
};

// Fraction of whitespace tokens found in the language's toxic lexicon.
class LexiconScorer : public ToxicityScorer {
public:
    explicit LexiconScorer(std::map<std::string, std::set<std::string>> lexicons);
    std::vector<ScoreResult> score(const std::vector<std::string>& texts, const std::string& language) override;
    std::string name() const override { return "lexicon"; }
    double score_text(const std::string& text, const std::set<std::string>& lexicon) const;

private:
    std::map<std::string, std::set<std::string>> lexicons_;
};

// Sigmoid output of a linear probe over the model's mean last-layer residual.
class ProbeScorer : public ToxicityScorer {
public:
    ProbeScorer(const Weights<float>& weights, const Vocabulary& vocab, ToxicProbe probe);
    std::vector<ScoreResult> score(const std::vector<std::string>& texts, const std::string& language) override;
    std::string name() const override { return "probe"; }

private:
    const Weights<float>& weights_;
    const Vocabulary& vocab_;
    ToxicProbe probe_;
};

// Wire protocol of the remote service. `simple` is POST {text, language} ->
// {score}. `perspective` speaks the comment-analyzer request/response shape.
enum class RemoteProtocol { simple, perspective };

namespace remote_protocol {
std::string encode_request(RemoteProtocol protocol, const std::string& text, const std::string& language);
// Returns the score or throws DataError on malformed bodies.
double decode_response(RemoteProtocol protocol, const std::string& body);
}  // namespace remote_protocol

struct RemoteScorerConfig {
    std::string base_url = "http://127.0.0.1:8080";  // scheme://host:port
    std::string path = "/score";
    std::string api_key;  // sent as ?key= when non-empty
    RemoteProtocol protocol = RemoteProtocol::simple;
    std::size_t max_in_flight = 4;
    std::size_t max_retries = 4;
    int initial_backoff_ms = 100;
    double backoff_factor = 2.0;
    int timeout_seconds = 10;
};

class RemoteScorer : public ToxicityScorer {
public:
    explicit RemoteScorer(RemoteScorerConfig config);
    std::vector<ScoreResult> score(const std::vector<std::string>& texts, const std::string& language) override;
    std::string name() const override { return "remote_api"; }

    // Total HTTP attempts made so far, including retries.
    std::size_t attempts() const { return attempts_; }

private:
    ScoreResult score_one(const std::string& text, const std::string& language);

    RemoteScorerConfig config_;
    std::atomic<std::size_t> attempts_{0};
};

}  // namespace detox
