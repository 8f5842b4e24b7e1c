#include "detox/scorer.hpp"

#include <chrono>
#include <cmath>
#include <thread>

#include "detox/error.hpp"
#include "httplib.h"
#include "json.hpp"

namespace detox {

LexiconScorer::LexiconScorer(std::map<std::string, std::set<std::string>> lexicons) : lexicons_(std::move(lexicons)) {}

double LexiconScorer::score_text(const std::string& text, const std::set<std::string>& lexicon) const {
    const auto words = split_whitespace(text);
    if (words.empty()) return 0.0;
    std::size_t hits = 0;
    for (const auto& w : words)
        if (lexicon.contains(w)) ++hits;
    return static_cast<double>(hits) / static_cast<double>(words.size());
}

std::vector<ScoreResult> LexiconScorer::score(const std::vector<std::string>& texts, const std::string& language) {
    std::vector<ScoreResult> out(texts.size());
    const auto it = lexicons_.find(language);
    for (std::size_t i = 0; i < texts.size(); ++i) {
        if (it == lexicons_.end())
            out[i].error = "unsupported language '" + language + "'";
        else
            out[i].score = score_text(texts[i], it->second);
    }
    return out;
}

ProbeScorer::ProbeScorer(const Weights<float>& weights, const Vocabulary& vocab, ToxicProbe probe)
    : weights_(weights), vocab_(vocab), probe_(std::move(probe)) {
    if (probe_.weights.size() != weights.config.d_model) throw DataError("probe scorer: probe dimension mismatch");
}

std::vector<ScoreResult> ProbeScorer::score(const std::vector<std::string>& texts, const std::string&) {
    std::vector<ScoreResult> out(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) {
        auto ids = vocab_.tokenize(texts[i]);
        if (ids.empty()) {
            out[i].error = "empty text";
            continue;
        }
        if (ids.size() > weights_.config.max_seq_len) ids.resize(weights_.config.max_seq_len);
        const double s = probe_.score(probe_features(weights_, ids, probe_.feature));
        if (std::isfinite(s))
            out[i].score = s;
        else
            out[i].error = "non-finite probe score";
    }
    return out;
}

namespace remote_protocol {

std::string encode_request(RemoteProtocol protocol, const std::string& text, const std::string& language) {
    nlohmann::ordered_json j;
    if (protocol == RemoteProtocol::simple) {
        j["text"] = text;
        j["language"] = language;
    } else {
        j["comment"]["text"] = text;
        j["languages"] = nlohmann::json::array({language});
        j["requestedAttributes"]["TOXICITY"] = nlohmann::json::object();
    }
    return j.dump();
}

double decode_response(RemoteProtocol protocol, const std::string& body) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
        const auto& v = protocol == RemoteProtocol::simple
                            ? j.at("score")
                            : j.at("attributeScores").at("TOXICITY").at("summaryScore").at("value");
        if (!v.is_number()) throw DataError("remote scorer: score is not a number");
        return v.get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("remote scorer: malformed response: ") + e.what());
    }
}

}  // namespace remote_protocol

RemoteScorer::RemoteScorer(RemoteScorerConfig config) : config_(std::move(config)) {
    if (config_.max_in_flight < 1) throw ConfigError("remote scorer: max_in_flight must be >= 1");
}

ScoreResult RemoteScorer::score_one(const std::string& text, const std::string& language) {
    httplib::Client cli(config_.base_url);
    cli.set_connection_timeout(config_.timeout_seconds, 0);
    cli.set_read_timeout(config_.timeout_seconds, 0);
    std::string path = config_.path;
    if (!config_.api_key.empty()) path += (path.find('?') == std::string::npos ? "?key=" : "&key=") + config_.api_key;
    const std::string body = remote_protocol::encode_request(config_.protocol, text, language);

    ScoreResult out;
    double backoff = config_.initial_backoff_ms;
    for (std::size_t attempt = 0; attempt <= config_.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(static_cast<long long>(backoff)));
            backoff *= config_.backoff_factor;
        }
        ++attempts_;
        auto res = cli.Post(path, body, "application/json");
        if (!res) {
            out.error = "connection failure: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 200) {
            try {
                const double s = remote_protocol::decode_response(config_.protocol, res->body);
                if (!std::isfinite(s) || s < 0.0 || s > 1.0) {
                    out.error = "score out of range";
                    return out;
                }
                out.score = s;
                out.error.clear();
            } catch (const DataError& e) {
                out.error = e.what();
            }
            return out;
        }
        if (res->status == 429) {
            out.error = "quota exceeded (HTTP 429)";
            continue;
        }
        if (res->status >= 500) {
            out.error = "server error (HTTP " + std::to_string(res->status) + ")";
            continue;
        }
        // Other 4xx are not transient (bad request, unsupported language, auth).
        out.error = "request rejected (HTTP " + std::to_string(res->status) + "): " + res->body;
        return out;
    }
    return out;
}

std::vector<ScoreResult> RemoteScorer::score(const std::vector<std::string>& texts, const std::string& language) {
    std::vector<ScoreResult> out(texts.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < texts.size(); i = next++) out[i] = score_one(texts[i], language);
    };
    const std::size_t n_workers = std::min(config_.max_in_flight, texts.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    return out;
}

}  // namespace detox
