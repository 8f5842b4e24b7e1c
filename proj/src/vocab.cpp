#include "detox/vocab.hpp"

#include <fstream>

#include "detox/error.hpp"
#include "json.hpp"

namespace detox {

std::vector<std::string> split_whitespace(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) ++i;
        const std::size_t start = i;
        while (i < text.size() && !is_space(text[i])) ++i;
        if (i > start) out.emplace_back(text.substr(start, i - start));
    }
    return out;
}

Vocabulary::Vocabulary() {
    add(std::string(unk_token));
    add(std::string(bos_token));
}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
    for (const auto& t : tokens) add(t);
}

TokenId Vocabulary::add(const std::string& token) {
    if (token.empty() || split_whitespace(token).size() != 1 || split_whitespace(token)[0] != token)
        throw DataError("vocabulary: invalid token '" + token + "'");
    if (index_.contains(token)) throw DataError("vocabulary: duplicate token '" + token + "'");
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
}

bool Vocabulary::contains(std::string_view token) const { return index_.contains(std::string(token)); }

TokenId Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? unk_id : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw DataError("vocabulary: token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::tokenize(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& w : split_whitespace(text)) ids.push_back(id(w));
    return ids;
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += token(ids[i]);
    }
    return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < tokens_.size(); ++i) j[tokens_[i]] = i;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << j.dump(1) << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("missing vocabulary file " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("vocabulary " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw DataError("vocabulary " + path.string() + ": expected an object");
    std::vector<std::string> by_id(j.size());
    std::vector<bool> seen(j.size(), false);
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!it.value().is_number_integer()) throw DataError("vocabulary: non-integer id for '" + it.key() + "'");
        const auto id = it.value().get<long long>();
        if (id < 0 || static_cast<std::size_t>(id) >= by_id.size() || seen[static_cast<std::size_t>(id)])
            throw DataError("vocabulary: ids must be a permutation of [0, n); bad id " + std::to_string(id));
        seen[static_cast<std::size_t>(id)] = true;
        by_id[static_cast<std::size_t>(id)] = it.key();
    }
    if (by_id.size() < 2 || by_id[0] != unk_token || by_id[1] != bos_token)
        throw DataError("vocabulary: ids 0 and 1 must be <unk> and <bos>");
    Vocabulary v;
    for (std::size_t i = 2; i < by_id.size(); ++i) v.add(by_id[i]);
    return v;
}

}  // namespace detox
