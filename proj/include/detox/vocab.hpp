#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace detox {

using TokenId = int;

// Whitespace tokenizer over an explicit token list. Ids are dense in
// [0, size()); id 0 is "<unk>" and id 1 is "<bos>".
class Vocabulary {
public:
    static constexpr TokenId unk_id = 0;
    static constexpr TokenId bos_id = 1;
    static constexpr std::string_view unk_token = "<unk>";
    static constexpr std::string_view bos_token = "<bos>";

    Vocabulary();
    // Tokens are appended after the reserved ones; duplicates are rejected.
    explicit Vocabulary(const std::vector<std::string>& tokens);

    TokenId add(const std::string& token);
    std::size_t size() const { return tokens_.size(); }
    bool contains(std::string_view token) const;
    TokenId id(std::string_view token) const;  // unk_id when absent
    const std::string& token(TokenId id) const;

    std::vector<TokenId> tokenize(std::string_view text) const;
    std::string detokenize(std::span<const TokenId> ids) const;

    const std::vector<std::string>& tokens() const { return tokens_; }

    // vocab.json: {"token": id, ...}
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

    bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

std::vector<std::string> split_whitespace(std::string_view text);

}  // namespace detox
