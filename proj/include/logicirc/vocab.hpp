#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "logicirc/logic.hpp"

namespace logicirc {

using TokenId = std::int32_t;

// Fixed vocabulary: 15 structural tokens followed by `pool_size` contiguous
// proposition-variable ids. Every token is a single id.
class Vocab {
public:
    static constexpr TokenId kRulesStart = 0;
    static constexpr TokenId kRulesEnd = 1;
    static constexpr TokenId kFactsStart = 2;
    static constexpr TokenId kFactsEnd = 3;
    static constexpr TokenId kQueryStart = 4;
    static constexpr TokenId kQueryEnd = 5;
    static constexpr TokenId kAnswer = 6;
    static constexpr TokenId kPeriod = 7;
    static constexpr TokenId kSemicolon = 8;
    static constexpr TokenId kImplies = 9;
    static constexpr TokenId kAnd = 10;
    static constexpr TokenId kOr = 11;
    static constexpr TokenId kTrue = 12;
    static constexpr TokenId kFalse = 13;
    static constexpr TokenId kUndetermined = 14;
    static constexpr int kNumSpecial = 15;

    explicit Vocab(int pool_size);

    int size() const { return kNumSpecial + pool_size_; }
    int pool_size() const { return pool_size_; }

    std::optional<TokenId> find(std::string_view token) const;
    TokenId id(std::string_view token) const;  // throws on unknown token
    const std::string& token(TokenId id) const;

    TokenId var_id(Var v) const;
    bool is_var(TokenId id) const { return id >= kNumSpecial && id < size(); }
    Var var_of(TokenId id) const;
    TokenId truth_id(Truth t) const;

private:
    int pool_size_;
    std::vector<std::string> names_;
    std::unordered_map<std::string, TokenId> index_;
};

// Builds the vocabulary for a variable pool (pool_size >= 7).
Vocab build_vocab(int pool_size);

// Positions of the structural tokens inside an encoded context.
struct Landmarks {
    int rules_start = -1;
    int rules_end = -1;
    int facts_start = -1;
    int facts_end = -1;
    int query_start = -1;
    int query_pos = -1;  // the queried variable
    int query_end = -1;
    int answer_pos = -1;  // ANSWER, the last context position
    int context_len = 0;
};

struct TokenSeq {
    std::vector<TokenId> ids;
    Landmarks marks;

    int size() const { return static_cast<int>(ids.size()); }
    bool has_answer() const { return size() > marks.context_len; }
};

// Context ends with ANSWER. `with_answer` appends the canonical proof.
TokenSeq encode(const Problem& p, const Vocab& vocab, bool with_answer);
TokenSeq encode_with_proof(const Problem& p, const Vocab& vocab, const Proof& proof);
std::vector<TokenId> encode_words(const std::vector<std::string>& words, const Vocab& vocab);

// Number of context tokens for a chain length; identical for every problem.
int context_length(int chain_length);

std::vector<std::string> decode_words(const std::vector<TokenId>& ids, const Vocab& vocab);
std::string decode(const std::vector<TokenId>& ids, const Vocab& vocab);

}  // namespace logicirc
