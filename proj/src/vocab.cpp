#include "logicirc/vocab.hpp"

#include <stdexcept>

namespace logicirc {

Vocab::Vocab(int pool_size) : pool_size_(pool_size) {
    if (pool_size < 7) throw std::invalid_argument("pool_size must be at least 7, got " + std::to_string(pool_size));
    names_ = {"RULES_START", "RULES_END", "FACTS_START", "FACTS_END", "QUERY_START", "QUERY_END", "ANSWER", ".",
              ";",           "implies",   "and",         "or",        "TRUE",        "FALSE",     "UNDETERMINED"};
    for (int i = 0; i < pool_size; ++i) names_.push_back(var_name(Var{static_cast<std::uint16_t>(i)}));
    for (std::size_t i = 0; i < names_.size(); ++i) index_.emplace(names_[i], static_cast<TokenId>(i));
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

TokenId Vocab::id(std::string_view token) const {
    if (auto i = find(token)) return *i;
    throw std::invalid_argument("unknown token '" + std::string(token) + "'");
}

const std::string& Vocab::token(TokenId id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " out of range");
    return names_[static_cast<std::size_t>(id)];
}

TokenId Vocab::var_id(Var v) const {
    if (v.id >= pool_size_) throw std::out_of_range("variable " + std::to_string(v.id) + " outside the pool");
    return kNumSpecial + v.id;
}

Var Vocab::var_of(TokenId id) const {
    if (!is_var(id)) throw std::invalid_argument("token " + std::to_string(id) + " is not a variable");
    return Var{static_cast<std::uint16_t>(id - kNumSpecial)};
}

TokenId Vocab::truth_id(Truth t) const {
    switch (t) {
        case Truth::True: return kTrue;
        case Truth::False: return kFalse;
        case Truth::Undetermined: return kUndetermined;
    }
    return kUndetermined;
}

Vocab build_vocab(int pool_size) { return Vocab(pool_size); }

std::vector<TokenId> encode_words(const std::vector<std::string>& words, const Vocab& vocab) {
    std::vector<TokenId> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(vocab.id(w));
    return ids;
}

namespace {

Landmarks find_landmarks(const std::vector<TokenId>& ids) {
    Landmarks m;
    for (int i = 0; i < static_cast<int>(ids.size()); ++i) {
        switch (ids[static_cast<std::size_t>(i)]) {
            case Vocab::kRulesStart: m.rules_start = i; break;
            case Vocab::kRulesEnd: m.rules_end = i; break;
            case Vocab::kFactsStart: m.facts_start = i; break;
            case Vocab::kFactsEnd: m.facts_end = i; break;
            case Vocab::kQueryStart:
                m.query_start = i;
                m.query_pos = i + 1;
                break;
            case Vocab::kQueryEnd: m.query_end = i; break;
            case Vocab::kAnswer:
                m.answer_pos = i;
                m.context_len = i + 1;
                break;
            default: break;
        }
    }
    return m;
}

}  // namespace

TokenSeq encode_with_proof(const Problem& p, const Vocab& vocab, const Proof& proof) {
    TokenSeq seq;
    seq.ids = encode_words(context_words(p), vocab);
    seq.marks = find_landmarks(seq.ids);
    const auto answer = encode_words(proof_words(proof), vocab);
    seq.ids.insert(seq.ids.end(), answer.begin(), answer.end());
    return seq;
}

TokenSeq encode(const Problem& p, const Vocab& vocab, bool with_answer) {
    if (with_answer) return encode_with_proof(p, vocab, canonical_proof(p));
    TokenSeq seq;
    seq.ids = encode_words(context_words(p), vocab);
    seq.marks = find_landmarks(seq.ids);
    return seq;
}

int context_length(int chain_length) {
    // Rules: markers + 4 tokens per unary rule + 6 for the LogOp rule.
    // Facts: markers + 3 tokens each. Query: 4 tokens. Then ANSWER.
    const int unary = chain_length == 2 ? 1 : 4;
    return (2 + 4 * unary + 6) + (2 + 3 * 3) + 4 + 1;
}

std::vector<std::string> decode_words(const std::vector<TokenId>& ids, const Vocab& vocab) {
    std::vector<std::string> w;
    w.reserve(ids.size());
    for (TokenId id : ids) w.push_back(vocab.token(id));
    return w;
}

std::string decode(const std::vector<TokenId>& ids, const Vocab& vocab) { return join_words(decode_words(ids, vocab)); }

}  // namespace logicirc
