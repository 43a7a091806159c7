#pragma once

// Two-chain propositional logic problems: one chain ends in a rule with a
// binary connective ("D or E implies A"), the other is a plain implication
// chain ("P implies T. T implies S."). A problem asks for the truth value of
// one chain's conclusion; the expected answer is a minimal proof.

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "logicirc/rng.hpp"

namespace logicirc {

struct Var {
    std::uint16_t id = 0;
    auto operator<=>(const Var&) const = default;
};

enum class LogOp : std::uint8_t { And, Or };
enum class Truth : std::uint8_t { True, False, Undetermined };
enum class Chain : std::uint8_t { LogOp, Linear };

std::string_view to_string(LogOp op);
std::string_view to_string(Truth t);
std::string_view to_string(Chain c);

// Printable name of a pool variable: A..Z, then A1..Z1, A2.. and so on.
std::string var_name(Var v);

struct Rule {
    std::vector<Var> premises;  // one or two
    std::optional<LogOp> op;    // present iff two premises
    Var conclusion;

    bool operator==(const Rule&) const = default;
};

struct Fact {
    Var var;
    bool value = false;
    bool operator==(const Fact&) const = default;
};

// Where each chain lives inside Problem::rules. Indices refer to the
// presentation order.
struct ChainMeta {
    int chain_length = 3;
    Chain queried = Chain::LogOp;
    int logop_rule = -1;
    // logop_hops[i] derives premise i of the LogOp rule from its root.
    // Empty at chain length 2, where the premises are the roots.
    std::vector<int> logop_hops;
    // Linear-chain rules from root to conclusion.
    std::vector<int> linear_rules;

    bool operator==(const ChainMeta&) const = default;
};

struct Problem {
    std::vector<Rule> rules;
    std::vector<Fact> facts;
    Var query;
    ChainMeta meta;

    bool operator==(const Problem&) const = default;

    const Rule& logop_rule() const { return rules.at(meta.logop_rule); }
    LogOp logop() const { return *logop_rule().op; }
    // Roots feeding the LogOp rule, in premise order.
    std::vector<Var> logop_roots() const;
    Var linear_root() const;
    Var logop_conclusion() const { return logop_rule().conclusion; }
    Var linear_conclusion() const;
    std::optional<bool> fact_value(Var v) const;
    // Every variable in the problem, in order of first appearance in rules.
    std::vector<Var> variables() const;
};

// Throws std::invalid_argument naming the violated invariant.
void validate(const Problem& p);

// Number of distinct variables one problem uses.
int variables_needed(int chain_length);

struct SamplingSpec {
    int chain_length = 3;
    int pool_size = 80;
    double logop_query_prob = 0.8;
    double true_prob = 0.5;  // per fact
    double or_prob = 0.5;    // P(connective is "or")
    bool force_linear_root_true_when_unqueried = false;

    // Training mix: LogOp chain queried 80% of the time.
    static SamplingSpec training(int chain_length = 3, int pool_size = 80);
    // Evaluation balance: both chains equally likely, unqueried linear root
    // always true.
    static SamplingSpec balanced(int chain_length = 3, int pool_size = 80);
};

Problem sample_problem(CounterRng& rng, const SamplingSpec& spec);

Truth evaluate_truth(const Problem& p, Var v);

struct FactStep {
    Var var;
    Truth value = Truth::True;
    bool operator==(const FactStep&) const = default;
};
struct RuleStep {
    Rule rule;
    bool operator==(const RuleStep&) const = default;
};
struct ConclusionStep {
    Var var;
    Truth value = Truth::True;
    bool operator==(const ConclusionStep&) const = default;
};
using ProofStep = std::variant<FactStep, RuleStep, ConclusionStep>;

struct Proof {
    std::vector<ProofStep> steps;
    bool operator==(const Proof&) const = default;

    std::optional<Var> first_variable() const;
    std::optional<Truth> final_truth() const;
};

// All answers accepted as correct. One proof in unambiguous cases, two when
// either LogOp premise may come first (or both premises are needed and may be
// listed in either order).
std::vector<Proof> minimal_proofs(const Problem& p);

// Training target: among minimal_proofs, the one whose first variable comes
// earliest in the Facts section.
Proof canonical_proof(const Problem& p);

struct VerifyResult {
    bool exact_match = false;
    bool first_token_correct = false;
    bool final_truth_correct = false;
    std::string diagnostics;
};

VerifyResult verify_answer(const Problem& p, const Proof& candidate);
// Parses whitespace/punctuation-separated words, e.g. from a model's output.
VerifyResult verify_answer(const Problem& p, const std::vector<std::string>& words);

struct ProofParse {
    std::optional<Proof> proof;
    std::string error;
};
ProofParse parse_proof(const Problem& p, const std::vector<std::string>& words);

// Canonical text layout:
//   RULES_START K implies D. ... RULES_END
//   FACTS_START K TRUE. ... FACTS_END
//   QUERY_START A. QUERY_END
//   ANSWER
std::string render_context(const Problem& p);
std::string render_proof(const Proof& proof);
std::string render_rule(const Rule& r);

// Word sequences (one entry per vocabulary token) behind the text above.
std::vector<std::string> context_words(const Problem& p);
std::vector<std::string> proof_words(const Proof& proof);
// Joins words, attaching "." and ";" to the preceding word and breaking
// lines after section terminators.
std::string join_words(const std::vector<std::string>& words);
// Inverse of join_words.
std::vector<std::string> split_words(std::string_view text);

// Presentation-order-invariant identity of a problem: rules and facts are
// sorted before hashing, so two problems that differ only in how they are
// shuffled collide.
std::uint64_t signature(const Problem& p);

}  // namespace logicirc
