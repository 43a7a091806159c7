#include "logicirc/logic.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <set>
#include <stdexcept>

namespace logicirc {

std::string_view to_string(LogOp op) { return op == LogOp::And ? "and" : "or"; }

std::string_view to_string(Truth t) {
    switch (t) {
        case Truth::True: return "TRUE";
        case Truth::False: return "FALSE";
        case Truth::Undetermined: return "UNDETERMINED";
    }
    return "?";
}

std::string_view to_string(Chain c) { return c == Chain::LogOp ? "logop" : "linear"; }

std::string var_name(Var v) {
    std::string s(1, static_cast<char>('A' + v.id % 26));
    if (v.id >= 26) s += std::to_string(v.id / 26);
    return s;
}

namespace {

std::optional<Var> parse_var_name(std::string_view w) {
    if (w.empty() || w[0] < 'A' || w[0] > 'Z') return std::nullopt;
    unsigned block = 0;
    if (w.size() > 1) {
        if (w[1] == '0') return std::nullopt;
        for (char c : w.substr(1)) {
            if (c < '0' || c > '9') return std::nullopt;
            block = block * 10 + static_cast<unsigned>(c - '0');
            if (block > 2000) return std::nullopt;
        }
    }
    return Var{static_cast<std::uint16_t>(block * 26 + static_cast<unsigned>(w[0] - 'A'))};
}

std::optional<Truth> parse_truth(std::string_view w) {
    if (w == "TRUE") return Truth::True;
    if (w == "FALSE") return Truth::False;
    if (w == "UNDETERMINED") return Truth::Undetermined;
    return std::nullopt;
}

Truth from_bool(bool b) { return b ? Truth::True : Truth::False; }

bool is_terminator(std::string_view w) {
    return w == "RULES_END" || w == "FACTS_END" || w == "QUERY_END";
}

}  // namespace

std::vector<Var> Problem::logop_roots() const {
    const Rule& lr = logop_rule();
    if (meta.chain_length == 2) return lr.premises;
    std::vector<Var> roots;
    for (int h : meta.logop_hops) roots.push_back(rules.at(h).premises.at(0));
    return roots;
}

Var Problem::linear_root() const { return rules.at(meta.linear_rules.front()).premises.at(0); }

Var Problem::linear_conclusion() const { return rules.at(meta.linear_rules.back()).conclusion; }

std::optional<bool> Problem::fact_value(Var v) const {
    for (const auto& f : facts)
        if (f.var == v) return f.value;
    return std::nullopt;
}

std::vector<Var> Problem::variables() const {
    std::vector<Var> out;
    auto add = [&](Var v) {
        if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    };
    for (const auto& r : rules) {
        for (Var v : r.premises) add(v);
        add(r.conclusion);
    }
    return out;
}

int variables_needed(int chain_length) {
    if (chain_length == 2) return 5;
    if (chain_length == 3) return 8;
    throw std::invalid_argument("chain_length must be 2 or 3, got " + std::to_string(chain_length));
}

void validate(const Problem& p) {
    auto fail = [](const std::string& what) { throw std::invalid_argument("invalid problem: " + what); };
    const int len = p.meta.chain_length;
    if (len != 2 && len != 3) fail("chain length " + std::to_string(len));
    const std::size_t expected_rules = len == 2 ? 2 : 5;
    if (p.rules.size() != expected_rules) fail("expected " + std::to_string(expected_rules) + " rules");
    for (const auto& r : p.rules) {
        if (r.premises.empty() || r.premises.size() > 2) fail("rule must have 1 or 2 premises");
        if (r.op.has_value() != (r.premises.size() == 2)) fail("connective present iff two premises");
        if (std::find(r.premises.begin(), r.premises.end(), r.conclusion) != r.premises.end())
            fail("conclusion among premises");
    }
    const auto vars = p.variables();
    if (static_cast<int>(vars.size()) != variables_needed(len)) fail("variables not distinct");

    const auto n = static_cast<int>(p.rules.size());
    auto in_range = [&](int i) { return i >= 0 && i < n; };
    if (!in_range(p.meta.logop_rule) || !p.rules[p.meta.logop_rule].op) fail("bad LogOp rule index");
    const std::size_t hops = len == 3 ? 2 : 0;
    if (p.meta.logop_hops.size() != hops) fail("wrong number of LogOp hops");
    const Rule& lr = p.rules[p.meta.logop_rule];
    for (std::size_t i = 0; i < hops; ++i) {
        const int h = p.meta.logop_hops[i];
        if (!in_range(h) || p.rules[h].premises.size() != 1 || p.rules[h].conclusion != lr.premises[i])
            fail("LogOp hop does not feed its premise");
    }
    if (p.meta.linear_rules.size() != static_cast<std::size_t>(len - 1)) fail("wrong linear chain length");
    for (std::size_t i = 0; i < p.meta.linear_rules.size(); ++i) {
        const int r = p.meta.linear_rules[i];
        if (!in_range(r) || p.rules[r].premises.size() != 1) fail("bad linear rule");
        if (i > 0 && p.rules[p.meta.linear_rules[i - 1]].conclusion != p.rules[r].premises[0])
            fail("linear chain is not connected");
    }
    std::set<int> used{p.meta.logop_rule};
    used.insert(p.meta.logop_hops.begin(), p.meta.logop_hops.end());
    used.insert(p.meta.linear_rules.begin(), p.meta.linear_rules.end());
    if (used.size() != p.rules.size()) fail("chain metadata does not cover every rule exactly once");

    auto roots = p.logop_roots();
    roots.push_back(p.linear_root());
    if (p.facts.size() != roots.size()) fail("facts must cover exactly the roots");
    for (Var r : roots)
        if (!p.fact_value(r)) fail("missing fact for root " + var_name(r));

    const Var expected_query = p.meta.queried == Chain::LogOp ? p.logop_conclusion() : p.linear_conclusion();
    if (p.query != expected_query) fail("query is not the queried chain's conclusion");
}

SamplingSpec SamplingSpec::training(int chain_length, int pool_size) {
    SamplingSpec s;
    s.chain_length = chain_length;
    s.pool_size = pool_size;
    return s;
}

SamplingSpec SamplingSpec::balanced(int chain_length, int pool_size) {
    SamplingSpec s = training(chain_length, pool_size);
    s.logop_query_prob = 0.5;
    s.force_linear_root_true_when_unqueried = true;
    return s;
}

Problem sample_problem(CounterRng& rng, const SamplingSpec& spec) {
    const int need = variables_needed(spec.chain_length);
    if (spec.pool_size < need)
        throw std::invalid_argument("pool of " + std::to_string(spec.pool_size) + " variables is too small; chain length " +
                                    std::to_string(spec.chain_length) + " needs " + std::to_string(need));
    for (double pr : {spec.logop_query_prob, spec.true_prob, spec.or_prob})
        if (!(pr >= 0.0 && pr <= 1.0)) throw std::invalid_argument("probabilities must lie in [0, 1]");

    // Partial Fisher-Yates over the pool: the first `need` entries are a
    // uniform draw without replacement.
    std::vector<std::uint16_t> pool(static_cast<std::size_t>(spec.pool_size));
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<std::uint16_t>(i);
    for (int i = 0; i < need; ++i) {
        const auto j = static_cast<std::size_t>(i) + rng.uniform_below(pool.size() - static_cast<std::size_t>(i));
        std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    }
    auto v = [&](int i) { return Var{pool[static_cast<std::size_t>(i)]}; };

    const LogOp op = rng.bernoulli(spec.or_prob) ? LogOp::Or : LogOp::And;
    const Chain queried = rng.bernoulli(spec.logop_query_prob) ? Chain::LogOp : Chain::Linear;

    // Rules in construction order; role[i] records what rule i is.
    enum Role { Hop0, Hop1, LogOpRule, Lin0, Lin1 };
    std::vector<Rule> rules;
    std::vector<Role> roles;
    std::array<Var, 3> roots{};
    if (spec.chain_length == 3) {
        roots = {v(0), v(1), v(5)};
        rules.push_back({{v(0)}, std::nullopt, v(2)});
        rules.push_back({{v(1)}, std::nullopt, v(3)});
        rules.push_back({{v(2), v(3)}, op, v(4)});
        rules.push_back({{v(5)}, std::nullopt, v(6)});
        rules.push_back({{v(6)}, std::nullopt, v(7)});
        roles = {Hop0, Hop1, LogOpRule, Lin0, Lin1};
    } else {
        roots = {v(0), v(1), v(3)};
        rules.push_back({{v(0), v(1)}, op, v(2)});
        rules.push_back({{v(3)}, std::nullopt, v(4)});
        roles = {LogOpRule, Lin0};
    }

    std::array<bool, 3> values{};
    for (auto& b : values) b = rng.bernoulli(spec.true_prob);
    if (spec.force_linear_root_true_when_unqueried && queried == Chain::LogOp) values[2] = true;

    std::vector<std::size_t> order(rules.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));

    Problem p;
    p.meta.chain_length = spec.chain_length;
    p.meta.queried = queried;
    p.meta.logop_hops.assign(spec.chain_length == 3 ? 2 : 0, -1);
    p.meta.linear_rules.assign(static_cast<std::size_t>(spec.chain_length - 1), -1);
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        const std::size_t src = order[pos];
        p.rules.push_back(rules[src]);
        const int idx = static_cast<int>(pos);
        switch (roles[src]) {
            case Hop0: p.meta.logop_hops[0] = idx; break;
            case Hop1: p.meta.logop_hops[1] = idx; break;
            case LogOpRule: p.meta.logop_rule = idx; break;
            case Lin0: p.meta.linear_rules[0] = idx; break;
            case Lin1: p.meta.linear_rules[1] = idx; break;
        }
    }

    for (int i = 0; i < 3; ++i) p.facts.push_back({roots[static_cast<std::size_t>(i)], values[static_cast<std::size_t>(i)]});
    rng.shuffle(std::span<Fact>(p.facts));

    p.query = queried == Chain::LogOp ? p.logop_conclusion() : p.linear_conclusion();
    return p;
}

Truth evaluate_truth(const Problem& p, Var v) {
    if (auto f = p.fact_value(v)) return from_bool(*f);
    const Rule* rule = nullptr;
    for (const auto& r : p.rules)
        if (r.conclusion == v) rule = &r;
    if (!rule) throw std::invalid_argument("variable " + var_name(v) + " does not occur in the problem");

    // Nothing is ever derived false: a rule either establishes its conclusion
    // or leaves it undetermined.
    bool fires;
    if (!rule->op || *rule->op == LogOp::And) {
        fires = std::all_of(rule->premises.begin(), rule->premises.end(),
                            [&](Var q) { return evaluate_truth(p, q) == Truth::True; });
    } else {
        fires = std::any_of(rule->premises.begin(), rule->premises.end(),
                            [&](Var q) { return evaluate_truth(p, q) == Truth::True; });
    }
    return fires ? Truth::True : Truth::Undetermined;
}

std::optional<Var> Proof::first_variable() const {
    if (steps.empty()) return std::nullopt;
    return std::visit(
        [](const auto& s) -> std::optional<Var> {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, RuleStep>)
                return s.rule.premises.empty() ? std::nullopt : std::optional<Var>(s.rule.premises.front());
            else
                return s.var;
        },
        steps.front());
}

std::optional<Truth> Proof::final_truth() const {
    if (steps.empty()) return std::nullopt;
    if (const auto* c = std::get_if<ConclusionStep>(&steps.back())) return c->value;
    return std::nullopt;
}

std::vector<Proof> minimal_proofs(const Problem& p) {
    auto derived = [](bool root_true) { return root_true ? Truth::True : Truth::Undetermined; };

    if (p.meta.queried == Chain::Linear) {
        const Var root = p.linear_root();
        const bool value = *p.fact_value(root);
        Proof proof;
        proof.steps.emplace_back(FactStep{root, from_bool(value)});
        for (int r : p.meta.linear_rules) {
            proof.steps.emplace_back(RuleStep{p.rules[r]});
            proof.steps.emplace_back(ConclusionStep{p.rules[r].conclusion, derived(value)});
        }
        return {proof};
    }

    const auto roots = p.logop_roots();
    const std::array<bool, 2> value{*p.fact_value(roots[0]), *p.fact_value(roots[1])};
    const Rule& final_rule = p.logop_rule();

    auto hop = [&](std::size_t i, Proof& proof) {
        if (p.meta.chain_length != 3) return;
        const Rule& r = p.rules[p.meta.logop_hops[i]];
        proof.steps.emplace_back(RuleStep{r});
        proof.steps.emplace_back(ConclusionStep{r.conclusion, derived(value[i])});
    };
    auto finish = [&](Proof& proof, Truth t) {
        proof.steps.emplace_back(RuleStep{final_rule});
        proof.steps.emplace_back(ConclusionStep{final_rule.conclusion, t});
    };
    // One premise settles the connective.
    auto single = [&](std::size_t i) {
        Proof proof;
        proof.steps.emplace_back(FactStep{roots[i], from_bool(value[i])});
        hop(i, proof);
        finish(proof, derived(value[i]));
        return proof;
    };
    // Both premises are needed; facts first, then hops in the same order.
    auto both = [&](std::size_t first, std::size_t second, Truth t) {
        Proof proof;
        proof.steps.emplace_back(FactStep{roots[first], from_bool(value[first])});
        proof.steps.emplace_back(FactStep{roots[second], from_bool(value[second])});
        hop(first, proof);
        hop(second, proof);
        finish(proof, t);
        return proof;
    };

    // "or" is decided by any true root, "and" by any false one.
    const bool decisive = p.logop() == LogOp::Or;
    std::vector<Proof> out;
    for (std::size_t i = 0; i < 2; ++i)
        if (value[i] == decisive) out.push_back(single(i));
    if (out.empty()) {
        const Truth t = decisive ? Truth::Undetermined : Truth::True;
        out.push_back(both(0, 1, t));
        out.push_back(both(1, 0, t));
    }
    return out;
}

Proof canonical_proof(const Problem& p) {
    auto proofs = minimal_proofs(p);
    auto fact_pos = [&](const Proof& pr) {
        const Var v = *pr.first_variable();
        for (std::size_t i = 0; i < p.facts.size(); ++i)
            if (p.facts[i].var == v) return i;
        return p.facts.size();
    };
    return *std::min_element(proofs.begin(), proofs.end(),
                             [&](const Proof& a, const Proof& b) { return fact_pos(a) < fact_pos(b); });
}

VerifyResult verify_answer(const Problem& p, const Proof& candidate) {
    VerifyResult res;
    const auto proofs = minimal_proofs(p);
    res.exact_match = std::find(proofs.begin(), proofs.end(), candidate) != proofs.end();
    const auto first = candidate.first_variable();
    res.first_token_correct =
        first && std::any_of(proofs.begin(), proofs.end(), [&](const Proof& pr) { return pr.first_variable() == first; });
    if (!candidate.steps.empty()) {
        if (const auto* c = std::get_if<ConclusionStep>(&candidate.steps.back()))
            res.final_truth_correct = c->var == p.query && c->value == evaluate_truth(p, p.query);
    }
    if (!res.exact_match) res.diagnostics = "not a minimal proof";
    return res;
}

VerifyResult verify_answer(const Problem& p, const std::vector<std::string>& words) {
    auto parsed = parse_proof(p, words);
    if (!parsed.proof) {
        VerifyResult res;
        res.diagnostics = "parse error: " + parsed.error;
        // The first word alone still identifies the first invoked variable.
        if (!words.empty()) {
            if (auto v = parse_var_name(words.front())) {
                for (const auto& pr : minimal_proofs(p))
                    if (pr.first_variable() == v) res.first_token_correct = true;
            }
        }
        return res;
    }
    return verify_answer(p, *parsed.proof);
}

ProofParse parse_proof(const Problem&, const std::vector<std::string>& words) {
    ProofParse out;
    Proof proof;
    std::size_t i = 0;
    auto at = [&](std::size_t k) -> std::string_view { return k < words.size() ? std::string_view(words[k]) : ""; };
    auto error = [&](const std::string& what) {
        out.error = what + " at word " + std::to_string(i);
        return out;
    };
    auto expect_var = [&]() -> std::optional<Var> {
        auto v = parse_var_name(at(i));
        if (v) ++i;
        return v;
    };

    if (words.empty()) return error("empty answer");
    while (i < words.size()) {
        const auto v0 = parse_var_name(at(i));
        if (!v0) return error("expected a variable");
        const std::string_view next = at(i + 1);
        if (parse_truth(next)) {
            // Group of fact invocations terminated by ".".
            while (parse_var_name(at(i)) && parse_truth(at(i + 1))) {
                proof.steps.emplace_back(FactStep{*parse_var_name(at(i)), *parse_truth(at(i + 1))});
                i += 2;
            }
            if (at(i) != ".") return error("expected '.' after facts");
            ++i;
            continue;
        }
        Rule rule;
        rule.premises.push_back(*expect_var());
        if (at(i) == "and" || at(i) == "or") {
            rule.op = at(i) == "and" ? LogOp::And : LogOp::Or;
            ++i;
            auto v1 = expect_var();
            if (!v1) return error("expected second premise");
            rule.premises.push_back(*v1);
        }
        if (at(i) != "implies") return error("expected 'implies'");
        ++i;
        auto c = expect_var();
        if (!c) return error("expected conclusion variable");
        rule.conclusion = *c;
        if (at(i) != ";") return error("expected ';' after rule");
        ++i;
        proof.steps.emplace_back(RuleStep{rule});
        auto cv = expect_var();
        if (!cv) return error("expected concluded variable");
        auto t = parse_truth(at(i));
        if (!t) return error("expected truth value");
        ++i;
        if (at(i) != ".") return error("expected '.' after conclusion");
        ++i;
        proof.steps.emplace_back(ConclusionStep{*cv, *t});
    }
    out.proof = std::move(proof);
    return out;
}

namespace {

void append_rule_words(const Rule& r, std::vector<std::string>& out) {
    out.push_back(var_name(r.premises.at(0)));
    if (r.op) {
        out.emplace_back(to_string(*r.op));
        out.push_back(var_name(r.premises.at(1)));
    }
    out.emplace_back("implies");
    out.push_back(var_name(r.conclusion));
}

}  // namespace

std::vector<std::string> context_words(const Problem& p) {
    std::vector<std::string> w{"RULES_START"};
    for (const auto& r : p.rules) {
        append_rule_words(r, w);
        w.emplace_back(".");
    }
    w.emplace_back("RULES_END");
    w.emplace_back("FACTS_START");
    for (const auto& f : p.facts) {
        w.push_back(var_name(f.var));
        w.emplace_back(to_string(from_bool(f.value)));
        w.emplace_back(".");
    }
    w.emplace_back("FACTS_END");
    w.emplace_back("QUERY_START");
    w.push_back(var_name(p.query));
    w.emplace_back(".");
    w.emplace_back("QUERY_END");
    w.emplace_back("ANSWER");
    return w;
}

std::vector<std::string> proof_words(const Proof& proof) {
    std::vector<std::string> w;
    for (std::size_t i = 0; i < proof.steps.size(); ++i) {
        const auto& step = proof.steps[i];
        if (const auto* f = std::get_if<FactStep>(&step)) {
            w.push_back(var_name(f->var));
            w.emplace_back(to_string(f->value));
            const bool group_continues = i + 1 < proof.steps.size() && std::holds_alternative<FactStep>(proof.steps[i + 1]);
            if (!group_continues) w.emplace_back(".");
        } else if (const auto* r = std::get_if<RuleStep>(&step)) {
            append_rule_words(r->rule, w);
            w.emplace_back(";");
        } else {
            const auto& c = std::get<ConclusionStep>(step);
            w.push_back(var_name(c.var));
            w.emplace_back(to_string(c.value));
            w.emplace_back(".");
        }
    }
    return w;
}

std::string join_words(const std::vector<std::string>& words) {
    std::string s;
    for (const auto& w : words) {
        if (w == "." || w == ";") {
            s += w;
        } else {
            if (!s.empty() && s.back() != '\n') s += ' ';
            s += w;
        }
        if (is_terminator(w)) s += '\n';
    }
    return s;
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (char c : text) {
        if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
            flush();
        } else if (c == '.' || c == ';') {
            flush();
            out.emplace_back(1, c);
        } else {
            cur += c;
        }
    }
    flush();
    return out;
}

std::string render_context(const Problem& p) { return join_words(context_words(p)); }
std::string render_proof(const Proof& proof) { return join_words(proof_words(proof)); }

std::string render_rule(const Rule& r) {
    std::vector<std::string> w;
    append_rule_words(r, w);
    return join_words(w);
}

std::uint64_t signature(const Problem& p) {
    std::vector<std::string> rules;
    for (const auto& r : p.rules) rules.push_back(render_rule(r));
    std::sort(rules.begin(), rules.end());
    std::vector<std::string> facts;
    for (const auto& f : p.facts) facts.push_back(var_name(f.var) + (f.value ? "1" : "0"));
    std::sort(facts.begin(), facts.end());

    std::string key;
    for (const auto& r : rules) key += r + "|";
    key += "#";
    for (const auto& f : facts) key += f + "|";
    key += "?" + var_name(p.query);

    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : key) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace logicirc
