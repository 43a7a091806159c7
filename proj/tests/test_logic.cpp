#include <doctest.h>

#include <regex>

#include "logicirc/logic.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

using namespace logicirc;
using namespace fixtures;

namespace {

std::string squash(const std::string& s) { return std::regex_replace(s, std::regex("\\s+"), " "); }

}  // namespace

TEST_CASE("worked example renders verbatim") {
    const auto p = worked_example();
    CHECK(squash(render_context(p)) ==
          "RULES_START K implies D. V implies E. D or E implies A. P implies T. T implies S. RULES_END "
          "FACTS_START K TRUE. V FALSE. P TRUE. FACTS_END QUERY_START A. QUERY_END ANSWER");
    CHECK(render_context(p).find("RULES_END\nFACTS_START") != std::string::npos);
    CHECK(render_proof(canonical_proof(p)) == "K TRUE. K implies D; D TRUE. D or E implies A; A TRUE.");
    CHECK(evaluate_truth(p, V('A')) == Truth::True);
}

TEST_CASE("all-false OR answer has exactly the two listed orderings") {
    const auto p = worked_example(false, false);
    std::set<std::string> got;
    for (const auto& pr : minimal_proofs(p)) got.insert(render_proof(pr));
    const std::set<std::string> want{
        "K FALSE V FALSE. K implies D; D UNDETERMINED. V implies E; E UNDETERMINED. D or E implies A; A UNDETERMINED.",
        "V FALSE K FALSE. V implies E; E UNDETERMINED. K implies D; D UNDETERMINED. D or E implies A; A UNDETERMINED."};
    CHECK(got == want);
    CHECK(evaluate_truth(p, V('A')) == Truth::Undetermined);
}

TEST_CASE("truth values of the short enumerated cases") {
    CHECK(evaluate_truth(short_example(true, false, true, Chain::LogOp), V('C')) == Truth::True);
    CHECK(evaluate_truth(short_example(false, false, true, Chain::LogOp), V('C')) == Truth::Undetermined);
    CHECK(evaluate_truth(short_example(true, false, false, Chain::Linear), V('E')) == Truth::Undetermined);
    CHECK(evaluate_truth(short_example(true, false, true, Chain::LogOp, LogOp::And), V('C')) == Truth::Undetermined);
    CHECK(evaluate_truth(short_example(true, true, true, Chain::LogOp, LogOp::And), V('C')) == Truth::True);
    CHECK_THROWS_AS(evaluate_truth(short_example(true, true, true, Chain::LogOp), V('Z')), std::invalid_argument);
}

TEST_CASE("minimal proof counts follow the connective") {
    SUBCASE("or with one true premise starts with it") {
        const auto ps = minimal_proofs(short_example(true, false, true, Chain::LogOp));
        REQUIRE(ps.size() == 1);
        CHECK(render_proof(ps[0]) == "A TRUE. A or B implies C; C TRUE.");
    }
    SUBCASE("or with two true premises has two answers") {
        CHECK(minimal_proofs(short_example(true, true, true, Chain::LogOp)).size() == 2);
    }
    SUBCASE("linear chain with a false root is undetermined") {
        const auto ps = minimal_proofs(short_example(true, false, false, Chain::Linear));
        REQUIRE(ps.size() == 1);
        CHECK(render_proof(ps[0]) == "D FALSE. D implies E; E UNDETERMINED.");
    }
    SUBCASE("and with two false premises has two answers") {
        std::set<std::string> got;
        for (const auto& pr : minimal_proofs(short_example(false, false, true, Chain::LogOp, LogOp::And)))
            got.insert(render_proof(pr));
        CHECK(got == std::set<std::string>{"A FALSE. A and B implies C; C UNDETERMINED.",
                                           "B FALSE. A and B implies C; C UNDETERMINED."});
    }
    SUBCASE("and with two true premises lists both facts") {
        std::set<std::string> got;
        for (const auto& pr : minimal_proofs(short_example(true, true, true, Chain::LogOp, LogOp::And)))
            got.insert(render_proof(pr));
        CHECK(got == std::set<std::string>{"A TRUE B TRUE. A and B implies C; C TRUE.",
                                           "B TRUE A TRUE. A and B implies C; C TRUE."});
    }
}

TEST_CASE("canonical proof picks the fact listed first") {
    auto p = short_example(true, true, true, Chain::LogOp);
    CHECK(render_proof(canonical_proof(p)) == "A TRUE. A or B implies C; C TRUE.");
    std::swap(p.facts[0], p.facts[1]);
    CHECK(render_proof(canonical_proof(p)) == "B TRUE. A or B implies C; C TRUE.");
}

TEST_CASE("verify_answer") {
    const auto p = short_example(true, false, true, Chain::LogOp);
    const auto good = verify_answer(p, split_words("A TRUE. A or B implies C; C TRUE."));
    CHECK(good.exact_match);
    CHECK(good.first_token_correct);
    CHECK(good.final_truth_correct);

    const auto wrong_first = verify_answer(p, split_words("B FALSE. A or B implies C; C TRUE."));
    CHECK_FALSE(wrong_first.exact_match);
    CHECK_FALSE(wrong_first.first_token_correct);
    CHECK(wrong_first.final_truth_correct);

    const auto alt = short_example(true, true, true, Chain::LogOp);
    CHECK(verify_answer(alt, split_words("B TRUE. A or B implies C; C TRUE.")).exact_match);

    const auto junk = verify_answer(p, split_words("A TRUE implies ; ;"));
    CHECK_FALSE(junk.exact_match);
    CHECK(junk.diagnostics.find("parse error") != std::string::npos);
    CHECK(junk.first_token_correct);
}

TEST_CASE("validate rejects malformed problems") {
    auto p = short_example(true, false, true, Chain::LogOp);
    auto bad = p;
    bad.rules[1] = unary('D', 'D');
    CHECK_THROWS_AS(validate(bad), std::invalid_argument);
    bad = p;
    bad.rules[0].op.reset();
    CHECK_THROWS_AS(validate(bad), std::invalid_argument);
    bad = p;
    bad.facts.pop_back();
    CHECK_THROWS_AS(validate(bad), std::invalid_argument);
    bad = p;
    bad.query = V('A');
    CHECK_THROWS_AS(validate(bad), std::invalid_argument);
}

TEST_CASE("sampling") {
    SUBCASE("probability one always queries the LogOp chain") {
        auto spec = SamplingSpec::training(2);
        spec.logop_query_prob = 1.0;
        CounterRng rng(3);
        for (int i = 0; i < 200; ++i) CHECK(sample_problem(rng, spec).meta.queried == Chain::LogOp);
    }
    SUBCASE("training mix queries the LogOp chain 80% of the time") {
        CounterRng rng(4);
        const auto spec = SamplingSpec::training();
        int logop = 0;
        for (int i = 0; i < 10000; ++i) logop += sample_problem(rng, spec).meta.queried == Chain::LogOp;
        CHECK(std::abs(logop / 10000.0 - 0.8) <= 0.02);
    }
    SUBCASE("deterministic") {
        CounterRng a(9, 1), b(9, 1);
        for (int i = 0; i < 50; ++i) CHECK(sample_problem(a, SamplingSpec::training()) == sample_problem(b, SamplingSpec::training()));
    }
    SUBCASE("balanced spec forces the unqueried linear root true") {
        CounterRng rng(5);
        int unqueried = 0;
        for (int i = 0; i < 2000; ++i) {
            const auto p = sample_problem(rng, SamplingSpec::balanced());
            if (p.meta.queried == Chain::LogOp) {
                ++unqueried;
                CHECK(*p.fact_value(p.linear_root()));
            }
        }
        CHECK(unqueried > 800);
    }
    SUBCASE("errors") {
        CounterRng rng(6);
        CHECK_THROWS_AS(sample_problem(rng, SamplingSpec::training(3, 7)), std::invalid_argument);
        CHECK_NOTHROW(sample_problem(rng, SamplingSpec::training(2, 5)));
        auto spec = SamplingSpec::training();
        spec.or_prob = 1.5;
        CHECK_THROWS_AS(sample_problem(rng, spec), std::invalid_argument);
    }
    SUBCASE("rule and fact order is shuffled") {
        CounterRng rng(7);
        std::set<int> logop_slots, first_fact_is_linear;
        for (int i = 0; i < 300; ++i) {
            const auto p = sample_problem(rng, SamplingSpec::training());
            logop_slots.insert(p.meta.logop_rule);
            first_fact_is_linear.insert(p.facts[0].var == p.linear_root());
        }
        CHECK(logop_slots.size() == 5);
        CHECK(first_fact_is_linear.size() == 2);
    }
}

TEST_CASE("logic core agrees with the brute-force oracles") {
    for (int len : {2, 3}) {
        CounterRng rng(100 + static_cast<std::uint64_t>(len));
        auto spec = SamplingSpec::training(len);
        spec.logop_query_prob = 0.5;
        for (int i = 0; i < 2000; ++i) {
            const auto p = sample_problem(rng, spec);
            validate(p);
            const auto truth = oracle::propagate(p);
            for (Var v : p.variables()) CHECK(evaluate_truth(p, v) == truth.at(v));
            const auto proofs = minimal_proofs(p);
            CHECK(oracle::same_proof_set(proofs, oracle::minimal_proofs(p)));
            for (const auto& pr : proofs) {
                CHECK(verify_answer(p, pr).exact_match);
                CHECK(verify_answer(p, split_words(render_proof(pr))).exact_match);
                CHECK(pr.final_truth() == truth.at(p.query));
            }
        }
    }
}

TEST_CASE("query flip changes the first proof token") {
    // The two chains never share a variable, so their proofs start differently.
    CounterRng rng(11);
    for (int i = 0; i < 500; ++i) {
        auto p = sample_problem(rng, SamplingSpec::training());
        const auto a = canonical_proof(p).first_variable();
        p.meta.queried = p.meta.queried == Chain::LogOp ? Chain::Linear : Chain::LogOp;
        p.query = p.meta.queried == Chain::LogOp ? p.logop_conclusion() : p.linear_conclusion();
        validate(p);
        CHECK(canonical_proof(p).first_variable() != a);
    }
}

TEST_CASE("text round trip") {
    CounterRng rng(12);
    for (int i = 0; i < 200; ++i) {
        const auto p = sample_problem(rng, SamplingSpec::training());
        CHECK(split_words(render_context(p)) == context_words(p));
        CHECK(join_words(context_words(p)) == render_context(p));
        const auto parsed = parse_proof(p, split_words(render_proof(canonical_proof(p))));
        REQUIRE(parsed.proof);
        CHECK(*parsed.proof == canonical_proof(p));
    }
    CHECK(var_name(Var{0}) == "A");
    CHECK(var_name(Var{27}) == "B1");
}

TEST_CASE("signature ignores presentation order only") {
    auto p = worked_example();
    auto q = p;
    std::swap(q.rules[0], q.rules[3]);
    q.meta.logop_hops[0] = 3;
    q.meta.linear_rules[0] = 0;
    std::swap(q.facts[0], q.facts[2]);
    validate(q);
    CHECK(signature(p) == signature(q));
    CHECK(signature(p) != signature(worked_example(false)));
}
