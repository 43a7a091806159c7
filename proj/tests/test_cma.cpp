#include <doctest.h>

#include <cmath>
#include <cstdlib>

#include "fixtures.hpp"
#include "logicirc/cma.hpp"

using namespace logicirc;
using namespace fixtures;

namespace {

const Vocab kVocab(80);

std::vector<int> differing_positions(const TokenSeq& a, const TokenSeq& b) {
    std::vector<int> d;
    for (int i = 0; i < a.size(); ++i)
        if (a.ids[static_cast<std::size_t>(i)] != b.ids[static_cast<std::size_t>(i)]) d.push_back(i);
    return d;
}

std::vector<PromptPair> some_pairs(CounterfactualKind kind, std::size_t n, std::uint64_t seed) {
    CounterRng rng(seed);
    return sample_pairs(kind, n, SamplingSpec::balanced(3), rng, kVocab);
}

// A random model has no reason to prefer either answer. Swap the labels of
// pairs where it prefers y_orig on the alt prompt less than on the orig one,
// so that calibrated scores are defined.
std::vector<PromptPair> oriented(const Params& params, std::vector<PromptPair> pairs) {
    for (auto& pr : pairs) {
        const Mat o = forward<float>(params, pr.orig.ids).logits;
        const Mat a = forward<float>(params, pr.alt.ids).logits;
        const int p = pr.orig.marks.answer_pos;
        const double d_orig = double(o(p, pr.y_alt)) - double(o(p, pr.y_orig));
        const double d_alt = double(a(p, pr.y_alt)) - double(a(p, pr.y_orig));
        if (d_alt < d_orig) std::swap(pr.y_orig, pr.y_alt);
    }
    return pairs;
}

bool bit_equal(const Mat& a, const Mat& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0;
}

}  // namespace

TEST_CASE("query flip of the worked example") {
    const auto pr = make_pair(worked_example(), CounterfactualKind::QueryFlip, kVocab);
    CHECK(pr.y_orig == kVocab.var_id(V('K')));
    CHECK(pr.y_alt == kVocab.var_id(V('P')));
    CHECK(differing_positions(pr.orig, pr.alt) == std::vector<int>{pr.orig.marks.query_pos});
    CHECK(pr.alt_problem.query == V('S'));
}

TEST_CASE("fact flip moves the answer to the other root") {
    const auto pr = make_pair(worked_example(true, false), CounterfactualKind::FactFlip, kVocab);
    CHECK(pr.y_orig == kVocab.var_id(V('K')));
    CHECK(pr.y_alt == kVocab.var_id(V('V')));
    CHECK(pr.alt_problem.fact_value(V('K')) == false);
    CHECK(pr.alt_problem.fact_value(V('V')) == true);
    CHECK(differing_positions(pr.orig, pr.alt).size() == 2);
    CHECK_THROWS_AS(make_pair(worked_example(true, true), CounterfactualKind::FactFlip, kVocab),
                    std::invalid_argument);
    auto linear = worked_example();
    linear.query = V('S');
    linear.meta.queried = Chain::Linear;
    CHECK_THROWS_AS(make_pair(linear, CounterfactualKind::LogOpFlip, kVocab), std::invalid_argument);
}

TEST_CASE("logop flip changes only the connective") {
    const auto pr = make_pair(worked_example(true, false), CounterfactualKind::LogOpFlip, kVocab);
    const auto d = differing_positions(pr.orig, pr.alt);
    REQUIRE(d.size() == 1);
    CHECK(pr.alt.ids[static_cast<std::size_t>(d[0])] == Vocab::kAnd);
    CHECK(pr.y_orig == kVocab.var_id(V('K')));  // K TRUE makes the OR true
    CHECK(pr.y_alt == kVocab.var_id(V('V')));   // V FALSE makes the AND false
}

TEST_CASE("rule location swap keeps the answer") {
    const auto pr = make_pair(worked_example(), CounterfactualKind::RuleLocationSwap, kVocab);
    CHECK(pr.y_orig == pr.y_alt);
    CHECK(render_context(pr.alt_problem).find("T implies S. V implies E") == std::string::npos);
    CHECK(pr.alt_problem.rules[4] == pr.orig_problem.rules[2]);
    CHECK(pr.alt_problem.rules[2] == pr.orig_problem.rules[4]);
    CHECK(canonical_proof(pr.alt_problem) == canonical_proof(pr.orig_problem));
}

TEST_CASE("every kind edits only what it is allowed to") {
    for (auto kind : {CounterfactualKind::QueryFlip, CounterfactualKind::RuleLocationSwap,
                      CounterfactualKind::FactFlip, CounterfactualKind::LogOpFlip}) {
        for (const auto& pr : some_pairs(kind, 300, 17)) {
            const auto d = differing_positions(pr.orig, pr.alt);
            const auto& m = pr.orig.marks;
            switch (kind) {
                case CounterfactualKind::QueryFlip: CHECK(d == std::vector<int>{m.query_pos}); break;
                case CounterfactualKind::RuleLocationSwap:
                    for (int p : d) CHECK((p > m.rules_start && p < m.rules_end));
                    CHECK(pr.y_orig == pr.y_alt);
                    break;
                case CounterfactualKind::FactFlip:
                    CHECK(d.size() == 2);
                    for (int p : d) CHECK((p > m.facts_start && p < m.facts_end));
                    break;
                case CounterfactualKind::LogOpFlip: CHECK(d.size() == 1); break;
            }
            if (kind != CounterfactualKind::RuleLocationSwap) CHECK(pr.y_orig != pr.y_alt);
            CHECK(pr.y_orig == kVocab.var_id(*canonical_proof(pr.orig_problem).first_variable()));
            CHECK(pr.y_alt == kVocab.var_id(*canonical_proof(pr.alt_problem).first_variable()));
        }
    }
}

TEST_CASE("empty and self-donor patches are identities") {
    for (int groups : {3, 1}) {
        const auto params = random_model(21, groups);
        const auto p = worked_example();
        const auto t = encode(p, kVocab, true);
        const auto rm = region_map(p, t, kVocab);
        const auto clean = forward<float>(params, t.ids, CaptureSpec::all());

        const auto empty = patched_forward(params, t.ids, {}, clean.cache, rm);
        CHECK(bit_equal(empty.logits, clean.logits));

        const auto all = PositionSpec::of(Region::RelevantContext);
        for (auto sub : {SubComponent::Output, SubComponent::Query, SubComponent::Key, SubComponent::Value,
                         SubComponent::Residual, SubComponent::Embedding}) {
            std::vector<InterventionSpec> specs;
            const bool per_group = sub == SubComponent::Key || sub == SubComponent::Value;
            const int units = per_group ? groups : 3;
            const int layers = sub == SubComponent::Residual ? 4 : sub == SubComponent::Embedding ? 1 : 3;
            for (int l = 0; l < layers; ++l) {
                if (sub == SubComponent::Residual || sub == SubComponent::Embedding) {
                    specs.push_back({sub, l, -1, all});
                    continue;
                }
                for (int u = 0; u < units; ++u) specs.push_back({sub, l, u, all});
            }
            const auto out = patched_forward(params, t.ids, specs, clean.cache, rm);
            INFO("sub " << to_string(sub) << " groups " << groups);
            CHECK(bit_equal(out.logits, clean.logits));
        }
    }
}

TEST_CASE("patching a head with the alt run moves the logits") {
    const auto params = random_model(21);
    const auto pr = make_pair(worked_example(), CounterfactualKind::QueryFlip, kVocab);
    const auto rm = region_map(pr.orig_problem, pr.orig, kVocab);
    const auto clean = forward<float>(params, pr.orig.ids);
    const auto alt = forward<float>(params, pr.alt.ids, CaptureSpec::all());
    const std::vector<InterventionSpec> one{{SubComponent::Output, 0, 0, PositionSpec::of(Region::QueryPos)}};
    const auto out = patched_forward(params, pr.orig.ids, one, alt.cache, rm);
    CHECK_FALSE(bit_equal(out.logits, clean.logits));
    // Positions before the query cannot be affected.
    CHECK(bit_equal(out.logits.topRows(pr.orig.marks.query_pos), clean.logits.topRows(pr.orig.marks.query_pos)));
}

TEST_CASE("patched_forward errors") {
    const auto params = random_model(21);
    const auto p = worked_example();
    const auto t = encode(p, kVocab, false);
    const auto rm = region_map(p, t, kVocab);
    const auto bare = forward<float>(params, t.ids, CaptureSpec::none());
    const std::vector<InterventionSpec> one{{SubComponent::Output, 0, 0, PositionSpec::of(Region::QueryPos)}};
    CHECK_THROWS_AS(patched_forward(params, t.ids, one, bare.cache, rm), std::invalid_argument);
    const auto full = forward<float>(params, t.ids, CaptureSpec::all());
    const std::vector<InterventionSpec> bad{{SubComponent::Output, 5, 0, PositionSpec::of(Region::QueryPos)}};
    CHECK_THROWS_AS(patched_forward(params, t.ids, bad, full.cache, rm), std::invalid_argument);
    const std::vector<InterventionSpec> far{{SubComponent::Output, 0, 0, PositionSpec{std::nullopt, {500}}}};
    CHECK_THROWS_AS(patched_forward(params, t.ids, far, full.cache, rm), std::invalid_argument);
}

TEST_CASE("calibrated score endpoints") {
    CHECK(calibrated_score({-2.0, 3.0, {-2.0, -2.0}}).mean == 0.0);
    CHECK(calibrated_score({-2.0, 3.0, {3.0, 3.0}}).mean == 1.0);
    CHECK(calibrated_score({-4.0, 4.0, {0.0}}).mean == 0.5);
    const auto s = calibrated_score({-4.0, 4.0, {-4.0, 4.0}});
    CHECK(s.mean == 0.5);
    CHECK(s.std == 0.5);
    CHECK(s.n == 2);
    const auto deg = calibrated_score({1.0, 1.0, {1.0}});
    CHECK(deg.degenerate);
    CHECK(deg.mean == 0.0);
    CHECK(std::isnan(calibrated_score({1.0, 0.0, {2.0}}).mean));
    CHECK_THROWS_AS(calibrated_score({0.0, 1.0, {}}), std::invalid_argument);
    CHECK_THROWS_AS(calibrated_score({0.0, 1.0, {NAN}}), std::invalid_argument);
}

TEST_CASE("scores ignore a common shift of the logits") {
    auto params = random_model(22);
    const auto pairs = oriented(params, some_pairs(CounterfactualKind::QueryFlip, 8, 3));
    const auto a = patch_scan(params, pairs, {});
    params.b_class.array() += 3.0F;
    const auto b = patch_scan(params, pairs, {});
    for (std::size_t i = 0; i < a.cells.size(); ++i)
        CHECK(b.cells[i].score.mean == doctest::Approx(a.cells[i].score.mean).epsilon(1e-4));
}

TEST_CASE("pairs without a counterfactual signal score zero") {
    const auto params = random_model(23);
    auto pairs = some_pairs(CounterfactualKind::QueryFlip, 5, 4);
    for (auto& p : pairs) {
        p.alt = p.orig;
        p.alt_problem = p.orig_problem;
    }
    const auto cal = patch_scan(params, pairs, {});
    for (const auto& c : cal.cells) {
        CHECK(c.score.mean == 0.0);
        CHECK(c.score.degenerate);
    }
    ScanConfig lc;
    lc.sub = SubComponent::Key;
    lc.positions = PositionSpec::of(Region::RulesSection);
    lc.metric = Metric::LossIncrease;
    for (const auto& c : patch_scan(params, pairs, lc).cells) CHECK(c.score.mean == 0.0);
}

TEST_CASE("kv-group scan is the simultaneous patch, not the sum") {
    const auto params = random_model(24, 1);
    const auto pairs = oriented(params, some_pairs(CounterfactualKind::QueryFlip, 10, 5));
    ScanConfig head;
    ScanConfig group;
    group.granularity = Granularity::KvGroup;
    const auto gh = patch_scan(params, pairs, head);
    const auto gg = patch_scan(params, pairs, group);
    CHECK(gg.units == 1);

    for (int l = 0; l < 3; ++l) {
        // Manual simultaneous patch of the three heads of group 0.
        std::vector<double> d;
        for (const auto& pr : pairs) {
            const auto rm = region_map(pr.orig_problem, pr.orig, kVocab);
            const auto alt = forward<float>(params, pr.alt.ids, CaptureSpec::all());
            std::vector<InterventionSpec> specs;
            for (int h = 0; h < 3; ++h) specs.push_back({SubComponent::Output, l, h, PositionSpec::of(Region::OnAfterQuery)});
            const auto out = patched_forward(params, pr.orig.ids, specs, alt.cache, rm);
            const int a = pr.orig.marks.answer_pos;
            d.push_back(double(out.logits(a, pr.y_alt)) - double(out.logits(a, pr.y_orig)));
        }
        const auto manual = calibrated_score({gg.orig_dagger, gg.alt, d});
        CHECK(gg.at(l, 0).score.mean == manual.mean);
        double sum = 0.0;
        for (int h = 0; h < 3; ++h) sum += gh.at(l, h).score.mean;
        CHECK(std::abs(sum - gg.at(l, 0).score.mean) > 1e-4);
    }
    ScanConfig key_head;
    key_head.sub = SubComponent::Key;
    CHECK_THROWS_AS(patch_scan(params, pairs, key_head), std::invalid_argument);
}

TEST_CASE("loss increase matches a manual computation") {
    const auto params = random_model(25);
    const auto pairs = some_pairs(CounterfactualKind::RuleLocationSwap, 6, 6);
    ScanConfig cfg;
    cfg.sub = SubComponent::Key;
    cfg.positions = PositionSpec::of(Region::RulesSection);
    cfg.metric = Metric::LossIncrease;
    const auto g = patch_scan(params, pairs, cfg);
    auto ce = [](const Mat& logits, int pos, TokenId y) {
        const auto row = logits.row(pos).cast<double>();
        return std::log(row.array().exp().sum()) - row(y);
    };
    double total = 0.0;
    for (const auto& pr : pairs) {
        const auto rm = region_map(pr.orig_problem, pr.orig, kVocab);
        const auto alt = forward<float>(params, pr.alt.ids, CaptureSpec::all());
        const std::vector<InterventionSpec> s{{SubComponent::Key, 1, 2, cfg.positions}};
        const auto out = patched_forward(params, pr.orig.ids, s, alt.cache, rm);
        const auto clean = forward<float>(params, pr.orig.ids);
        const int a = pr.orig.marks.answer_pos;
        total += ce(out.logits, a, pr.y_orig) - ce(clean.logits, a, pr.y_orig);
    }
    CHECK(g.at(1, 2).score.mean == doctest::Approx(total / 6).epsilon(1e-9));
}

TEST_CASE("scans do not depend on the worker count") {
    const auto params = random_model(26);
    const auto pairs = oriented(params, some_pairs(CounterfactualKind::QueryFlip, 7, 7));
    setenv("LOGICIRC_WORKERS", "1", 1);
    const auto a = patch_scan(params, pairs, {});
    setenv("LOGICIRC_WORKERS", "3", 1);
    const auto b = patch_scan(params, pairs, {});
    unsetenv("LOGICIRC_WORKERS");
    for (std::size_t i = 0; i < a.cells.size(); ++i) CHECK(a.cells[i].score.mean == b.cells[i].score.mean);
    setenv("LOGICIRC_WORKERS", "0", 1);
    CHECK_THROWS_AS(worker_count(), std::invalid_argument);
    unsetenv("LOGICIRC_WORKERS");
}

TEST_CASE("sufficiency of the full circuit is exactly one") {
    const auto params = random_model(27);
    const auto pairs = some_pairs(CounterfactualKind::QueryFlip, 12, 8);
    const auto all = CircuitSpec::all_heads(params.config);
    for (auto dir : {Direction::Normal, Direction::Alt}) {
        const auto r = circuit_sufficiency(params, pairs, all, dir);
        CHECK(r.ratio("C") == 1.0);
        CHECK(std::isfinite(r.ratio("C_null")));
        CHECK(r.rows.size() == 2 + all.families.size());
        CHECK(r.warnings.empty());
    }
    CHECK_THROWS_AS(circuit_sufficiency(params, {}, all), std::invalid_argument);
    CircuitSpec bad{{{"x", {{3, 0}}, PositionSpec::of(Region::AnswerPos)}}};
    CHECK_THROWS_AS(circuit_sufficiency(params, pairs, bad), std::invalid_argument);
    CircuitSpec twice{{{"a", {{0, 0}}, PositionSpec::of(Region::AnswerPos)},
                       {"b", {{0, 0}}, PositionSpec::of(Region::QueryPos)}}};
    CHECK(twice.overlap_warnings().size() == 1);
}

TEST_CASE("empty circuit equals freezing every head output") {
    const auto params = random_model(28);
    const auto pairs = some_pairs(CounterfactualKind::QueryFlip, 4, 9);
    const auto r = circuit_sufficiency(params, pairs, CircuitSpec{});
    double sum = 0.0;
    for (const auto& pr : pairs) {
        const auto rm = region_map(pr.orig_problem, pr.orig, kVocab);
        const auto alt = forward<float>(params, pr.alt.ids, CaptureSpec::all());
        std::vector<InterventionSpec> specs;
        for (int l = 0; l < 3; ++l)
            for (int h = 0; h < 3; ++h) specs.push_back({SubComponent::Output, l, h, PositionSpec::of(Region::OnAfterQuery)});
        const auto out = patched_forward(params, pr.orig.ids, specs, alt.cache, rm);
        const int a = pr.orig.marks.answer_pos;
        sum += double(out.logits(a, pr.y_orig)) - double(out.logits(a, pr.y_alt));
    }
    CHECK(r.ratio("C_null") == doctest::Approx(sum / 4 / r.clean_gap).epsilon(1e-12));
}

TEST_CASE("circuit selection takes the top heads of each band") {
    ScoreGrid g;
    g.layers = 2;
    g.units = 2;
    const double means[] = {0.1, 0.9, 0.5, 0.2};
    for (int i = 0; i < 4; ++i) g.cells.push_back({i / 2, i % 2, {means[i], 0.0, 1, false}});
    const auto one = select_circuit(g, 2, {{0, 1}});
    REQUIRE(one.families.size() == 2);
    CHECK(one.families[0].heads == std::vector<HeadRef>{{0, 1}});
    CHECK(one.families[1].heads == std::vector<HeadRef>{{1, 0}});
    const auto per_layer = select_circuit(g, 1, {{0}, {1}});
    CHECK(per_layer.families[0].heads == std::vector<HeadRef>{{0, 1}});
    CHECK(per_layer.families[1].heads == std::vector<HeadRef>{{1, 0}});
    g.config.metric = Metric::LossIncrease;
    CHECK_THROWS_AS(select_circuit(g, 1, {{0}}), std::invalid_argument);
}
