#include <doctest.h>

#include <cstring>
#include <set>

#include "fixtures.hpp"
#include "logicirc/probe.hpp"

using namespace logicirc;
using namespace fixtures;

namespace {

const Vocab kVocab(80);

// Gaussian blobs around well separated class centres.
void blobs(int n, int classes, int dim, std::uint64_t seed, Eigen::MatrixXd& x, std::vector<int>& y) {
    CounterRng rng(seed, 1);
    Eigen::MatrixXd centres(classes, dim);
    CounterRng crng(99, 2);
    for (Eigen::Index i = 0; i < centres.size(); ++i) centres.data()[i] = crng.normal(0.0, 5.0);
    x.resize(n, dim);
    y.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int c = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(classes)));
        y[static_cast<std::size_t>(i)] = c;
        for (int k = 0; k < dim; ++k) x(i, k) = centres(c, k) + rng.normal(0.0, 0.3);
    }
}

std::vector<Problem> problems(std::size_t n, std::uint64_t seed, std::optional<Chain> only = std::nullopt) {
    CounterRng rng(seed);
    std::vector<Problem> out;
    while (out.size() < n) {
        auto p = sample_problem(rng, SamplingSpec::balanced(3));
        if (!only || p.meta.queried == *only) out.push_back(std::move(p));
    }
    return out;
}

}  // namespace

TEST_CASE("affine probe separates blobs") {
    Eigen::MatrixXd xtr, xte;
    std::vector<int> ytr, yte;
    blobs(400, 5, 6, 1, xtr, ytr);
    blobs(200, 5, 6, 2, xte, yte);
    ProbeConfig cfg;
    cfg.steps = 300;
    const auto r = train_affine_probe(xtr, ytr, xte, yte, 5, cfg);
    CHECK(r.train_acc == 1.0);
    CHECK(r.test_acc == 1.0);

    const auto again = train_affine_probe(xtr, ytr, xte, yte, 5, cfg);
    CHECK(std::memcmp(again.probe.weight.data(), r.probe.weight.data(), sizeof(double) * r.probe.weight.size()) == 0);
    cfg.seed = 1;
    const auto other = train_affine_probe(xtr, ytr, xte, yte, 5, cfg);
    CHECK(other.probe.weight != r.probe.weight);
}

TEST_CASE("affine probe errors") {
    Eigen::MatrixXd x = Eigen::MatrixXd::Ones(4, 2);
    const std::vector<int> one{1, 1, 1, 1};
    CHECK_THROWS_AS(train_affine_probe(x, one, x, one, 3), std::invalid_argument);
    const std::vector<int> out{0, 1, 5, 1};
    CHECK_THROWS_AS(train_affine_probe(x, out, x, one, 3), std::invalid_argument);
    const std::vector<int> short_y{0, 1};
    CHECK_THROWS_AS(train_affine_probe(x, short_y, x, one, 3), std::invalid_argument);
}

TEST_CASE("multi-label probe recovers copied targets") {
    const int labels = 10, n = 300;
    CounterRng rng(3);
    auto make = [&](Eigen::MatrixXd& x, std::vector<std::array<int, 2>>& y) {
        x = Eigen::MatrixXd::Zero(n, labels);
        y.clear();
        for (int i = 0; i < n; ++i) {
            const int a = static_cast<int>(rng.uniform_below(labels));
            int b = static_cast<int>(rng.uniform_below(labels - 1));
            if (b >= a) ++b;
            y.push_back({a, b});
            x(i, a) = 1.0;
            x(i, b) = 1.0;
        }
    };
    Eigen::MatrixXd xtr, xte;
    std::vector<std::array<int, 2>> ytr, yte;
    make(xtr, ytr);
    make(xte, yte);
    ProbeConfig cfg{.lr = 0.5e-3};
    cfg.steps = 1000;
    const auto r = train_multilabel_probe(xtr, ytr, xte, yte, labels, cfg);
    CHECK(r.probe.loss == ProbeLoss::BinaryCrossEntropy);
    CHECK(r.test_acc == 1.0);

    // Noise features: chance of naming both labels is 1 / C(10, 2).
    Eigen::MatrixXd noise(n, 8), noise_te(n, 8);
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = rng.normal(0.0, 1.0);
    for (Eigen::Index i = 0; i < noise_te.size(); ++i) noise_te.data()[i] = rng.normal(0.0, 1.0);
    const auto chance = train_multilabel_probe(noise, ytr, noise_te, yte, labels, cfg);
    CHECK(chance.test_acc < 0.1);

    std::vector<std::array<int, 2>> bad = ytr;
    bad[0] = {2, 2};
    CHECK_THROWS_AS(train_multilabel_probe(xtr, bad, xte, yte, labels, cfg), std::invalid_argument);
}

TEST_CASE("probe targets") {
    const auto p = worked_example(true, false);
    CHECK(target_linear_start(p) == V('P').id);
    CHECK(target_logop_start(p) == V('K').id);
    CHECK(target_logop_kind(p) == 1);
    CHECK(target_logop_roots(p) == std::array<int, 2>{V('K').id, V('V').id});
    CHECK(target_final_truth(p) == 0);
    auto q = p;
    q.query = V('S');
    q.meta.queried = Chain::Linear;
    CHECK(target_logop_start(q) == V('K').id);

    // Both roots true: either may come first.
    const auto both = worked_example(true, true);
    CounterRng rng(1);
    std::set<int> seen;
    for (int i = 0; i < 50; ++i) seen.insert(target_first_token(both, rng));
    CHECK(seen == std::set<int>{V('K').id, V('V').id});
}

TEST_CASE("feature collection reads the cache") {
    const auto params = random_model(31);
    const auto ps = problems(6, 2);
    const FeatureSite res{Stream::Residual, 2, {}, PositionSpec::of(Region::QueryPos)};
    const FeatureSite cat{Stream::HeadOutputConcat, 2, {2, 0}, PositionSpec::of(Region::AnswerPos)};
    const auto x = collect_features(params, ps, res);
    const auto xc = collect_features(params, ps, cat);
    CHECK(xc.cols() == 16);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto t = encode(ps[i], kVocab, false);
        const auto r = forward<float>(params, t.ids, CaptureSpec::all());
        CHECK(x.row(static_cast<Eigen::Index>(i)) ==
              r.cache.residual[2].row(t.marks.query_pos).cast<double>());
        CHECK(xc.row(static_cast<Eigen::Index>(i)).head(8) ==
              r.cache.head_output[2].block(t.marks.answer_pos, 16, 1, 8).cast<double>());
    }
    const FeatureSite wide{Stream::Residual, 2, {}, PositionSpec::of(Region::RulesSection)};
    CHECK_THROWS_AS(collect_features(params, ps, wide), std::invalid_argument);
    const FeatureSite deep{Stream::BlockOutput, 3, {}, PositionSpec::of(Region::QueryPos)};
    CHECK_THROWS_AS(collect_features(params, ps, deep), std::invalid_argument);
}

TEST_CASE("routing direction estimation") {
    const auto params = random_model(32);
    const auto lin = problems(120, 3, Chain::Linear);
    const auto log = problems(30, 4, Chain::LogOp);
    const auto d = estimate_direction(params, lin, lin, log);
    CHECK(d.n == 120);
    CHECK(d.h.size() == 24);
    CHECK(d.linear_heldout.n == 120);
    CHECK(d.logop_heldout.n == 30);
    CHECK(d.linear_heldout.positive_rate + d.linear_heldout.negative_rate <= 1.0);

    auto rev = lin;
    std::reverse(rev.begin(), rev.end());
    const auto r = estimate_direction(params, rev);
    CHECK((r.h - d.h).norm() < 1e-12 * d.h.norm());

    auto mixed = lin;
    mixed[5] = log[0];
    CHECK_THROWS_AS(estimate_direction(params, mixed), std::invalid_argument);
    CHECK_THROWS_AS(estimate_direction(params, std::span(lin).first(99)), std::invalid_argument);
}

TEST_CASE("routing interventions") {
    const auto params = random_model(33);
    const auto lin = problems(40, 5, Chain::Linear);
    const auto log = problems(40, 6, Chain::LogOp);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(24);
    const auto e = direction_intervention_eval(params, lin, RouteMode::Subtract, zero);
    std::size_t ok = 0;
    for (const auto& p : lin) {
        const auto t = encode(p, kVocab, false);
        const auto r = forward<float>(params, t.ids);
        Eigen::Index best = 0;
        r.logits.row(t.marks.answer_pos).maxCoeff(&best);
        ok += static_cast<TokenId>(best) == kVocab.var_id(p.linear_root());
    }
    CHECK(e.accuracy == doctest::Approx(static_cast<double>(ok) / 40.0));
    CHECK(e.layer3_query_attention >= 0.0);
    CHECK(e.layer3_query_attention <= 1.0);

    CHECK_THROWS_AS(direction_intervention_eval(params, log, RouteMode::Subtract, zero), std::invalid_argument);
    CHECK_THROWS_AS(direction_intervention_eval(params, lin, RouteMode::Add, zero), std::invalid_argument);
    CHECK_THROWS_AS(direction_intervention_eval(params, log, RouteMode::Add, Eigen::VectorXd::Zero(5)),
                    std::invalid_argument);
}

TEST_CASE("adding then subtracting a direction restores the clean run") {
    const auto params = random_model(34);
    const auto p = worked_example();
    const auto t = encode(p, kVocab, false);
    CounterRng rng(8);
    RowVec v(24);
    for (int k = 0; k < 24; ++k) v(k) = static_cast<float>(rng.normal(0.0, 3.0));
    std::vector<Intervention<float>> ivs(2);
    for (int i = 0; i < 2; ++i) {
        ivs[i].site = Site::BlockOutput;
        ivs[i].layer = 1;
        ivs[i].positions = {t.marks.query_pos};
        ivs[i].mode = Intervention<float>::Mode::Add;
        ivs[i].delta = i == 0 ? v : RowVec(-v);
    }
    const auto clean = forward<float>(params, t.ids);
    const auto both = forward<float>(params, t.ids, CaptureSpec::none(), ivs);
    CHECK(std::memcmp(clean.logits.data(), both.logits.data(), sizeof(float) * clean.logits.size()) == 0);
    const auto one = forward<float>(params, t.ids, CaptureSpec::none(), std::span(ivs).first(1));
    CHECK(one.logits != clean.logits);
}

TEST_CASE("residual patch harness runs on LogOp-flip pairs") {
    const auto params = random_model(35);
    CounterRng rng(2);
    const auto pairs = sample_pairs(CounterfactualKind::LogOpFlip, 5, SamplingSpec::balanced(3), rng, kVocab);
    const auto e = residual_patch_eval(params, pairs);
    CHECK(e.n == 5);
    CHECK(e.clean_exact >= 0.0);
    CHECK(e.patched_exact <= 1.0);
    auto qf = sample_pairs(CounterfactualKind::QueryFlip, 2, SamplingSpec::balanced(3), rng, kVocab);
    CHECK_THROWS_AS(residual_patch_eval(params, qf), std::invalid_argument);
}
