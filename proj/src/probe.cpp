#include "logicirc/probe.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "logicirc/inference.hpp"
#include "logicirc/parallel.hpp"

namespace logicirc {

namespace {

constexpr std::pair<Stream, std::string_view> kStreamNames[] = {
    {Stream::Residual, "residual"},
    {Stream::BlockOutput, "block_output"},
    {Stream::HeadOutputConcat, "head_output_concat"},
};

Vocab vocab_for(const Params& params) { return Vocab(params.config.vocab_size - Vocab::kNumSpecial); }

std::set<Var> first_variables(const Problem& p) {
    std::set<Var> out;
    for (const auto& proof : minimal_proofs(p)) out.insert(*proof.first_variable());
    return out;
}

Problem with_query(const Problem& p, Chain chain) {
    Problem q = p;
    q.meta.queried = chain;
    q.query = chain == Chain::LogOp ? p.logop_conclusion() : p.linear_conclusion();
    return q;
}

TokenId argmax_at(const Mat& logits, int row) {
    Eigen::Index best = 0;
    logits.row(row).maxCoeff(&best);
    return static_cast<TokenId>(best);
}

// Full-batch AdamW on an affine map. `grad` fills dZ (n x classes) from the
// scores Z and returns the loss.
template <class Grad>
AffineProbe fit(const Eigen::MatrixXd& x, int classes, const ProbeConfig& cfg, ProbeLoss loss, Grad&& grad) {
    const auto d = x.cols();
    AffineProbe p;
    p.loss = loss;
    p.config = cfg;
    p.weight.resize(classes, d);
    CounterRng rng(cfg.seed, 0x9b0be);
    for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = rng.normal(0.0, cfg.init_scale);
    p.bias = Eigen::VectorXd::Zero(classes);

    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Eigen::MatrixXd mw = Eigen::MatrixXd::Zero(classes, d), vw = mw;
    Eigen::VectorXd mb = Eigen::VectorXd::Zero(classes), vb = mb;
    Eigen::MatrixXd z, dz;
    for (int step = 1; step <= cfg.steps; ++step) {
        z = p.scores(x);
        grad(z, dz);
        const Eigen::MatrixXd gw = dz.transpose() * x;
        const Eigen::VectorXd gb = dz.colwise().sum().transpose();
        mw = b1 * mw + (1 - b1) * gw;
        vw = b2 * vw + (1 - b2) * gw.cwiseProduct(gw);
        mb = b1 * mb + (1 - b1) * gb;
        vb = b2 * vb + (1 - b2) * gb.cwiseProduct(gb);
        const double c1 = 1 - std::pow(b1, step), c2 = 1 - std::pow(b2, step);
        p.weight *= 1 - cfg.lr * cfg.weight_decay;
        p.bias *= 1 - cfg.lr * cfg.weight_decay;
        p.weight.array() -= cfg.lr * (mw.array() / c1) / ((vw.array() / c2).sqrt() + eps);
        p.bias.array() -= cfg.lr * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
    }
    if (!p.weight.allFinite() || !p.bias.allFinite()) throw std::runtime_error("probe training diverged");
    return p;
}

void check_features(const Eigen::MatrixXd& x, std::size_t n, const char* what) {
    if (static_cast<std::size_t>(x.rows()) != n)
        throw std::invalid_argument(std::string(what) + ": feature rows do not match targets");
    if (!x.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite features");
}

}  // namespace

std::string_view to_string(Stream s) {
    for (const auto& [v, name] : kStreamNames)
        if (v == s) return name;
    return "?";
}

Stream stream_from_string(std::string_view s) {
    for (const auto& [v, name] : kStreamNames)
        if (name == s) return v;
    throw std::invalid_argument("unknown stream '" + std::string(s) + "'");
}

std::string FeatureSite::describe() const {
    // Same syntax parse_feature_site reads: stream:layer[:h,h]@positions
    std::string s = std::string(to_string(stream)) + ":" + std::to_string(layer);
    for (std::size_t i = 0; i < heads.size(); ++i) s += (i ? "," : ":") + std::to_string(heads[i]);
    return s + "@" + position.describe();
}

Eigen::MatrixXd collect_features(const Params& params, std::span<const Problem> problems, const FeatureSite& site) {
    const auto& c = params.config;
    const Vocab vocab = vocab_for(params);
    CaptureSpec cap;
    int width = c.d_model;
    switch (site.stream) {
        case Stream::Residual:
            if (site.layer < 0 || site.layer > c.layers) throw std::invalid_argument("residual index out of range");
            cap.residual = true;
            break;
        case Stream::BlockOutput:
            if (site.layer < 0 || site.layer >= c.layers) throw std::invalid_argument("block index out of range");
            cap.block_output = true;
            break;
        case Stream::HeadOutputConcat:
            if (site.layer < 0 || site.layer >= c.layers) throw std::invalid_argument("block index out of range");
            if (site.heads.empty()) throw std::invalid_argument("head concatenation needs at least one head");
            for (int h : site.heads)
                if (h < 0 || h >= c.heads) throw std::invalid_argument("head " + std::to_string(h) + " out of range");
            cap.head_output = true;
            width = c.head_dim() * static_cast<int>(site.heads.size());
            break;
    }
    Eigen::MatrixXd x(static_cast<Eigen::Index>(problems.size()), width);
    parallel_for(problems.size(), [&](std::size_t i) {
        const auto& p = problems[i];
        const auto t = encode(p, vocab, false);
        const auto rm = region_map(p, t, vocab);
        const auto pos = site.position.resolve(rm);
        if (pos.size() != 1) throw std::invalid_argument("feature position must be a single token");
        const auto r = forward<float>(params, t.ids, cap);
        auto row = x.row(static_cast<Eigen::Index>(i));
        switch (site.stream) {
            case Stream::Residual: row = r.cache.residual[site.layer].row(pos[0]).cast<double>(); break;
            case Stream::BlockOutput: row = r.cache.block_output[site.layer].row(pos[0]).cast<double>(); break;
            case Stream::HeadOutputConcat: {
                const int dh = c.head_dim();
                for (std::size_t k = 0; k < site.heads.size(); ++k)
                    row.segment(static_cast<Eigen::Index>(k) * dh, dh) =
                        r.cache.head_output[site.layer].block(pos[0], site.heads[k] * dh, 1, dh).cast<double>();
                break;
            }
        }
    });
    return x;
}

int target_linear_start(const Problem& p) { return p.linear_root().id; }

int target_logop_start(const Problem& p) {
    return canonical_proof(with_query(p, Chain::LogOp)).first_variable()->id;
}

int target_first_token(const Problem& p, CounterRng& rng) {
    const auto vars = first_variables(p);
    auto it = vars.begin();
    if (vars.size() > 1) std::advance(it, static_cast<long>(rng.uniform_below(vars.size())));
    return it->id;
}

int target_logop_kind(const Problem& p) { return p.logop() == LogOp::And ? 0 : 1; }

std::array<int, 2> target_logop_roots(const Problem& p) {
    const auto r = p.logop_roots();
    return {r[0].id, r[1].id};
}

int target_final_truth(const Problem& p) { return static_cast<int>(evaluate_truth(p, p.query)); }

Eigen::MatrixXd AffineProbe::scores(const Eigen::MatrixXd& x) const {
    if (x.cols() != weight.cols()) throw std::invalid_argument("feature width does not match the probe");
    return (x * weight.transpose()).rowwise() + bias.transpose();
}

double accuracy(const AffineProbe& probe, const Eigen::MatrixXd& x, std::span<const int> y) {
    check_features(x, y.size(), "accuracy");
    if (y.empty()) return 0.0;
    const auto z = probe.scores(x);
    std::size_t ok = 0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        Eigen::Index best = 0;
        z.row(i).maxCoeff(&best);
        ok += best == y[static_cast<std::size_t>(i)];
    }
    return static_cast<double>(ok) / static_cast<double>(y.size());
}

double top2_accuracy(const AffineProbe& probe, const Eigen::MatrixXd& x, std::span<const std::array<int, 2>> y) {
    check_features(x, y.size(), "top2_accuracy");
    if (y.empty()) return 0.0;
    const auto z = probe.scores(x);
    std::size_t ok = 0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        Eigen::Index a = 0;
        z.row(i).maxCoeff(&a);
        Eigen::Index b = a == 0 ? 1 : 0;
        for (Eigen::Index k = 0; k < z.cols(); ++k)
            if (k != a && z(i, k) > z(i, b)) b = k;
        const auto& t = y[static_cast<std::size_t>(i)];
        ok += std::set<Eigen::Index>{a, b} == std::set<Eigen::Index>{t[0], t[1]};
    }
    return static_cast<double>(ok) / static_cast<double>(y.size());
}

ProbeResult train_affine_probe(const Eigen::MatrixXd& x_train, std::span<const int> y_train,
                               const Eigen::MatrixXd& x_test, std::span<const int> y_test, int classes,
                               const ProbeConfig& cfg) {
    check_features(x_train, y_train.size(), "train_affine_probe");
    check_features(x_test, y_test.size(), "train_affine_probe");
    if (x_test.rows() > 0 && x_test.cols() != x_train.cols())
        throw std::invalid_argument("train and test features differ in width");
    std::set<int> present;
    for (int y : y_train) {
        if (y < 0 || y >= classes) throw std::invalid_argument("target " + std::to_string(y) + " outside the classes");
        present.insert(y);
    }
    for (int y : y_test)
        if (y < 0 || y >= classes) throw std::invalid_argument("target " + std::to_string(y) + " outside the classes");
    if (present.size() < 2) throw std::invalid_argument("probe targets contain a single class");

    const auto n = static_cast<double>(y_train.size());
    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(x_train.rows(), classes);
    for (std::size_t i = 0; i < y_train.size(); ++i) onehot(static_cast<Eigen::Index>(i), y_train[i]) = 1.0;
    auto grad = [&](const Eigen::MatrixXd& z, Eigen::MatrixXd& dz) {
        dz = (z.colwise() - z.rowwise().maxCoeff()).array().exp().matrix();
        dz.array().colwise() /= dz.rowwise().sum().array();
        dz = (dz - onehot) / n;
    };
    ProbeResult r;
    r.probe = fit(x_train, classes, cfg, ProbeLoss::CrossEntropy, grad);
    r.train_acc = accuracy(r.probe, x_train, y_train);
    r.test_acc = accuracy(r.probe, x_test, y_test);
    return r;
}

ProbeResult train_multilabel_probe(const Eigen::MatrixXd& x_train, std::span<const std::array<int, 2>> y_train,
                                   const Eigen::MatrixXd& x_test, std::span<const std::array<int, 2>> y_test,
                                   int labels, const ProbeConfig& cfg) {
    check_features(x_train, y_train.size(), "train_multilabel_probe");
    check_features(x_test, y_test.size(), "train_multilabel_probe");
    auto check = [&](const std::array<int, 2>& t) {
        if (t[0] == t[1] || t[0] < 0 || t[1] < 0 || t[0] >= labels || t[1] >= labels)
            throw std::invalid_argument("multi-label targets must name two distinct labels");
    };
    for (const auto& t : y_train) check(t);
    for (const auto& t : y_test) check(t);
    if (y_train.empty()) throw std::invalid_argument("no training samples");

    Eigen::MatrixXd twohot = Eigen::MatrixXd::Zero(x_train.rows(), labels);
    for (std::size_t i = 0; i < y_train.size(); ++i)
        for (int k : y_train[i]) twohot(static_cast<Eigen::Index>(i), k) = 1.0;
    const double denom = static_cast<double>(twohot.size());
    auto grad = [&](const Eigen::MatrixXd& z, Eigen::MatrixXd& dz) {
        dz = (1.0 / (1.0 + (-z.array()).exp())).matrix();
        dz = (dz - twohot) / denom;
    };
    ProbeResult r;
    r.probe = fit(x_train, labels, cfg, ProbeLoss::BinaryCrossEntropy, grad);
    r.train_acc = top2_accuracy(r.probe, x_train, y_train);
    r.test_acc = top2_accuracy(r.probe, x_test, y_test);
    return r;
}

ProjectionStats projection_stats(const Eigen::MatrixXd& features, const Eigen::VectorXd& h) {
    if (features.rows() > 0 && features.cols() != h.size()) throw std::invalid_argument("dimension mismatch");
    const double norm = h.norm();
    if (norm == 0.0) throw std::invalid_argument("zero direction");
    ProjectionStats s;
    s.n = static_cast<std::size_t>(features.rows());
    if (s.n == 0) return s;
    const Eigen::VectorXd proj = features * (h / norm);
    s.mean = proj.mean();
    s.positive_rate = static_cast<double>((proj.array() > 0).count()) / static_cast<double>(s.n);
    s.negative_rate = static_cast<double>((proj.array() < 0).count()) / static_cast<double>(s.n);
    return s;
}

RoutingDirection estimate_direction(const Params& params, std::span<const Problem> linear_queried,
                                    std::span<const Problem> heldout_linear, std::span<const Problem> heldout_logop,
                                    int block) {
    if (linear_queried.size() < 100) throw std::invalid_argument("direction estimation needs at least 100 samples");
    for (const auto& p : linear_queried)
        if (p.meta.queried != Chain::Linear)
            throw std::invalid_argument("direction estimation set mixes query types");
    RoutingDirection d;
    d.site = {Stream::BlockOutput, block, {}, PositionSpec::of(Region::QueryPos)};
    d.n = linear_queried.size();
    const auto x = collect_features(params, linear_queried, d.site);
    d.h = x.colwise().mean().transpose();
    if (d.h.norm() == 0.0) throw std::runtime_error("routing direction is zero");
    if (!heldout_linear.empty())
        d.linear_heldout = projection_stats(collect_features(params, heldout_linear, d.site), d.h);
    if (!heldout_logop.empty())
        d.logop_heldout = projection_stats(collect_features(params, heldout_logop, d.site), d.h);
    return d;
}

RouteEval direction_intervention_eval(const Params& params, std::span<const Problem> problems, RouteMode mode,
                                      const Eigen::VectorXd& h, int block) {
    const auto& c = params.config;
    if (h.size() != c.d_model) throw std::invalid_argument("direction has the wrong dimension");
    if (block < 0 || block >= c.layers) throw std::invalid_argument("block out of range");
    const Chain expected = mode == RouteMode::Subtract ? Chain::Linear : Chain::LogOp;
    for (const auto& p : problems)
        if (p.meta.queried != expected)
            throw std::invalid_argument(mode == RouteMode::Subtract ? "subtract mode expects linear-queried problems"
                                                                    : "add mode expects LogOp-queried problems");
    const Vocab vocab = vocab_for(params);
    const RowVec delta = (mode == RouteMode::Add ? h : Eigen::VectorXd(-h)).cast<float>().transpose();

    std::vector<char> acc(problems.size()), other(problems.size());
    std::vector<double> att(problems.size());
    parallel_for(problems.size(), [&](std::size_t i) {
        const auto& p = problems[i];
        const auto t = encode(p, vocab, false);
        Intervention<float> iv;
        iv.site = Site::BlockOutput;
        iv.layer = block;
        iv.positions = {t.marks.query_pos};
        iv.mode = Intervention<float>::Mode::Add;
        iv.delta = delta;
        CaptureSpec cap;
        cap.attention = true;
        const auto r = forward<float>(params, t.ids, cap, std::span(&iv, 1));
        const TokenId pred = argmax_at(r.logits, t.marks.answer_pos);
        const bool is_var = vocab.is_var(pred);
        acc[i] = is_var && first_variables(p).count(vocab.var_of(pred));
        const Problem flipped = with_query(p, mode == RouteMode::Subtract ? Chain::LogOp : Chain::Linear);
        other[i] = is_var && first_variables(flipped).count(vocab.var_of(pred));
        double a = 0.0;
        for (int hh = 0; hh < c.heads; ++hh)
            a += r.cache.attention[static_cast<std::size_t>(c.layers - 1)][static_cast<std::size_t>(hh)](
                t.marks.answer_pos, t.marks.query_pos);
        att[i] = a / c.heads;
    });
    RouteEval e;
    e.n = problems.size();
    if (e.n == 0) return e;
    for (std::size_t i = 0; i < e.n; ++i) {
        e.accuracy += acc[i];
        e.counterpart_rate += other[i];
        e.layer3_query_attention += att[i];
    }
    const double n = static_cast<double>(e.n);
    e.accuracy /= n;
    e.counterpart_rate /= n;
    e.layer3_query_attention /= n;
    return e;
}

ResidualPatchEval residual_patch_eval(const Params& params, std::span<const PromptPair> pairs, int layer) {
    if (pairs.empty()) throw std::invalid_argument("no pairs");
    const Vocab vocab = vocab_for(params);
    std::vector<char> clean(pairs.size()), patched(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t i) {
        const auto& pr = pairs[i];
        if (pr.kind != CounterfactualKind::LogOpFlip) throw std::invalid_argument("residual patch expects LogOp-flip pairs");
        const auto out = generate_greedy(params, pr.orig.ids);
        clean[i] = verify_answer(pr.orig_problem, decode_words(out, vocab)).exact_match;
        CaptureSpec cap;
        cap.residual = true;
        const auto donor = forward<float>(params, pr.alt.ids, cap);
        Intervention<float> iv;
        iv.site = Site::Residual;
        iv.layer = layer;
        iv.positions = {pr.orig.marks.answer_pos};
        iv.donor = &donor.cache;
        const auto pout = generate_greedy(params, pr.orig.ids, 32, std::span(&iv, 1));
        patched[i] = verify_answer(pr.orig_problem, decode_words(pout, vocab)).exact_match;
    });
    ResidualPatchEval e;
    e.n = pairs.size();
    for (std::size_t i = 0; i < e.n; ++i) {
        e.clean_exact += clean[i];
        e.patched_exact += patched[i];
    }
    e.clean_exact /= static_cast<double>(e.n);
    e.patched_exact /= static_cast<double>(e.n);
    return e;
}

nlohmann::json to_json(const ProjectionStats& s) {
    return {{"n", s.n}, {"mean", s.mean}, {"positive_rate", s.positive_rate}, {"negative_rate", s.negative_rate}};
}

nlohmann::json to_json(const RouteEval& r) {
    return {{"n", r.n},
            {"counterpart_rate", r.counterpart_rate},
            {"accuracy", r.accuracy},
            {"layer3_query_attention", r.layer3_query_attention}};
}

}  // namespace logicirc
