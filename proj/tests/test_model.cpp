#include <doctest.h>

#include <cmath>

#include "logicirc/model.hpp"

using namespace logicirc;

namespace {

ModelConfig tiny(int kv_groups = 2) {
    ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.d_model = 8;
    c.max_seq_len = 16;
    c.vocab_size = 95;
    c.kv_groups = kv_groups;
    return c;
}

// Random non-trivial parameters, including LayerNorm gains and biases.
ModelParams<double> random_params(const ModelConfig& c, std::uint64_t seed, double scale = 0.5) {
    auto p = ModelParams<double>::zeros(c);
    CounterRng rng(seed, 3);
    p.visit([&](const std::string& name, double* d, Eigen::Index r, Eigen::Index cols) {
        const bool gain = name.ends_with("gain");
        for (Eigen::Index i = 0; i < r * cols; ++i) d[i] = (gain ? 1.0 : 0.0) + rng.normal(0.0, scale);
    });
    return p;
}

std::vector<TokenId> random_tokens(CounterRng& rng, int n, int vocab) {
    std::vector<TokenId> t;
    for (int i = 0; i < n; ++i) t.push_back(static_cast<TokenId>(rng.uniform_below(static_cast<std::uint64_t>(vocab))));
    return t;
}

}  // namespace

TEST_CASE("param count matches the closed form") {
    ModelConfig c;
    c.d_model = 768;
    const std::size_t D = 768, V = 95;
    const std::size_t per_layer = 2 * D + 3 * D * D + D * D + D;
    CHECK(param_count(c) == V * D + 72 * D + 3 * per_layer + 2 * D + V * D + V);
    CounterRng rng(1);
    CHECK(init_model(c, rng).num_params() == param_count(c));
}

TEST_CASE("init is deterministic with unit LayerNorm gains") {
    ModelConfig c;
    CounterRng a(7), b(7);
    const auto pa = init_model(c, a), pb = init_model(c, b);
    CHECK(params_hash(pa) == params_hash(pb));
    for (const auto& L : pa.layers) {
        CHECK((L.ln_gain.array() == 1.0F).all());
        CHECK((L.ln_bias.array() == 0.0F).all());
        CHECK((L.bo.array() == 0.0F).all());
    }
    CHECK((pa.lnf_gain.array() == 1.0F).all());
    const double sd = std::sqrt(pa.layers[0].wq.array().square().mean());
    CHECK(sd == doctest::Approx(0.02).epsilon(0.05));
}

TEST_CASE("config validation") {
    ModelConfig c;
    c.d_model = 256;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c.d_model = 264;
    c.kv_groups = 2;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("attention rows are causal probability vectors") {
    ModelConfig c = tiny();
    const auto p = random_params(c, 1).cast<float>();
    CounterRng rng(2);
    const auto toks = random_tokens(rng, 12, c.vocab_size);
    const auto r = forward<float>(p, toks, CaptureSpec::all());
    for (const auto& layer : r.cache.attention)
        for (const auto& a : layer)
            for (Eigen::Index i = 0; i < a.rows(); ++i) {
                CHECK(a.row(i).sum() == doctest::Approx(1.0).epsilon(1e-5));
                for (Eigen::Index k = i + 1; k < a.cols(); ++k) CHECK(a(i, k) == 0.0F);
            }
}

TEST_CASE("overlong input is rejected") {
    ModelConfig c = tiny();
    const auto p = random_params(c, 1).cast<float>();
    std::vector<TokenId> toks(static_cast<std::size_t>(c.max_seq_len + 1), 3);
    CHECK_THROWS_AS(forward<float>(p, toks), std::invalid_argument);
}

TEST_CASE("future tokens never change earlier logits") {
    ModelConfig c = tiny();
    const auto p = random_params(c, 4).cast<float>();
    CounterRng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = random_tokens(rng, 14, c.vocab_size);
        auto b = a;
        const int cut = 1 + static_cast<int>(rng.uniform_below(13));
        for (int t = cut; t < 14; ++t) b[static_cast<std::size_t>(t)] = static_cast<TokenId>(rng.uniform_below(95));
        const auto la = forward<float>(p, a).logits, lb = forward<float>(p, b).logits;
        CHECK(la.topRows(cut) == lb.topRows(cut));
    }
}

TEST_CASE("single token logits depend only on that token") {
    ModelConfig c = tiny();
    const auto p = random_params(c, 9).cast<float>();
    const std::vector<TokenId> one{17};
    const std::vector<TokenId> two{17, 40};
    CHECK(forward<float>(p, one).logits.row(0).isApprox(forward<float>(p, two).logits.row(0), 1e-6F));
}

TEST_CASE("capture does not change logits") {
    ModelConfig c = tiny(1);
    const auto p = random_params(c, 11).cast<float>();
    CounterRng rng(12);
    const auto toks = random_tokens(rng, 10, c.vocab_size);
    CHECK(forward<float>(p, toks).logits == forward<float>(p, toks, CaptureSpec::all()).logits);
}

TEST_CASE("packed batch equals single-sequence forward") {
    ModelConfig c = tiny();
    const auto p = random_params(c, 13).cast<float>();
    CounterRng rng(14);
    std::vector<std::vector<TokenId>> seqs{random_tokens(rng, 5, 95), random_tokens(rng, 11, 95),
                                           random_tokens(rng, 1, 95)};
    const auto batch = forward_batch<float>(p, seqs);
    for (std::size_t s = 0; s < seqs.size(); ++s) CHECK(batch[s].isApprox(forward<float>(p, seqs[s]).logits, 1e-6F));
}

TEST_CASE("LayerNorm is invariant to a constant shift of its input") {
    // Shifting every coordinate of every positional embedding by c shifts
    // x_0 by c * 1, which the first LayerNorm removes.
    ModelConfig c = tiny();
    auto p = random_params(c, 15);
    CounterRng rng(16);
    const auto toks = random_tokens(rng, 9, 95);
    const auto base = forward<double>(p, toks, CaptureSpec::all());
    for (double shift : {-3.0, 0.25, 10.0}) {
        auto q = p;
        q.pos_emb.array() += shift;
        const auto r = forward<double>(q, toks, CaptureSpec::all());
        CHECK((r.cache.query[0] - base.cache.query[0]).cwiseAbs().maxCoeff() < 1e-5);
    }
}

TEST_CASE("grouped key/value heads share keys and values") {
    // A one-group model must equal a standard model whose two heads carry
    // copies of the same key and value projections.
    ModelConfig g = tiny(1), s = tiny(2);
    const auto pg = random_params(g, 17);
    auto ps = ModelParams<double>::zeros(s);
    ps.tok_emb = pg.tok_emb;
    ps.pos_emb = pg.pos_emb;
    ps.lnf_gain = pg.lnf_gain;
    ps.lnf_bias = pg.lnf_bias;
    ps.w_class = pg.w_class;
    ps.b_class = pg.b_class;
    const int dh = g.head_dim();
    for (std::size_t l = 0; l < pg.layers.size(); ++l) {
        const auto& a = pg.layers[l];
        auto& b = ps.layers[l];
        b.ln_gain = a.ln_gain;
        b.ln_bias = a.ln_bias;
        b.wq = a.wq;
        b.wo = a.wo;
        b.bo = a.bo;
        for (int h = 0; h < 2; ++h) {
            b.wk.middleRows(h * dh, dh) = a.wk;
            b.wv.middleRows(h * dh, dh) = a.wv;
        }
    }
    CounterRng rng(18);
    const auto toks = random_tokens(rng, 8, 95);
    const auto rg = forward<double>(pg, toks, CaptureSpec::all());
    const auto rs = forward<double>(ps, toks, CaptureSpec::all());
    CHECK((rg.logits - rs.logits).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(rs.cache.key[0].leftCols(dh) == rs.cache.key[0].rightCols(dh));
    CHECK(rg.cache.key[0].cols() == dh);
}

TEST_CASE("uniform logits give loss ln(vocab)") {
    ModelConfig c = tiny();
    auto p = ModelParams<double>::zeros(c);
    for (auto& L : p.layers) L.ln_gain.setOnes();
    p.lnf_gain.setOnes();
    std::vector<std::vector<TokenId>> seqs{{1, 2, 3, 4, 5}, {9, 8, 7}};
    CHECK(loss_only<double>(p, seqs) == doctest::Approx(std::log(95.0)).epsilon(1e-12));
}

// Largest per-entry relative error between analytic and central-difference
// gradients. `floor` bounds the denominator from below so entries that are
// nearly zero are compared in absolute terms.
double worst_gradient_error(ModelParams<double> p, std::span<const std::vector<TokenId>> seqs, double h,
                            double floor, std::string& where) {
    const auto lg = loss_and_grads<double>(p, seqs);
    std::vector<const double*> grads;
    lg.grads.visit([&](const std::string&, const double* d, Eigen::Index, Eigen::Index) { grads.push_back(d); });
    double worst = 0.0;
    std::size_t k = 0;
    p.visit([&](const std::string& name, double* d, Eigen::Index r, Eigen::Index cols) {
        const double* g = grads[k++];
        for (Eigen::Index i = 0; i < r * cols; ++i) {
            const double keep = d[i];
            d[i] = keep + h;
            const double up = loss_only<double>(p, seqs);
            d[i] = keep - h;
            const double down = loss_only<double>(p, seqs);
            d[i] = keep;
            const double fd = (up - down) / (2 * h);
            const double err = std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), floor});
            if (err > worst) {
                worst = err;
                where = name + "[" + std::to_string(i) + "]";
            }
        }
    });
    return worst;
}

TEST_CASE("analytic gradients match central finite differences") {
    for (int groups : {2, 1}) {
        ModelConfig c = tiny(groups);
        const auto p = random_params(c, 21 + static_cast<std::uint64_t>(groups));
        CounterRng rng(22);
        const std::vector<std::vector<TokenId>> seqs{random_tokens(rng, 12, 95), random_tokens(rng, 7, 95)};
        std::string where;
        // h = 1e-3 leaves a truncation error of a few 1e-6 on strongly curved
        // entries, hence the 1e-2 floor. The h = 1e-4 pass is the strict one.
        const double coarse = worst_gradient_error(p, seqs, 1e-3, 1e-2, where);
        INFO("kv_groups=" << groups << " h=1e-3 worst at " << where);
        CHECK(coarse < 1e-3);
        const double fine = worst_gradient_error(p, seqs, 1e-4, 1e-4, where);
        INFO("kv_groups=" << groups << " h=1e-4 worst at " << where);
        CHECK(fine < 1e-3);
    }
}

TEST_CASE("checkpoint round trip is bit exact") {
    ModelConfig c = tiny();
    const auto p = random_params(c, 30).cast<float>();
    const auto dir = std::filesystem::temp_directory_path() / "logicirc_ckpt_test";
    std::filesystem::remove_all(dir);
    save_checkpoint(dir, p, {{"iter", 5}});
    const auto ck = load_checkpoint(dir);
    CHECK(params_hash(ck.params) == params_hash(p));
    CHECK(ck.manifest["extra"]["iter"] == 5);
    CHECK(ck.params.config == c);
    std::filesystem::resize_file(dir / "w_class.f32", 12);
    CHECK_THROWS(load_checkpoint(dir));
    std::filesystem::remove_all(dir);
}
