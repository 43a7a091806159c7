#include "logicirc/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <set>

#include "logicirc/inference.hpp"

namespace logicirc {

using nlohmann::json;

void TrainConfig::validate() const {
    auto req = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument("invalid train config: " + what);
    };
    req(lr > 0 && std::isfinite(lr), "lr must be positive");
    req(weight_decay >= 0, "weight_decay must be >= 0");
    req(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "betas must lie in [0, 1)");
    req(batch_size > 0, "batch_size must be positive");
    req(total_iters > 0, "total_iters must be positive");
    req(warmup_iters >= 0 && warmup_iters <= total_iters, "warmup_iters must be in [0, total_iters]");
    req(schedule == "cosine" || schedule == "constant", "schedule must be cosine or constant");
    req(log_every > 0 && eval_every > 0 && checkpoint_every > 0, "cadences must be positive");
    req(divergence_window > 0 && divergence_factor > 1, "divergence guard needs window > 0 and factor > 1");
}

json to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"batch_size", c.batch_size},
            {"total_iters", c.total_iters},
            {"warmup_iters", c.warmup_iters},
            {"schedule", c.schedule},
            {"seed", c.seed},
            {"answer_only_loss", c.answer_only_loss},
            {"log_every", c.log_every},
            {"eval_every", c.eval_every},
            {"eval_samples", c.eval_samples},
            {"checkpoint_every", c.checkpoint_every},
            {"divergence_window", c.divergence_window},
            {"divergence_factor", c.divergence_factor}};
}

TrainConfig train_config_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
    TrainConfig c;
    const json defaults = to_json(c);
    for (const auto& [k, v] : j.items())
        if (!defaults.contains(k)) throw std::invalid_argument("unknown train config key '" + k + "'");
    auto get = [&](const char* k, auto& field) {
        if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
    };
    get("lr", c.lr);
    get("weight_decay", c.weight_decay);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("adam_eps", c.adam_eps);
    get("batch_size", c.batch_size);
    get("total_iters", c.total_iters);
    get("warmup_iters", c.warmup_iters);
    get("schedule", c.schedule);
    get("seed", c.seed);
    get("answer_only_loss", c.answer_only_loss);
    get("log_every", c.log_every);
    get("eval_every", c.eval_every);
    get("eval_samples", c.eval_samples);
    get("checkpoint_every", c.checkpoint_every);
    get("divergence_window", c.divergence_window);
    get("divergence_factor", c.divergence_factor);
    c.validate();
    return c;
}

double lr_at(const TrainConfig& c, int iter) {
    if (iter <= 0) return c.warmup_iters == 0 ? c.lr : 0.0;
    if (iter < c.warmup_iters) return c.lr * static_cast<double>(iter) / static_cast<double>(c.warmup_iters);
    if (c.schedule == "constant") return c.lr;
    if (iter >= c.total_iters) return 0.0;
    const double span = static_cast<double>(c.total_iters - c.warmup_iters);
    const double progress = static_cast<double>(iter - c.warmup_iters) / span;
    return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(const ModelConfig& config, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(Params::zeros(config)), v_(Params::zeros(config)) {}

void AdamW::step(Params& params, const Params& grads, double lr, double weight_decay) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::vector<float*> pm, pv;
    std::vector<const float*> pg;
    m_.visit([&](const std::string&, float* d, Eigen::Index, Eigen::Index) { pm.push_back(d); });
    v_.visit([&](const std::string&, float* d, Eigen::Index, Eigen::Index) { pv.push_back(d); });
    grads.visit([&](const std::string&, const float* d, Eigen::Index, Eigen::Index) { pg.push_back(d); });
    std::size_t k = 0;
    const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
    const float step = static_cast<float>(lr / bc1);
    const float inv_bc2 = static_cast<float>(1.0 / bc2);
    const float decay = static_cast<float>(1.0 - lr * weight_decay);
    const float eps = static_cast<float>(eps_);
    params.visit([&](const std::string&, float* p, Eigen::Index r, Eigen::Index c) {
        float* m = pm[k];
        float* v = pv[k];
        const float* g = pg[k];
        ++k;
        for (Eigen::Index i = 0; i < r * c; ++i) {
            m[i] = b1 * m[i] + (1.0F - b1) * g[i];
            v[i] = b2 * v[i] + (1.0F - b2) * g[i] * g[i];
            p[i] = p[i] * decay - step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
        }
    });
}

void AdamW::save(const std::filesystem::path& dir) const {
    save_checkpoint(dir / "m", m_, {{"t", t_}});
    save_checkpoint(dir / "v", v_, {{"t", t_}});
}

void AdamW::load(const std::filesystem::path& dir) {
    auto m = load_checkpoint(dir / "m");
    auto v = load_checkpoint(dir / "v");
    m_ = std::move(m.params);
    v_ = std::move(v.params);
    t_ = m.manifest.at("extra").at("t").get<std::int64_t>();
}

namespace {

constexpr std::uint64_t kShuffleStream = 0xba7c0000;

// Deterministic epoch-wise order: batch i covers positions [i*B, (i+1)*B) of
// the concatenation of per-epoch permutations.
class BatchOrder {
public:
    BatchOrder(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}

    std::vector<std::size_t> batch(int iter, int batch_size) {
        std::vector<std::size_t> out;
        out.reserve(static_cast<std::size_t>(batch_size));
        std::uint64_t pos = static_cast<std::uint64_t>(iter) * static_cast<std::uint64_t>(batch_size);
        for (int i = 0; i < batch_size; ++i, ++pos) {
            const std::uint64_t epoch = pos / n_;
            if (epoch != epoch_ || perm_.empty()) load(epoch);
            out.push_back(perm_[pos % n_]);
        }
        return out;
    }

private:
    void load(std::uint64_t epoch) {
        perm_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
        CounterRng rng(seed_, kShuffleStream + epoch);
        rng.shuffle(std::span<std::size_t>(perm_));
        epoch_ = epoch;
    }

    std::size_t n_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::vector<std::size_t> perm_;
};

void append_jsonl(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path, std::ios::app);
    out << j.dump() << '\n';
}

}  // namespace

TrainResult train(Params params, const DatasetFile& train_set, const DatasetFile* eval, const TrainConfig& tc,
                  const TrainIo& io) {
    tc.validate();
    if (train_set.records.empty()) throw std::invalid_argument("training set is empty");
    const Vocab vocab(train_set.header.pool_size);
    if (vocab.size() != params.config.vocab_size)
        throw std::invalid_argument("dataset vocabulary does not match the model");

    std::vector<std::vector<TokenId>> seqs;
    seqs.reserve(train_set.records.size());
    for (const auto& r : train_set.records) {
        auto s = r.context;
        s.insert(s.end(), r.answer.begin(), r.answer.end());
        if (static_cast<int>(s.size()) > params.config.max_seq_len)
            throw std::invalid_argument("training sequence longer than max_seq_len");
        seqs.push_back(std::move(s));
    }
    std::vector<Problem> eval_problems;
    if (eval) {
        const std::size_t n = std::min<std::size_t>(eval->records.size(), static_cast<std::size_t>(tc.eval_samples));
        for (std::size_t i = 0; i < n; ++i) eval_problems.push_back(eval->records[i].problem);
    }

    const bool write = !io.out_dir.empty();
    const auto metrics_path = io.out_dir / "metrics.jsonl";
    const auto last_dir = io.out_dir / "checkpoints" / "last";
    AdamW opt(params.config, tc.beta1, tc.beta2, tc.adam_eps);
    TrainResult res;
    int start_iter = 0;
    if (write) {
        std::filesystem::create_directories(io.out_dir);
        if (io.resume && std::filesystem::exists(last_dir / "manifest.json")) {
            auto ck = load_checkpoint(last_dir);
            if (!(ck.params.config == params.config)) throw std::invalid_argument("resume checkpoint config differs");
            params = std::move(ck.params);
            opt.load(last_dir / "optim");
            start_iter = ck.manifest.at("extra").at("iter").get<int>();
            res.initial_loss = ck.manifest.at("extra").at("initial_loss").get<double>();
        } else {
            std::filesystem::remove(metrics_path);
        }
    }

    auto checkpoint = [&](const std::filesystem::path& dir, int iter) {
        save_checkpoint(dir, params,
                        {{"iter", iter}, {"initial_loss", res.initial_loss}, {"train_config", to_json(tc)},
                         {"data_seed", train_set.header.seed}, {"train_n", train_set.records.size()}});
        opt.save(dir / "optim");
    };
    auto run_eval = [&](int iter) {
        if (eval_problems.empty()) return;
        const auto st = evaluate_exact_match(params, eval_problems, vocab);
        res.eval_exact_match = st.exact_rate();
        const json j = {{"iter", iter}, {"eval_n", st.n}, {"eval_exact_match", st.exact_rate()},
                        {"eval_first_token", st.first_token_rate()}};
        if (write) append_jsonl(metrics_path, j);
        if (io.progress) *io.progress << j.dump() << std::endl;
    };

    BatchOrder order(seqs.size(), tc.seed);
    const auto t0 = std::chrono::steady_clock::now();
    double window_loss = 0.0;
    int window_n = 0;
    int above = 0;
    std::vector<std::vector<TokenId>> batch;
    for (int iter = start_iter; iter < tc.total_iters; ++iter) {
        batch.clear();
        LossRegion region;
        for (std::size_t idx : order.batch(iter, tc.batch_size)) {
            batch.push_back(seqs[idx]);
            if (tc.answer_only_loss)
                region.start.push_back(static_cast<int>(train_set.records[idx].context.size()) - 1);
        }
        auto lg = loss_and_grads<float>(params, batch, region);
        if (iter == 0) res.initial_loss = lg.loss;
        above = lg.loss > tc.divergence_factor * res.initial_loss ? above + 1 : 0;
        if (above >= tc.divergence_window) {
            if (write) checkpoint(io.out_dir / "checkpoints" / "diverged", iter);
            throw TrainingDiverged("loss stayed above " + std::to_string(tc.divergence_factor) +
                                   "x the initial loss for " + std::to_string(above) + " iterations at iter " +
                                   std::to_string(iter));
        }
        const double lr = lr_at(tc, iter);
        opt.step(params, lg.grads, lr, tc.weight_decay);
        window_loss += lg.loss;
        ++window_n;
        const int done = iter + 1;
        if (done % tc.log_every == 0 || done == tc.total_iters) {
            const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            res.final_loss = window_loss / window_n;
            const json j = {{"iter", done}, {"loss", res.final_loss}, {"lr", lr}, {"elapsed_s", elapsed}};
            if (write) append_jsonl(metrics_path, j);
            if (io.progress) *io.progress << j.dump() << std::endl;
            window_loss = 0.0;
            window_n = 0;
        }
        if (done % tc.eval_every == 0 && done != tc.total_iters) run_eval(done);
        if (write && done % tc.checkpoint_every == 0) checkpoint(last_dir, done);
        if (!params.all_finite()) throw std::runtime_error("non-finite parameters at iter " + std::to_string(done));
    }
    run_eval(tc.total_iters);
    res.iters_done = tc.total_iters;
    if (write) checkpoint(io.out_dir / "final", tc.total_iters);
    res.params = std::move(params);
    return res;
}

}  // namespace logicirc
