#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "logicirc/dataset.hpp"
#include "logicirc/model.hpp"

namespace logicirc {

struct TrainConfig {
    double lr = 5e-5;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 128;
    int total_iters = 20000;
    int warmup_iters = 1700;
    std::string schedule = "cosine";  // "cosine" | "constant" (after warmup)
    std::uint64_t seed = 1;
    bool answer_only_loss = false;

    int log_every = 50;
    int eval_every = 2000;
    int eval_samples = 1000;
    int checkpoint_every = 1000;
    int divergence_window = 1000;
    double divergence_factor = 2.0;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
// Rejects unknown keys.
TrainConfig train_config_from_json(const nlohmann::json& j);

// Linear warmup from 0 to the peak, then cosine decay to 0 at total_iters.
double lr_at(const TrainConfig& c, int iter);

class AdamW {
public:
    AdamW() = default;
    AdamW(const ModelConfig& config, double beta1, double beta2, double eps);

    // Decoupled weight decay: p -= lr * (wd * p + mhat / (sqrt(vhat) + eps)).
    void step(Params& params, const Params& grads, double lr, double weight_decay);

    std::int64_t steps() const { return t_; }
    void save(const std::filesystem::path& dir) const;
    void load(const std::filesystem::path& dir);

private:
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::int64_t t_ = 0;
    Params m_, v_;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainIo {
    // Empty: nothing written. Otherwise metrics.jsonl, checkpoints/last and
    // final/ go here.
    std::filesystem::path out_dir;
    bool resume = false;
    std::ostream* progress = nullptr;
};

struct TrainResult {
    Params params;
    int iters_done = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;  // mean over the last log window
    double eval_exact_match = -1.0;
};

// Trains on context+answer sequences of `train`. `eval` (may be null) is
// scored by exact match every eval_every iterations and at the end.
TrainResult train(Params params, const DatasetFile& train_set, const DatasetFile* eval, const TrainConfig& tc,
                  const TrainIo& io = {});

}  // namespace logicirc
