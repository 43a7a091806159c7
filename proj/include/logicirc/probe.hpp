#pragma once

// Linear probes on cached activations, the routing direction and the
// interventions built on it.

#include <array>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "logicirc/cma.hpp"
#include "logicirc/logic.hpp"
#include "logicirc/model.hpp"
#include "logicirc/vocab.hpp"

namespace logicirc {

enum class Stream : std::uint8_t { Residual, BlockOutput, HeadOutputConcat };
std::string_view to_string(Stream s);
Stream stream_from_string(std::string_view s);

struct FeatureSite {
    Stream stream = Stream::Residual;
    int layer = 2;           // residual index, or block index for the other streams
    std::vector<int> heads;  // HeadOutputConcat only, concatenated in this order
    PositionSpec position = PositionSpec::of(Region::QueryPos);  // must resolve to one position

    std::string describe() const;
};

// One row per problem, computed on the context (ending with ANSWER).
Eigen::MatrixXd collect_features(const Params& params, std::span<const Problem> problems, const FeatureSite& site);

// Probe targets. Variable targets are pool indices.
int target_linear_start(const Problem& p);
// First answer variable the problem would have with the LogOp chain queried.
int target_logop_start(const Problem& p);
// An acceptable first answer variable; ties broken by `rng`.
int target_first_token(const Problem& p, CounterRng& rng);
int target_logop_kind(const Problem& p);  // 0 = and, 1 = or
std::array<int, 2> target_logop_roots(const Problem& p);
int target_final_truth(const Problem& p);  // 0 TRUE, 1 FALSE, 2 UNDETERMINED

enum class ProbeLoss : std::uint8_t { CrossEntropy, BinaryCrossEntropy };

struct ProbeConfig {
    double lr = 5e-3;
    double weight_decay = 1e-2;
    int steps = 2000;  // full-batch AdamW steps
    double init_scale = 1e-3;
    std::uint64_t seed = 0;
};

struct AffineProbe {
    Eigen::MatrixXd weight;  // classes x d_in
    Eigen::VectorXd bias;
    ProbeLoss loss = ProbeLoss::CrossEntropy;
    ProbeConfig config;

    Eigen::MatrixXd scores(const Eigen::MatrixXd& x) const;  // n x classes
};

struct ProbeResult {
    AffineProbe probe;
    double train_acc = 0.0;
    double test_acc = 0.0;
};

// Multiclass probe; targets index classes in [0, classes).
ProbeResult train_affine_probe(const Eigen::MatrixXd& x_train, std::span<const int> y_train,
                               const Eigen::MatrixXd& x_test, std::span<const int> y_test, int classes,
                               const ProbeConfig& cfg = {});

// Sigmoid + BCE over `labels` outputs. Accuracy is the rate at which the two
// highest scores are exactly the two targets.
ProbeResult train_multilabel_probe(const Eigen::MatrixXd& x_train, std::span<const std::array<int, 2>> y_train,
                                   const Eigen::MatrixXd& x_test, std::span<const std::array<int, 2>> y_test,
                                   int labels, const ProbeConfig& cfg = {.lr = 0.5e-3});

double accuracy(const AffineProbe& probe, const Eigen::MatrixXd& x, std::span<const int> y);
double top2_accuracy(const AffineProbe& probe, const Eigen::MatrixXd& x, std::span<const std::array<int, 2>> y);

struct ProjectionStats {
    std::size_t n = 0;
    double mean = 0.0;
    double positive_rate = 0.0;
    double negative_rate = 0.0;
};

struct RoutingDirection {
    Eigen::VectorXd h;  // raw mean, not normalized
    FeatureSite site;
    std::size_t n = 0;
    ProjectionStats linear_heldout;  // projections onto h / |h|
    ProjectionStats logop_heldout;
};

// Mean attention-block output of block `block` at QueryPos over linear-queried
// problems. The held-out sets may be empty.
RoutingDirection estimate_direction(const Params& params, std::span<const Problem> linear_queried,
                                    std::span<const Problem> heldout_linear = {},
                                    std::span<const Problem> heldout_logop = {}, int block = 1);

ProjectionStats projection_stats(const Eigen::MatrixXd& features, const Eigen::VectorXd& h);

enum class RouteMode : std::uint8_t { Add, Subtract };

struct RouteEval {
    std::size_t n = 0;
    double counterpart_rate = 0.0;  // predicts an acceptable first token of the other chain
    double accuracy = 0.0;          // first token still correct for the asked chain
    double layer3_query_attention = 0.0;  // last block, ANSWER -> QueryPos, mean over heads
};

// Shifts the attention-block output of `block` at QueryPos by +h or -h.
RouteEval direction_intervention_eval(const Params& params, std::span<const Problem> problems, RouteMode mode,
                                      const Eigen::VectorXd& h, int block = 1);

// Exact-match accuracy with and without patching residual[layer] at ANSWER
// from the LogOp-flipped twin.
struct ResidualPatchEval {
    std::size_t n = 0;
    double clean_exact = 0.0;
    double patched_exact = 0.0;
    double degradation() const { return clean_exact - patched_exact; }
};
ResidualPatchEval residual_patch_eval(const Params& params, std::span<const PromptPair> logop_flip_pairs,
                                      int layer = 2);

nlohmann::json to_json(const ProjectionStats& s);
nlohmann::json to_json(const RouteEval& r);

}  // namespace logicirc
