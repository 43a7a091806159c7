#pragma once

// Config-driven experiments. A config is one JSON object; see README for the
// full key list. Unknown keys are rejected with their path.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "logicirc/cma.hpp"
#include "logicirc/model.hpp"
#include "logicirc/probe.hpp"
#include "logicirc/report.hpp"

namespace logicirc {

struct GenOptions {
    std::size_t train_n = 500000;
    std::size_t test_n = 5000;
    std::uint64_t seed = 1;
};

struct PatchOptions {
    CounterfactualKind counterfactual = CounterfactualKind::QueryFlip;
    SubComponent sub = SubComponent::Output;
    Region region = Region::OnAfterQuery;
    Granularity granularity = Granularity::Head;
    Metric metric = Metric::Calibrated;
    int n = 0;  // 0: 60 pairs, 200 for key scans
};

struct SufficiencyOptions {
    CounterfactualKind counterfactual = CounterfactualKind::QueryFlip;
    Direction direction = Direction::Normal;
    int n = 60;
    int top_k = 4;
    std::vector<std::vector<int>> bands;  // empty: all layers form one band
    std::vector<HeadFamily> families;     // empty: chosen from a fresh output scan
};

struct ProbeOptions {
    // evidence2, contrast, evidence3a, evidence3b, evidence3c, evidence3d, truth
    std::vector<std::string> which = {"evidence2", "contrast", "evidence3a", "evidence3b",
                                      "evidence3c", "evidence3d", "truth"};
    int steps = 2000;
    int multilabel_steps = 4000;
    // A single ad-hoc probe instead of the named ones when `site` is set.
    // site: "residual:2@query_pos", "block_output:1@answer_pos",
    // "head_output_concat:2:0,2@answer_pos"; target: linear_start,
    // logop_start, first_token, logop_kind, logop_roots, final_truth;
    // query: linear, logop or mixed.
    std::string site;
    std::string target = "linear_start";
    std::string query = "mixed";
    int n_train = 5000;
    int n_test = 5000;
};

FeatureSite parse_feature_site(std::string_view s);

struct RouteOptions {
    int n_estimate = 1000;
    int n_eval = 500;
    int block = 1;
    std::vector<std::string> interventions = {"subtract", "add"};  // empty: estimate only
};

struct StatsOptions {
    int n = 1000;
    int cosine_n = 100;  // per group
};

struct ResidualPatchOptions {
    int n = 1000;  // pairs per seed
    int layer = 2;
};

struct ExperimentConfig {
    // train | patch-scan | sufficiency | probe | route | stats | residual-patch | full-replication
    std::string kind;
    std::vector<std::uint64_t> seeds = {1};
    std::string checkpoint;  // model directory
    std::string data;        // dataset directory with train.jsonl / test.jsonl
    std::string out;         // report file; a directory for train and full-replication
    int chain_length = 3;
    int pool_size = 80;
    double scale = 1.0;       // multiplies analysis sample counts
    bool thresholds = false;  // attach acceptance rows; the CLI exit code follows them
    GenOptions gen;
    nlohmann::json train = nlohmann::json::object();  // {"model": {...}, "train": {...}, "init_seed": n}
    PatchOptions patch;
    SufficiencyOptions sufficiency;
    ProbeOptions probe;
    RouteOptions route;
    StatsOptions stats;
    ResidualPatchOptions residual_patch;
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);

// Shared inputs of the analysis stages.
struct Analysis {
    const Params& params;
    std::uint64_t seed = 1;
    double scale = 1.0;
    int chain_length = 3;
    bool thresholds = false;

    std::size_t scaled(int n, int at_least = 1) const;
    int pool() const { return params.config.vocab_size - Vocab::kNumSpecial; }
};

// Balanced evaluation problems (both chains equally likely), optionally of
// one query type. Each (seed, stream) gives an independent set.
std::vector<Problem> draw_problems(std::size_t n, std::uint64_t seed, std::uint64_t stream, int chain_length,
                                   int pool, std::optional<Chain> only = std::nullopt);

// Stages append payloads to report.results and, with thresholds on,
// acceptance rows.
void stage_exact_match(const Analysis& a, std::span<const Problem> heldout, ExperimentReport& report);
void stage_attention_stats(const Analysis& a, const StatsOptions& o, ExperimentReport& report);
void stage_probes(const Analysis& a, const ProbeOptions& o, ExperimentReport& report);
void stage_route(const Analysis& a, const RouteOptions& o, ExperimentReport& report);
void stage_residual_patch(const Analysis& a, std::span<const std::uint64_t> seeds, const ResidualPatchOptions& o,
                          ExperimentReport& report);
ScoreGrid stage_patch_scan(const Analysis& a, const PatchOptions& o, ExperimentReport& report);
void stage_sufficiency(const Analysis& a, const SufficiencyOptions& o, ExperimentReport& report);

// Dispatches on cfg.kind and writes the report to cfg.out when set.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

// gen-data -> train (skipped when cfg.checkpoint exists) -> attention stats
// -> probes -> routing -> residual patch -> patch scan -> sufficiency, one
// report per stage plus a summary, all under cfg.out.
std::vector<ExperimentReport> full_replication(const ExperimentConfig& cfg);

}  // namespace logicirc
