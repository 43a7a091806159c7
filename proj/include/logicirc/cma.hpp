#pragma once

// Counterfactual prompt pairs, activation patching and circuit sufficiency.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "logicirc/attn_stats.hpp"
#include "logicirc/logic.hpp"
#include "logicirc/model.hpp"
#include "logicirc/parallel.hpp"
#include "logicirc/vocab.hpp"

namespace logicirc {

enum class CounterfactualKind : std::uint8_t {
    QueryFlip,         // ask for the other chain's conclusion
    RuleLocationSwap,  // exchange the places of the LogOp rule and the last linear rule
    FactFlip,          // LogOp chain queried, root values [x, !x] become [!x, x]
    LogOpFlip,         // "and" <-> "or", roots with mixed values
};

std::string_view to_string(CounterfactualKind k);
CounterfactualKind counterfactual_from_string(std::string_view s);

struct PromptPair {
    CounterfactualKind kind = CounterfactualKind::QueryFlip;
    Problem orig_problem, alt_problem;
    TokenSeq orig, alt;  // contexts, ending with ANSWER
    TokenId y_orig = 0;  // first answer token (canonical proof) of each prompt
    TokenId y_alt = 0;
};

bool applicable(const Problem& p, CounterfactualKind kind);
// Throws std::invalid_argument if the kind does not apply to the problem.
PromptPair make_pair(const Problem& p, CounterfactualKind kind, const Vocab& vocab);
// Samples problems until `n` of them admit the kind.
std::vector<PromptPair> sample_pairs(CounterfactualKind kind, std::size_t n, const SamplingSpec& spec,
                                     CounterRng& rng, const Vocab& vocab);

enum class SubComponent : std::uint8_t { Output, Query, Key, Value, Residual, Embedding };
std::string_view to_string(SubComponent s);
SubComponent sub_component_from_string(std::string_view s);

// Absolute positions or one symbolic region resolved per sample.
struct PositionSpec {
    std::optional<Region> region;
    std::vector<int> absolute;

    static PositionSpec of(Region r) { return {r, {}}; }
    std::vector<int> resolve(const RegionMap& rm) const;
    std::string describe() const;
};

struct InterventionSpec {
    SubComponent sub = SubComponent::Output;
    int layer = 0;
    int unit = -1;  // head for Output/Query, kv-group for Key/Value, -1 for all
    PositionSpec positions;
};

// Runs `tokens` with each spec's activations replaced by the donor's.
ForwardResult<float> patched_forward(const Params& params, std::span<const TokenId> tokens,
                                     std::span<const InterventionSpec> interventions, const Cache& donor,
                                     const RegionMap& regions, const CaptureSpec& capture = CaptureSpec::none());

struct Deltas {
    double orig_dagger = 0.0;         // mean logit_orig[y_alt] - logit_orig[y_orig]
    double alt = 0.0;                 // mean logit_alt[y_alt] - logit_alt[y_orig]
    std::vector<double> intervened;   // per sample, same difference under intervention
};

struct Score {
    double mean = 0.0;
    double std = 0.0;  // population std of per-sample values
    std::size_t n = 0;
    bool degenerate = false;
};

// (mean intervened - orig_dagger) / (alt - orig_dagger). A denominator <= 0 is
// flagged degenerate; the score is then 0 when nothing moved and NaN otherwise.
Score calibrated_score(const Deltas& d);

enum class Granularity : std::uint8_t { Head, KvGroup };
enum class Metric : std::uint8_t { Calibrated, LossIncrease };

struct ScanConfig {
    SubComponent sub = SubComponent::Output;
    PositionSpec positions = PositionSpec::of(Region::OnAfterQuery);
    Granularity granularity = Granularity::Head;
    Metric metric = Metric::Calibrated;
};

struct SiteScore {
    int layer = 0;
    int unit = 0;
    Score score;
};

struct ScoreGrid {
    ScanConfig config;
    int layers = 0;
    int units = 0;
    std::vector<SiteScore> cells;  // layer-major
    double orig_dagger = 0.0;
    double alt = 0.0;
    double clean_loss = 0.0;

    const SiteScore& at(int layer, int unit) const;
    double max_mean() const;
};

// Interventions that patch one (layer, unit) cell of a scan.
std::vector<InterventionSpec> scan_site(const ModelConfig& c, const ScanConfig& cfg, int layer, int unit);

// Patches each site of the alt run into the orig run, one site at a time.
// Work is spread over LOGICIRC_WORKERS threads.
ScoreGrid patch_scan(const Params& params, std::span<const PromptPair> pairs, const ScanConfig& cfg);

struct HeadRef {
    int layer = 0;
    int head = 0;
    auto operator<=>(const HeadRef&) const = default;
};

struct HeadFamily {
    std::string name;
    std::vector<HeadRef> heads;
    PositionSpec positions = PositionSpec::of(Region::OnAfterQuery);
};

struct CircuitSpec {
    std::vector<HeadFamily> families;

    static CircuitSpec all_heads(const ModelConfig& c);
    // Heads appearing in more than one family.
    std::vector<std::string> overlap_warnings() const;
};

enum class Direction : std::uint8_t {
    Normal,  // run orig, freeze the complement to alt, divide by the clean orig gap
    Alt,     // run alt, freeze the complement to orig, divide by the clean alt gap
};

struct SufficiencyRow {
    std::string label;  // "C", "C_null", "C - <family>"
    double ratio = 0.0;
    double std = 0.0;   // of per-sample gaps over the clean mean gap
};

struct SufficiencyResult {
    Direction direction = Direction::Normal;
    double clean_gap = 0.0;
    std::vector<SufficiencyRow> rows;
    std::vector<std::string> warnings;

    double ratio(const std::string& label) const;
};

// Every (head, position) in OnAfterQuery that is not kept by the circuit is
// frozen to the counterfactual run's head output.
SufficiencyResult circuit_sufficiency(const Params& params, std::span<const PromptPair> pairs,
                                      const CircuitSpec& circuit, Direction direction = Direction::Normal);

// Top-k heads by mean calibrated score across each band of layers, grouped
// into one family per layer.
CircuitSpec select_circuit(const ScoreGrid& grid, int k, const std::vector<std::vector<int>>& bands);

nlohmann::json to_json(const ScoreGrid& g);
nlohmann::json to_json(const SufficiencyResult& r);
nlohmann::json to_json(const CircuitSpec& c);

}  // namespace logicirc
