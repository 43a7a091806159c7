#pragma once

// Versioned JSON reports shared by every experiment and the renderer.
//
// {
//   "schema": "logicirc-report", "schema_version": 1,
//   "kind": "patch-scan", "code_version": "...",
//   "config": {...}, "provenance": {...},
//   "results": {"<name>": {"type": "<payload type>", ...}, ...},
//   "acceptance": [{"id", "description", "value", "op", "threshold", "pass"}],
//   "timing": {"wall_clock_s": ...}
// }
//
// Everything but "timing" is a function of config, seeds and checkpoint.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "logicirc/attn_stats.hpp"
#include "logicirc/cma.hpp"

namespace logicirc {

inline constexpr const char* kReportSchema = "logicirc-report";
inline constexpr int kReportSchemaVersion = 1;

std::string code_version();

struct Acceptance {
    std::string id;
    std::string description;
    double value = 0.0;
    std::string op = ">=";  // value <op> threshold
    double threshold = 0.0;
    bool pass = false;

    static Acceptance check(std::string id, std::string description, double value, std::string op, double threshold);
};

struct ExperimentReport {
    std::string kind;
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json provenance = nlohmann::json::object();
    nlohmann::json results = nlohmann::json::object();
    std::vector<Acceptance> acceptance;
    double wall_clock_s = 0.0;

    bool all_pass() const;
};

nlohmann::json to_json(const ExperimentReport& r);
// Throws std::invalid_argument listing every schema violation.
ExperimentReport report_from_json(const nlohmann::json& j);
// Empty when the document is a valid report.
std::vector<std::string> validate_report(const nlohmann::json& j);

// Writes to a temporary file in the same directory, then renames.
void write_report(const std::filesystem::path& path, const ExperimentReport& r);
ExperimentReport read_report(const std::filesystem::path& path);

// Payloads. Figure-bearing types: head_grid, attention_stats, cosine_matrix,
// training_curve, sufficiency_table. Everything else uses "metrics".
nlohmann::json head_grid_payload(const ScoreGrid& g);
nlohmann::json attention_stats_payload(const std::vector<AttnStat>& stats);
nlohmann::json cosine_payload(const Eigen::MatrixXd& m, const std::vector<std::pair<std::string, int>>& groups);
nlohmann::json training_curve_payload(const std::filesystem::path& metrics_jsonl);
nlohmann::json sufficiency_payload(const SufficiencyResult& r, const CircuitSpec& circuit);
nlohmann::json metrics_payload(nlohmann::json values);

// Figure kinds ("head-grid", "attention-bars", "cosine-matrix",
// "training-curve", "sufficiency-table") a valid report can be rendered as.
std::vector<std::string> renderable_figures(const nlohmann::json& report);

}  // namespace logicirc
