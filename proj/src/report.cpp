#include "logicirc/report.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#ifndef LOGICIRC_VERSION
#define LOGICIRC_VERSION "unknown"
#endif

namespace logicirc {

using nlohmann::json;

namespace {

const std::map<std::string, std::string> kFigureOf = {
    {"head_grid", "head-grid"},
    {"attention_stats", "attention-bars"},
    {"cosine_matrix", "cosine-matrix"},
    {"training_curve", "training-curve"},
    {"sufficiency_table", "sufficiency-table"},
};

json num_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

bool is_num_or_null(const json& j) { return j.is_number() || j.is_null(); }

void need(std::vector<std::string>& errs, const json& j, const std::string& where, const std::string& key,
          bool (json::*pred)() const noexcept, const char* what) {
    if (!j.is_object() || !j.contains(key)) {
        errs.push_back(where + ": missing '" + key + "'");
    } else if (!(j.at(key).*pred)()) {
        errs.push_back(where + "." + key + ": expected " + what);
    }
}

void check_payload(std::vector<std::string>& errs, const std::string& where, const json& p) {
    if (!p.is_object() || !p.contains("type") || !p["type"].is_string()) {
        errs.push_back(where + ": payload needs a string 'type'");
        return;
    }
    const auto type = p["type"].get<std::string>();
    if (type == "head_grid") {
        need(errs, p, where, "layers", &json::is_number_integer, "integer");
        need(errs, p, where, "units", &json::is_number_integer, "integer");
        need(errs, p, where, "metric", &json::is_string, "string");
        need(errs, p, where, "cells", &json::is_array, "array");
        if (p.contains("cells") && p["cells"].is_array()) {
            std::size_t i = 0;
            for (const auto& c : p["cells"]) {
                const auto w = where + ".cells[" + std::to_string(i++) + "]";
                need(errs, c, w, "layer", &json::is_number_integer, "integer");
                need(errs, c, w, "unit", &json::is_number_integer, "integer");
                need(errs, c, w, "n", &json::is_number_integer, "integer");
                for (const char* k : {"mean", "std"})
                    if (!c.contains(k) || !is_num_or_null(c[k])) errs.push_back(w + ": '" + k + "' must be a number or null");
            }
            if (p.contains("layers") && p.contains("units") && p["layers"].is_number_integer() &&
                p["units"].is_number_integer() &&
                p["cells"].size() != p["layers"].get<std::size_t>() * p["units"].get<std::size_t>())
                errs.push_back(where + ": cell count does not match layers x units");
        }
    } else if (type == "attention_stats") {
        need(errs, p, where, "stats", &json::is_array, "array");
        if (p.contains("stats") && p["stats"].is_array()) {
            std::size_t i = 0;
            for (const auto& s : p["stats"]) {
                const auto w = where + ".stats[" + std::to_string(i++) + "]";
                need(errs, s, w, "layer", &json::is_number_integer, "integer");
                need(errs, s, w, "head", &json::is_number_integer, "integer");
                need(errs, s, w, "source", &json::is_string, "string");
                need(errs, s, w, "fractions", &json::is_object, "object");
                if (s.contains("fractions") && s["fractions"].is_object())
                    for (const auto& [r, f] : s["fractions"].items()) {
                        need(errs, f, w + ".fractions." + r, "mean", &json::is_number, "number");
                        need(errs, f, w + ".fractions." + r, "std", &json::is_number, "number");
                    }
            }
        }
    } else if (type == "cosine_matrix") {
        need(errs, p, where, "matrix", &json::is_array, "array");
        need(errs, p, where, "groups", &json::is_array, "array");
        if (p.contains("matrix") && p["matrix"].is_array()) {
            const auto n = p["matrix"].size();
            for (const auto& row : p["matrix"])
                if (!row.is_array() || row.size() != n) {
                    errs.push_back(where + ".matrix: not square");
                    break;
                }
        }
    } else if (type == "training_curve") {
        need(errs, p, where, "points", &json::is_array, "array");
        if (p.contains("points") && p["points"].is_array())
            for (const auto& pt : p["points"])
                if (!pt.contains("iter") || !pt.contains("loss")) {
                    errs.push_back(where + ".points: each point needs 'iter' and 'loss'");
                    break;
                }
    } else if (type == "sufficiency_table") {
        need(errs, p, where, "direction", &json::is_string, "string");
        need(errs, p, where, "rows", &json::is_array, "array");
        need(errs, p, where, "circuit", &json::is_array, "array");
        if (p.contains("rows") && p["rows"].is_array())
            for (const auto& r : p["rows"])
                if (!r.contains("label") || !r.contains("ratio")) {
                    errs.push_back(where + ".rows: each row needs 'label' and 'ratio'");
                    break;
                }
    } else if (type == "metrics") {
        need(errs, p, where, "values", &json::is_object, "object");
    } else {
        errs.push_back(where + ": unknown payload type '" + type + "'");
    }
}

}  // namespace

std::string code_version() { return LOGICIRC_VERSION; }

Acceptance Acceptance::check(std::string id, std::string description, double value, std::string op,
                             double threshold) {
    bool pass = false;
    if (op == ">=") pass = value >= threshold;
    else if (op == ">") pass = value > threshold;
    else if (op == "<=") pass = value <= threshold;
    else if (op == "<") pass = value < threshold;
    else throw std::invalid_argument("unknown comparison '" + op + "'");
    if (!std::isfinite(value)) pass = false;
    return {std::move(id), std::move(description), value, std::move(op), threshold, pass};
}

bool ExperimentReport::all_pass() const {
    for (const auto& a : acceptance)
        if (!a.pass) return false;
    return true;
}

json to_json(const ExperimentReport& r) {
    json acc = json::array();
    for (const auto& a : r.acceptance)
        acc.push_back({{"id", a.id},
                       {"description", a.description},
                       {"value", num_or_null(a.value)},
                       {"op", a.op},
                       {"threshold", a.threshold},
                       {"pass", a.pass}});
    return {{"schema", kReportSchema},
            {"schema_version", kReportSchemaVersion},
            {"kind", r.kind},
            {"code_version", code_version()},
            {"config", r.config},
            {"provenance", r.provenance},
            {"results", r.results},
            {"acceptance", acc},
            {"timing", {{"wall_clock_s", r.wall_clock_s}}}};
}

std::vector<std::string> validate_report(const json& j) {
    std::vector<std::string> errs;
    if (!j.is_object()) return {"report: not a JSON object"};
    static const std::set<std::string> known = {"schema",  "schema_version", "kind",       "code_version", "config",
                                                "provenance", "results",     "acceptance", "timing"};
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) errs.push_back("report: unknown key '" + k + "'");
    if (!j.contains("schema") || j["schema"] != kReportSchema) errs.push_back("report: 'schema' must be \"logicirc-report\"");
    if (!j.contains("schema_version") || !j["schema_version"].is_number_integer())
        errs.push_back("report: missing 'schema_version'");
    else if (j["schema_version"].get<int>() != kReportSchemaVersion)
        errs.push_back("report: unsupported schema_version " + j["schema_version"].dump());
    need(errs, j, "report", "kind", &json::is_string, "string");
    need(errs, j, "report", "code_version", &json::is_string, "string");
    need(errs, j, "report", "config", &json::is_object, "object");
    need(errs, j, "report", "provenance", &json::is_object, "object");
    need(errs, j, "report", "results", &json::is_object, "object");
    need(errs, j, "report", "acceptance", &json::is_array, "array");
    need(errs, j, "report", "timing", &json::is_object, "object");
    if (j.contains("results") && j["results"].is_object())
        for (const auto& [name, p] : j["results"].items()) check_payload(errs, "results." + name, p);
    if (j.contains("acceptance") && j["acceptance"].is_array()) {
        std::size_t i = 0;
        for (const auto& a : j["acceptance"]) {
            const auto w = "acceptance[" + std::to_string(i++) + "]";
            need(errs, a, w, "id", &json::is_string, "string");
            need(errs, a, w, "op", &json::is_string, "string");
            need(errs, a, w, "threshold", &json::is_number, "number");
            need(errs, a, w, "pass", &json::is_boolean, "boolean");
            if (!a.contains("value") || !is_num_or_null(a["value"])) errs.push_back(w + ": 'value' must be a number or null");
        }
    }
    return errs;
}

ExperimentReport report_from_json(const json& j) {
    const auto errs = validate_report(j);
    if (!errs.empty()) {
        std::string msg = "invalid report:";
        for (const auto& e : errs) msg += "\n  " + e;
        throw std::invalid_argument(msg);
    }
    ExperimentReport r;
    r.kind = j["kind"];
    r.config = j["config"];
    r.provenance = j["provenance"];
    r.results = j["results"];
    for (const auto& a : j["acceptance"]) {
        Acceptance x;
        x.id = a["id"];
        x.description = a.value("description", "");
        x.value = a["value"].is_null() ? std::nan("") : a["value"].get<double>();
        x.op = a["op"];
        x.threshold = a["threshold"];
        x.pass = a["pass"];
        r.acceptance.push_back(std::move(x));
    }
    r.wall_clock_s = j["timing"].value("wall_clock_s", 0.0);
    return r;
}

void write_report(const std::filesystem::path& path, const ExperimentReport& r) {
    const json j = to_json(r);
    const auto errs = validate_report(j);
    if (!errs.empty()) throw std::logic_error("refusing to write an invalid report: " + errs.front());
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp);
        out << j.dump(2) << '\n';
        if (!out) throw std::runtime_error("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

ExperimentReport read_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report " + path.string());
    return report_from_json(json::parse(in));
}

json head_grid_payload(const ScoreGrid& g) {
    json j = to_json(g);
    j["type"] = "head_grid";
    return j;
}

json attention_stats_payload(const std::vector<AttnStat>& stats) {
    json arr = json::array();
    for (const auto& s : stats) arr.push_back(to_json(s));
    return {{"type", "attention_stats"}, {"stats", arr}};
}

json cosine_payload(const Eigen::MatrixXd& m, const std::vector<std::pair<std::string, int>>& groups) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
        rows.push_back(row);
    }
    json g = json::array();
    for (const auto& [name, size] : groups) g.push_back({{"name", name}, {"size", size}});
    return {{"type", "cosine_matrix"}, {"matrix", rows}, {"groups", g}};
}

json training_curve_payload(const std::filesystem::path& metrics_jsonl) {
    std::ifstream in(metrics_jsonl);
    if (!in) throw std::runtime_error("cannot open " + metrics_jsonl.string());
    json points = json::array(), evals = json::array();
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = json::parse(line);
        if (j.contains("loss")) points.push_back({{"iter", j["iter"]}, {"loss", j["loss"]}, {"lr", j.value("lr", 0.0)}});
        if (j.contains("eval_exact_match"))
            evals.push_back({{"iter", j["iter"]}, {"exact_match", j["eval_exact_match"]},
                             {"first_token", j.value("eval_first_token", 0.0)}});
    }
    return {{"type", "training_curve"}, {"points", points}, {"evals", evals}};
}

json sufficiency_payload(const SufficiencyResult& r, const CircuitSpec& circuit) {
    json j = to_json(r);
    j["type"] = "sufficiency_table";
    j["circuit"] = to_json(circuit);
    return j;
}

json metrics_payload(json values) { return {{"type", "metrics"}, {"values", std::move(values)}}; }

std::vector<std::string> renderable_figures(const json& report) {
    const auto errs = validate_report(report);
    if (!errs.empty()) throw std::invalid_argument("invalid report: " + errs.front());
    std::set<std::string> kinds;
    for (const auto& [name, p] : report["results"].items()) {
        const auto it = kFigureOf.find(p["type"].get<std::string>());
        if (it != kFigureOf.end()) kinds.insert(it->second);
    }
    return {kinds.begin(), kinds.end()};
}

}  // namespace logicirc
