#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "logicirc/report.hpp"

using namespace logicirc;
using nlohmann::json;

namespace {

std::filesystem::path scratch(const std::string& name) {
    auto d = std::filesystem::temp_directory_path() / ("logicirc_report_" + name);
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

ScoreGrid tiny_grid() {
    ScoreGrid g;
    g.layers = 2;
    g.units = 2;
    for (int l = 0; l < 2; ++l)
        for (int u = 0; u < 2; ++u) g.cells.push_back({l, u, {0.1 * (l + u), 0.01, 60, false}});
    g.cells[3].score.mean = std::nan("");
    return g;
}

ExperimentReport sample_report() {
    ExperimentReport r;
    r.kind = "patch-scan";
    r.config = {{"seeds", {1}}};
    r.provenance = {{"checkpoint_hash", "00ff"}};
    r.results["grid"] = head_grid_payload(tiny_grid());
    r.results["m"] = metrics_payload({{"x", 1.5}});
    Eigen::MatrixXd m(2, 2);
    m << 1, 0.2, 0.2, 1;
    r.results["cos"] = cosine_payload(m, {{"a", 1}, {"b", 1}});
    r.acceptance.push_back(Acceptance::check("P0", "x above one", 1.5, ">=", 1.0));
    r.wall_clock_s = 3.25;
    return r;
}

}  // namespace

TEST_CASE("acceptance comparisons") {
    CHECK(Acceptance::check("a", "", 1.0, ">=", 1.0).pass);
    CHECK_FALSE(Acceptance::check("a", "", 1.0, ">", 1.0).pass);
    CHECK(Acceptance::check("a", "", -0.5, "<=", -0.5).pass);
    CHECK_FALSE(Acceptance::check("a", "", std::nan(""), "<", 1.0).pass);
    CHECK_THROWS_AS(Acceptance::check("a", "", 1.0, "==", 1.0), std::invalid_argument);
}

TEST_CASE("report round trip keeps every field") {
    const auto r = sample_report();
    const json j = to_json(r);
    CHECK(validate_report(j).empty());
    CHECK(j["schema"] == "logicirc-report");
    CHECK(j["results"]["grid"]["cells"][3]["mean"].is_null());
    const auto back = report_from_json(j);
    CHECK(back.kind == r.kind);
    CHECK(back.config == r.config);
    CHECK(back.results == r.results);
    REQUIRE(back.acceptance.size() == 1);
    CHECK(back.acceptance[0].pass);
    CHECK(back.wall_clock_s == 3.25);
    CHECK(to_json(back) == j);
}

TEST_CASE("validation names the problem") {
    json j = to_json(sample_report());
    j["surprise"] = 1;
    auto errs = validate_report(j);
    REQUIRE(errs.size() == 1);
    CHECK(errs[0].find("surprise") != std::string::npos);

    j = to_json(sample_report());
    j["schema_version"] = 2;
    CHECK_FALSE(validate_report(j).empty());

    j = to_json(sample_report());
    j["results"]["grid"]["cells"].erase(0);
    errs = validate_report(j);
    REQUIRE_FALSE(errs.empty());
    CHECK(errs[0].find("cell count") != std::string::npos);

    j = to_json(sample_report());
    j["results"]["bad"] = {{"type", "pie_chart"}};
    errs = validate_report(j);
    REQUIRE(errs.size() == 1);
    CHECK(errs[0].find("pie_chart") != std::string::npos);

    j = to_json(sample_report());
    j["results"]["cos"]["matrix"][0].push_back(0.0);
    CHECK_FALSE(validate_report(j).empty());

    j = to_json(sample_report());
    j.erase("acceptance");
    CHECK_THROWS_AS(report_from_json(j), std::invalid_argument);
    CHECK_FALSE(validate_report(json::array()).empty());
}

TEST_CASE("write_report is atomic and refuses invalid reports") {
    const auto dir = scratch("write");
    const auto path = dir / "sub" / "r.json";
    write_report(path, sample_report());
    CHECK(std::filesystem::exists(path));
    CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));
    CHECK(to_json(read_report(path)) == to_json(sample_report()));

    auto bad = sample_report();
    bad.results["x"] = {{"type", "nope"}};
    CHECK_THROWS_AS(write_report(dir / "bad.json", bad), std::logic_error);
    CHECK_FALSE(std::filesystem::exists(dir / "bad.json"));

    std::ofstream(dir / "broken.json") << "{\"schema\": 1}";
    CHECK_THROWS(read_report(dir / "broken.json"));
    CHECK_THROWS(read_report(dir / "missing.json"));
}

TEST_CASE("renderable figures follow payload types") {
    auto r = sample_report();
    auto figs = renderable_figures(to_json(r));
    CHECK(figs == std::vector<std::string>{"cosine-matrix", "head-grid"});

    AttnStat s;
    s.layer = 2;
    s.head = 1;
    s.source = Region::AnswerPos;
    s.fractions[Region::QueryPos] = {0.9, 0.05, 10};
    r.results["attn"] = attention_stats_payload({s});
    SufficiencyResult suf;
    suf.clean_gap = 2.0;
    suf.rows = {{"C", 1.0, 0.0}, {"C_null", -0.7, 0.1}};
    r.results["suf"] = sufficiency_payload(suf, CircuitSpec{{{"layer0", {{0, 1}}}}});
    figs = renderable_figures(to_json(r));
    CHECK(figs.size() == 4);

    const auto dir = scratch("curve");
    std::ofstream(dir / "metrics.jsonl") << "{\"iter\":0,\"loss\":4.5,\"lr\":0}\n"
                                         << "{\"iter\":50,\"loss\":2.0,\"lr\":1e-5}\n"
                                         << "{\"iter\":50,\"eval_n\":10,\"eval_exact_match\":0.5,\"eval_first_token\":0.7}\n";
    r.results["curve"] = training_curve_payload(dir / "metrics.jsonl");
    CHECK(r.results["curve"]["points"].size() == 2);
    CHECK(r.results["curve"]["evals"].size() == 1);
    CHECK(renderable_figures(to_json(r)).size() == 5);

    json bad = to_json(r);
    bad.erase("kind");
    CHECK_THROWS_AS(renderable_figures(bad), std::invalid_argument);
}
