#include "logicirc/experiment.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <set>
#include <stdexcept>

#include "logicirc/dataset.hpp"
#include "logicirc/inference.hpp"
#include "logicirc/parallel.hpp"
#include "logicirc/train.hpp"

namespace logicirc {

using nlohmann::json;

namespace {

// Independent sample streams per stage, so that stages can be rerun alone.
constexpr std::uint64_t kStatsLinear = 0x5701, kStatsLogOp = 0x5702, kCosLinear = 0x5703, kCosLogOp = 0x5704;
constexpr std::uint64_t kProbeTrain = 0x9b00, kProbeTest = 0x9c00;
constexpr std::uint64_t kRouteEstimate = 0x4001, kRouteHeldLinear = 0x4002, kRouteHeldLogOp = 0x4003,
                        kRouteSubtract = 0x4004, kRouteAdd = 0x4005;
constexpr std::uint64_t kResidPatch = 0x3e00;
constexpr std::uint64_t kPatchPairs = 0xca00, kSufficiencyPairs = 0xcb00, kCircuitScan = 0xcc00;

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// ---- config parsing -------------------------------------------------------

void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw std::invalid_argument("config " + (where.empty() ? "root" : "'" + where + "'") + " must be an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || k == a;
        if (!ok) throw std::invalid_argument("unknown config key '" + (where.empty() ? k : where + "." + k) + "'");
    }
}

template <class T>
void read(const json& j, const std::string& where, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw std::invalid_argument("config key '" + (where.empty() ? std::string(key) : where + "." + key) +
                                    "': " + e.what());
    }
}

template <class T, class F>
void read_enum(const json& j, const std::string& where, const char* key, T& out, F parse) {
    std::string s;
    read(j, where, key, s);
    if (s.empty()) return;
    try {
        out = parse(s);
    } catch (const std::exception& e) {
        throw std::invalid_argument("config key '" + where + "." + key + "': " + e.what());
    }
}

Granularity granularity_from(std::string_view s) {
    if (s == "head") return Granularity::Head;
    if (s == "kv_group") return Granularity::KvGroup;
    throw std::invalid_argument("unknown granularity '" + std::string(s) + "'");
}
Metric metric_from(std::string_view s) {
    if (s == "calibrated") return Metric::Calibrated;
    if (s == "loss_increase") return Metric::LossIncrease;
    throw std::invalid_argument("unknown metric '" + std::string(s) + "'");
}
Direction direction_from(std::string_view s) {
    if (s == "normal") return Direction::Normal;
    if (s == "alt") return Direction::Alt;
    throw std::invalid_argument("unknown direction '" + std::string(s) + "'");
}

const std::set<std::string> kKinds = {"train",      "patch-scan",     "sufficiency", "probe", "route",
                                      "stats",      "residual-patch", "full-replication"};
const std::set<std::string> kTargets = {"linear_start", "logop_start", "first_token",
                                        "logop_kind",   "logop_roots", "final_truth"};
const std::set<std::string> kProbes = {"evidence2", "contrast", "evidence3a", "evidence3b",
                                       "evidence3c", "evidence3d", "truth"};

HeadFamily family_from_json(const json& j, const std::string& where) {
    only_keys(j, where, {"name", "heads", "positions"});
    HeadFamily f;
    read(j, where, "name", f.name);
    if (f.name.empty()) throw std::invalid_argument("config key '" + where + ".name' is required");
    std::vector<std::array<int, 2>> heads;
    read(j, where, "heads", heads);
    for (const auto& [l, h] : heads) f.heads.push_back({l, h});
    read_enum(j, where, "positions", f.positions, [](std::string_view s) { return PositionSpec::of(region_from_string(s)); });
    return f;
}

// ---- small helpers --------------------------------------------------------

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return v.empty() ? 0.0 : std::sqrt(s / static_cast<double>(v.size()));
}

json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

Vocab vocab_of(const Params& params) { return Vocab(params.config.vocab_size - Vocab::kNumSpecial); }

void accept(const Analysis& a, ExperimentReport& r, std::string id, std::string what, double value, std::string op,
            double threshold) {
    if (a.thresholds) r.acceptance.push_back(Acceptance::check(std::move(id), std::move(what), value, std::move(op), threshold));
}

std::vector<int> targets(std::span<const Problem> ps, int (*f)(const Problem&)) {
    std::vector<int> y;
    y.reserve(ps.size());
    for (const auto& p : ps) y.push_back(f(p));
    return y;
}

json probe_values(const ProbeResult& r, std::size_t n_train, std::size_t n_test, const std::string& site) {
    return {{"train_acc", r.train_acc}, {"test_acc", r.test_acc}, {"n_train", n_train}, {"n_test", n_test},
            {"site", site}};
}

// Residual stream at the last position of each sequence.
Eigen::MatrixXd last_position_residual(const Params& params, const std::vector<std::vector<TokenId>>& seqs, int layer) {
    if (layer < 0 || layer > params.config.layers) throw std::invalid_argument("residual index out of range");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(seqs.size()), params.config.d_model);
    CaptureSpec cap;
    cap.residual = true;
    parallel_for(seqs.size(), [&](std::size_t i) {
        const auto r = forward<float>(params, seqs[i], cap);
        x.row(static_cast<Eigen::Index>(i)) = r.cache.residual[layer].row(r.cache.seq_len - 1).cast<double>();
    });
    return x;
}

// Context plus the canonical answer, cut right after the query variable of
// the final conclusion ("... A" of "... A TRUE.").
std::vector<TokenId> up_to_final_truth(const Problem& p, const Vocab& vocab) {
    auto ids = encode(p, vocab, true).ids;
    if (ids.size() < 3) throw std::logic_error("answer too short");
    ids.resize(ids.size() - 2);
    return ids;
}

std::vector<AttnStat> attention_over(const Params& params, std::span<const Problem> problems, int layer,
                                     std::span<const Region> regions) {
    const Vocab vocab = vocab_of(params);
    std::vector<Cache> caches(problems.size());
    std::vector<RegionMap> maps(problems.size());
    CaptureSpec cap;
    cap.attention = true;
    parallel_for(problems.size(), [&](std::size_t i) {
        const auto t = encode(problems[i], vocab, false);
        maps[i] = region_map(problems[i], t, vocab);
        caches[i] = forward<float>(params, t.ids, cap).cache;
    });
    std::vector<AttnSample> samples;
    for (std::size_t i = 0; i < problems.size(); ++i) samples.push_back({&caches[i], &maps[i]});
    std::vector<AttnStat> out;
    for (int h = 0; h < params.config.heads; ++h)
        out.push_back(attention_region_stats(samples, layer, h, Region::AnswerPos, regions));
    return out;
}

}  // namespace

FeatureSite parse_feature_site(std::string_view s) {
    const auto at = s.find('@');
    if (at == std::string_view::npos) throw std::invalid_argument("feature site needs '@<region>'");
    FeatureSite f;
    f.position = PositionSpec::of(region_from_string(s.substr(at + 1)));
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : s.substr(0, at)) {
        if (ch == ':') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    parts.push_back(cur);
    if (parts.size() < 2) throw std::invalid_argument("feature site needs '<stream>:<layer>'");
    f.stream = stream_from_string(parts[0]);
    std::size_t used = 0;
    f.layer = std::stoi(parts[1], &used);
    if (used != parts[1].size()) throw std::invalid_argument("bad layer '" + parts[1] + "'");
    if (f.stream == Stream::HeadOutputConcat) {
        if (parts.size() != 3) throw std::invalid_argument("head_output_concat needs ':<h>,<h>...'");
        std::string h;
        for (char ch : parts[2] + ",") {
            if (ch == ',') {
                if (h.empty()) throw std::invalid_argument("empty head index");
                f.heads.push_back(std::stoi(h));
                h.clear();
            } else {
                h += ch;
            }
        }
    } else if (parts.size() != 2) {
        throw std::invalid_argument("only head_output_concat takes a head list");
    }
    return f;
}

namespace {

void custom_probe(const Analysis& a, const ProbeOptions& o, ExperimentReport& report) {
    const auto site = parse_feature_site(o.site);
    std::optional<Chain> only;
    if (o.query == "linear") only = Chain::Linear;
    if (o.query == "logop") only = Chain::LogOp;
    const auto tr = draw_problems(a.scaled(o.n_train, 2), a.seed, kProbeTrain + 0xad, a.chain_length, a.pool(), only);
    const auto te = draw_problems(a.scaled(o.n_test, 2), a.seed, kProbeTest + 0xad, a.chain_length, a.pool(), only);
    const auto xtr = collect_features(a.params, tr, site);
    const auto xte = collect_features(a.params, te, site);
    ProbeConfig pc;
    pc.steps = o.steps;
    pc.seed = a.seed;
    ProbeResult r;
    if (o.target == "logop_roots") {
        std::vector<std::array<int, 2>> ytr, yte;
        for (const auto& p : tr) ytr.push_back(target_logop_roots(p));
        for (const auto& p : te) yte.push_back(target_logop_roots(p));
        pc.lr = 0.5e-3;
        pc.steps = o.multilabel_steps;
        r = train_multilabel_probe(xtr, ytr, xte, yte, a.pool(), pc);
    } else {
        int classes = a.pool();
        std::vector<int> ytr, yte;
        if (o.target == "first_token") {
            CounterRng tie(a.seed, 0xad);
            for (const auto& p : tr) ytr.push_back(target_first_token(p, tie));
            for (const auto& p : te) yte.push_back(target_first_token(p, tie));
        } else {
            int (*f)(const Problem&) = target_linear_start;
            if (o.target == "logop_start") f = target_logop_start;
            if (o.target == "logop_kind") f = target_logop_kind, classes = 2;
            if (o.target == "final_truth") f = target_final_truth, classes = 3;
            ytr = targets(tr, f);
            yte = targets(te, f);
        }
        r = train_affine_probe(xtr, ytr, xte, yte, classes, pc);
    }
    json v = probe_values(r, tr.size(), te.size(), site.describe());
    v["target"] = o.target;
    v["query"] = o.query;
    report.results["probe"] = metrics_payload(v);
}

}  // namespace

// ---- config ---------------------------------------------------------------

ExperimentConfig experiment_config_from_json(const json& j) {
    only_keys(j, "", {"kind", "seeds", "checkpoint", "data", "out", "chain_length", "pool_size", "scale", "thresholds",
                      "gen", "train", "patch", "sufficiency", "probe", "route", "stats", "residual_patch"});
    ExperimentConfig c;
    read(j, "", "kind", c.kind);
    if (!kKinds.count(c.kind)) throw std::invalid_argument("config key 'kind': unknown experiment kind '" + c.kind + "'");
    read(j, "", "seeds", c.seeds);
    if (c.seeds.empty()) throw std::invalid_argument("config key 'seeds': need at least one seed");
    read(j, "", "checkpoint", c.checkpoint);
    read(j, "", "data", c.data);
    read(j, "", "out", c.out);
    read(j, "", "chain_length", c.chain_length);
    if (c.chain_length != 2 && c.chain_length != 3) throw std::invalid_argument("config key 'chain_length': must be 2 or 3");
    read(j, "", "pool_size", c.pool_size);
    read(j, "", "scale", c.scale);
    if (!(c.scale > 0.0)) throw std::invalid_argument("config key 'scale': must be positive");
    read(j, "", "thresholds", c.thresholds);

    if (j.contains("gen")) {
        const auto& g = j["gen"];
        only_keys(g, "gen", {"train_n", "test_n", "seed"});
        read(g, "gen", "train_n", c.gen.train_n);
        read(g, "gen", "test_n", c.gen.test_n);
        read(g, "gen", "seed", c.gen.seed);
    }
    if (j.contains("train")) {
        only_keys(j["train"], "train", {"model", "train", "init_seed"});
        c.train = j["train"];
        // Surface nested errors now rather than hours into a pipeline.
        if (c.train.contains("train")) {
            try {
                train_config_from_json(c.train["train"]);
            } catch (const std::exception& e) {
                throw std::invalid_argument(std::string("config key 'train.train': ") + e.what());
            }
        }
        if (c.train.contains("model")) {
            json mj = to_json(ModelConfig{});
            for (const auto& [k, v] : c.train["model"].items())
                if (!mj.contains(k)) throw std::invalid_argument("unknown config key 'train.model." + k + "'");
        }
    }
    if (j.contains("patch")) {
        const auto& p = j["patch"];
        only_keys(p, "patch", {"counterfactual", "sub", "region", "granularity", "metric", "n"});
        read_enum(p, "patch", "counterfactual", c.patch.counterfactual, counterfactual_from_string);
        read_enum(p, "patch", "sub", c.patch.sub, sub_component_from_string);
        read_enum(p, "patch", "region", c.patch.region, region_from_string);
        read_enum(p, "patch", "granularity", c.patch.granularity, granularity_from);
        read_enum(p, "patch", "metric", c.patch.metric, metric_from);
        read(p, "patch", "n", c.patch.n);
    }
    if (j.contains("sufficiency")) {
        const auto& s = j["sufficiency"];
        only_keys(s, "sufficiency", {"counterfactual", "direction", "n", "top_k", "bands", "families"});
        read_enum(s, "sufficiency", "counterfactual", c.sufficiency.counterfactual, counterfactual_from_string);
        read_enum(s, "sufficiency", "direction", c.sufficiency.direction, direction_from);
        read(s, "sufficiency", "n", c.sufficiency.n);
        read(s, "sufficiency", "top_k", c.sufficiency.top_k);
        read(s, "sufficiency", "bands", c.sufficiency.bands);
        if (s.contains("families")) {
            if (!s["families"].is_array()) throw std::invalid_argument("config key 'sufficiency.families': expected array");
            for (std::size_t i = 0; i < s["families"].size(); ++i)
                c.sufficiency.families.push_back(
                    family_from_json(s["families"][i], "sufficiency.families[" + std::to_string(i) + "]"));
        }
    }
    if (j.contains("probe")) {
        const auto& p = j["probe"];
        only_keys(p, "probe", {"which", "steps", "multilabel_steps", "site", "target", "query", "n_train", "n_test"});
        read(p, "probe", "which", c.probe.which);
        for (const auto& w : c.probe.which)
            if (!kProbes.count(w)) throw std::invalid_argument("config key 'probe.which': unknown probe '" + w + "'");
        read(p, "probe", "steps", c.probe.steps);
        read(p, "probe", "multilabel_steps", c.probe.multilabel_steps);
        read(p, "probe", "site", c.probe.site);
        read(p, "probe", "target", c.probe.target);
        read(p, "probe", "query", c.probe.query);
        read(p, "probe", "n_train", c.probe.n_train);
        read(p, "probe", "n_test", c.probe.n_test);
        if (!c.probe.site.empty()) {
            try {
                parse_feature_site(c.probe.site);
            } catch (const std::exception& e) {
                throw std::invalid_argument(std::string("config key 'probe.site': ") + e.what());
            }
        }
        if (!kTargets.count(c.probe.target))
            throw std::invalid_argument("config key 'probe.target': unknown target '" + c.probe.target + "'");
        if (c.probe.query != "linear" && c.probe.query != "logop" && c.probe.query != "mixed")
            throw std::invalid_argument("config key 'probe.query': expected linear, logop or mixed");
    }
    if (j.contains("route")) {
        const auto& r = j["route"];
        only_keys(r, "route", {"n_estimate", "n_eval", "block", "interventions"});
        read(r, "route", "interventions", c.route.interventions);
        for (const auto& m : c.route.interventions)
            if (m != "add" && m != "subtract")
                throw std::invalid_argument("config key 'route.interventions': unknown mode '" + m + "'");
        read(r, "route", "n_estimate", c.route.n_estimate);
        read(r, "route", "n_eval", c.route.n_eval);
        read(r, "route", "block", c.route.block);
    }
    if (j.contains("stats")) {
        const auto& s = j["stats"];
        only_keys(s, "stats", {"n", "cosine_n"});
        read(s, "stats", "n", c.stats.n);
        read(s, "stats", "cosine_n", c.stats.cosine_n);
    }
    if (j.contains("residual_patch")) {
        const auto& r = j["residual_patch"];
        only_keys(r, "residual_patch", {"n", "layer"});
        read(r, "residual_patch", "n", c.residual_patch.n);
        read(r, "residual_patch", "layer", c.residual_patch.layer);
    }
    return c;
}

json to_json(const ExperimentConfig& c) {
    json fams = json::array();
    for (const auto& f : c.sufficiency.families) {
        json heads = json::array();
        for (const auto& h : f.heads) heads.push_back({h.layer, h.head});
        fams.push_back({{"name", f.name}, {"heads", heads}, {"positions", f.positions.describe()}});
    }
    return {{"kind", c.kind},
            {"seeds", c.seeds},
            {"checkpoint", c.checkpoint},
            {"data", c.data},
            {"out", c.out},
            {"chain_length", c.chain_length},
            {"pool_size", c.pool_size},
            {"scale", c.scale},
            {"thresholds", c.thresholds},
            {"gen", {{"train_n", c.gen.train_n}, {"test_n", c.gen.test_n}, {"seed", c.gen.seed}}},
            {"train", c.train},
            {"patch",
             {{"counterfactual", std::string(to_string(c.patch.counterfactual))},
              {"sub", std::string(to_string(c.patch.sub))},
              {"region", std::string(to_string(c.patch.region))},
              {"granularity", c.patch.granularity == Granularity::Head ? "head" : "kv_group"},
              {"metric", c.patch.metric == Metric::Calibrated ? "calibrated" : "loss_increase"},
              {"n", c.patch.n}}},
            {"sufficiency",
             {{"counterfactual", std::string(to_string(c.sufficiency.counterfactual))},
              {"direction", c.sufficiency.direction == Direction::Normal ? "normal" : "alt"},
              {"n", c.sufficiency.n},
              {"top_k", c.sufficiency.top_k},
              {"bands", c.sufficiency.bands},
              {"families", fams}}},
            {"probe",
             {{"which", c.probe.which},
              {"steps", c.probe.steps},
              {"multilabel_steps", c.probe.multilabel_steps},
              {"site", c.probe.site},
              {"target", c.probe.target},
              {"query", c.probe.query},
              {"n_train", c.probe.n_train},
              {"n_test", c.probe.n_test}}},
            {"route",
             {{"n_estimate", c.route.n_estimate},
              {"n_eval", c.route.n_eval},
              {"block", c.route.block},
              {"interventions", c.route.interventions}}},
            {"stats", {{"n", c.stats.n}, {"cosine_n", c.stats.cosine_n}}},
            {"residual_patch", {{"n", c.residual_patch.n}, {"layer", c.residual_patch.layer}}}};
}

// ---- sampling -------------------------------------------------------------

std::size_t Analysis::scaled(int n, int at_least) const {
    const auto s = static_cast<long long>(std::llround(static_cast<double>(n) * scale));
    return static_cast<std::size_t>(std::max<long long>(s, at_least));
}

std::vector<Problem> draw_problems(std::size_t n, std::uint64_t seed, std::uint64_t stream, int chain_length, int pool,
                                   std::optional<Chain> only) {
    auto spec = SamplingSpec::balanced(chain_length, pool);
    if (only) spec.logop_query_prob = *only == Chain::LogOp ? 1.0 : 0.0;
    CounterRng rng(seed, stream);
    std::vector<Problem> out;
    out.reserve(n);
    while (out.size() < n) out.push_back(sample_problem(rng, spec));
    return out;
}

// ---- stages ---------------------------------------------------------------

void stage_exact_match(const Analysis& a, std::span<const Problem> heldout, ExperimentReport& report) {
    const auto st = evaluate_exact_match(a.params, heldout, vocab_of(a.params));
    report.results["exact_match"] = metrics_payload({{"n", st.n},
                                                     {"exact_match", st.exact_rate()},
                                                     {"first_token", st.first_token_rate()}});
    accept(a, report, "P4", "exact-match accuracy on held-out problems", st.exact_rate(), ">=", 0.90);
}

void stage_attention_stats(const Analysis& a, const StatsOptions& o, ExperimentReport& report) {
    const auto& c = a.params.config;
    const int last = c.layers - 1;
    const std::size_t n = a.scaled(o.n);
    const auto lin = draw_problems(n, a.seed, kStatsLinear, a.chain_length, a.pool(), Chain::Linear);
    const auto lop = draw_problems(n, a.seed, kStatsLogOp, a.chain_length, a.pool(), Chain::LogOp);
    const std::vector<Region> regions = {Region::QueryPos,        Region::RulesSection,   Region::FactsSection,
                                         Region::QuerySection,    Region::QueriedRuleSpan, Region::CorrectFactSpan,
                                         Region::CorrectAnswerTokens};
    const auto s_lin = attention_over(a.params, lin, last, regions);
    const auto s_lop = attention_over(a.params, lop, last, regions);
    report.results["attention_linear_queried"] = attention_stats_payload(s_lin);
    report.results["attention_logop_queried"] = attention_stats_payload(s_lop);

    auto query_mean = [](const std::vector<AttnStat>& s) {
        double m = 0.0;
        for (const auto& x : s) m += x.fractions.at(Region::QueryPos).mean;
        return m / static_cast<double>(s.size());
    };
    const double q_lin = query_mean(s_lin), q_lop = query_mean(s_lop);

    // Chain-type separation of the block-1 attention output at QueryPos.
    const std::size_t m = a.scaled(o.cosine_n, 2);
    const auto cl = draw_problems(m, a.seed, kCosLinear, a.chain_length, a.pool(), Chain::Linear);
    const auto cg = draw_problems(m, a.seed, kCosLogOp, a.chain_length, a.pool(), Chain::LogOp);
    FeatureSite site{Stream::BlockOutput, std::min(1, last), {}, PositionSpec::of(Region::QueryPos)};
    const auto fl = collect_features(a.params, cl, site);
    const auto fg = collect_features(a.params, cg, site);
    std::vector<Eigen::VectorXd> vecs;
    for (Eigen::Index i = 0; i < fl.rows(); ++i) vecs.push_back(fl.row(i).transpose());
    for (Eigen::Index i = 0; i < fg.rows(); ++i) vecs.push_back(fg.row(i).transpose());
    const auto cos = cosine_matrix(vecs);
    const auto gc = group_cosine(cos, static_cast<int>(m));
    report.results["chain_type_cosine"] = cosine_payload(cos, {{"linear", static_cast<int>(m)}, {"logop", static_cast<int>(m)}});
    report.results["attention_summary"] = metrics_payload({{"n_per_group", n},
                                                           {"last_layer_query_attention_linear", q_lin},
                                                           {"last_layer_query_attention_logop", q_lop},
                                                           {"cosine_site", site.describe()},
                                                           {"cosine_n_per_group", m},
                                                           {"within_linear", gc.within_first},
                                                           {"within_logop", gc.within_second},
                                                           {"within", gc.within},
                                                           {"cross", gc.cross}});
    accept(a, report, "P5.linear", "last-layer QueryPos attention from ANSWER, linear queried", q_lin, ">", 0.80);
    accept(a, report, "P5.logop", "last-layer QueryPos attention from ANSWER, LogOp queried", q_lop, "<", 0.15);
    accept(a, report, "P6.within", "mean within-group cosine of block-1 outputs at QueryPos", gc.within, ">", 0.3);
    accept(a, report, "P6.cross", "mean cross-group cosine of block-1 outputs at QueryPos", gc.cross, "<", 0.0);
}

void stage_probes(const Analysis& a, const ProbeOptions& o, ExperimentReport& report) {
    const auto& c = a.params.config;
    const Vocab vocab = vocab_of(a.params);
    const int pool = a.pool();
    const int mid = std::min(2, c.layers);
    if (!o.site.empty()) {
        custom_probe(a, o, report);
        return;
    }
    auto want = [&](const char* w) { return std::find(o.which.begin(), o.which.end(), w) != o.which.end(); };
    ProbeConfig pc;
    pc.steps = o.steps;
    pc.seed = a.seed;
    auto draw = [&](int n, std::uint64_t stream, std::optional<Chain> only) {
        return draw_problems(a.scaled(n, 2), a.seed, stream, a.chain_length, pool, only);
    };

    if (want("evidence2") || want("contrast")) {
        const auto tr = draw(5000, kProbeTrain + 2, Chain::Linear);
        const auto te = draw(5000, kProbeTest + 2, Chain::Linear);
        const FeatureSite site{Stream::Residual, mid, {}, PositionSpec::of(Region::QueryPos)};
        const auto xtr = collect_features(a.params, tr, site);
        const auto xte = collect_features(a.params, te, site);
        if (want("evidence2")) {
            const auto r = train_affine_probe(xtr, targets(tr, target_linear_start), xte,
                                              targets(te, target_linear_start), pool, pc);
            report.results["probe_evidence2"] = metrics_payload(probe_values(r, tr.size(), te.size(), site.describe()));
            accept(a, report, "P7.evidence2", "linear-chain start decoded at QueryPos, test accuracy", r.test_acc, ">=", 0.90);
        }
        if (want("contrast")) {
            const auto r = train_affine_probe(xtr, targets(tr, target_logop_start), xte,
                                              targets(te, target_logop_start), pool, pc);
            report.results["probe_contrast"] = metrics_payload(probe_values(r, tr.size(), te.size(), site.describe()));
            accept(a, report, "P7.contrast", "LogOp start decoded at QueryPos (linear queried), test accuracy",
                   r.test_acc, "<=", 0.5);
            accept(a, report, "P7.contrast_gap", "contrast probe train minus test accuracy", r.train_acc - r.test_acc,
                   ">=", 0.3);
        }
    }

    if (want("evidence3a")) {
        const auto tr = draw(10000, kProbeTrain + 0x3a, std::nullopt);
        const auto te = draw(5000, kProbeTest + 0x3a, std::nullopt);
        CounterRng tie(a.seed, 0x3a3a);
        std::vector<int> ytr;
        for (const auto& p : tr) ytr.push_back(target_first_token(p, tie));
        std::vector<int> yte;
        for (const auto& p : te) yte.push_back(target_first_token(p, tie));
        json values = json::object();
        for (const auto& [name, site] :
             {std::pair<std::string, FeatureSite>{"residual", {Stream::Residual, mid, {}, PositionSpec::of(Region::AnswerPos)}},
              std::pair<std::string, FeatureSite>{"last_block_output",
                                                  {Stream::BlockOutput, c.layers - 1, {}, PositionSpec::of(Region::AnswerPos)}}}) {
            const auto xtr = collect_features(a.params, tr, site);
            const auto xte = collect_features(a.params, te, site);
            const auto r = train_affine_probe(xtr, ytr, xte, yte, pool, pc);
            // A prediction counts if it is any acceptable first variable.
            const Eigen::MatrixXd sc = r.probe.scores(xte);
            std::size_t ok = 0;
            // On LogOp-queried problems with mixed roots: how often the
            // prediction is the FALSE root (and) or the TRUE root (or).
            std::size_t and_n = 0, and_false = 0, or_n = 0, or_true = 0;
            for (std::size_t i = 0; i < te.size(); ++i) {
                Eigen::Index arg = 0;
                sc.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
                const Var pred{static_cast<std::uint16_t>(arg)};
                std::set<Var> acceptable;
                for (const auto& pr : minimal_proofs(te[i])) acceptable.insert(*pr.first_variable());
                ok += acceptable.count(pred);
                const auto& p = te[i];
                if (p.meta.queried != Chain::LogOp) continue;
                const auto roots = p.logop_roots();
                const bool v0 = *p.fact_value(roots[0]), v1 = *p.fact_value(roots[1]);
                if (v0 == v1) continue;
                const auto fv = p.fact_value(pred);
                if (p.logop() == LogOp::And) {
                    ++and_n;
                    and_false += fv && !*fv;
                } else {
                    ++or_n;
                    or_true += fv && *fv;
                }
            }
            json v = probe_values(r, tr.size(), te.size(), site.describe());
            v["test_acc_any_answer"] = static_cast<double>(ok) / static_cast<double>(te.size());
            v["and_mixed_predicts_false_var"] = and_n ? static_cast<double>(and_false) / and_n : 0.0;
            v["or_mixed_predicts_true_var"] = or_n ? static_cast<double>(or_true) / or_n : 0.0;
            values[name] = v;
        }
        report.results["probe_evidence3a"] = metrics_payload(values);
    }

    if (want("evidence3b")) {
        const auto tr = draw(5000, kProbeTrain + 0x3b, std::nullopt);
        const auto te = draw(5000, kProbeTest + 0x3b, std::nullopt);
        json values = json::object();
        double at_mid = 0.0;
        for (int layer : {1, mid}) {
            const FeatureSite site{Stream::Residual, layer, {}, PositionSpec::of(Region::AnswerPos)};
            const auto r = train_affine_probe(collect_features(a.params, tr, site), targets(tr, target_logop_kind),
                                              collect_features(a.params, te, site), targets(te, target_logop_kind), 2, pc);
            values[site.describe()] = probe_values(r, tr.size(), te.size(), site.describe());
            if (layer == mid) at_mid = r.test_acc;
        }
        report.results["probe_evidence3b"] = metrics_payload(values);
        accept(a, report, "P7.evidence3b", "LogOp kind decoded from the layer-2 residual, test accuracy", at_mid, ">=", 0.90);
    }

    if (want("evidence3c")) {
        // The two last-layer heads attending most to the rules from ANSWER.
        const int last = c.layers - 1;
        const auto pick = draw(500, kProbeTrain + 0x3c0, Chain::LogOp);
        const std::vector<Region> rules = {Region::RulesSection};
        const auto st = attention_over(a.params, pick, last, rules);
        std::vector<int> order(static_cast<std::size_t>(c.heads));
        for (int h = 0; h < c.heads; ++h) order[static_cast<std::size_t>(h)] = h;
        std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
            return st[static_cast<std::size_t>(x)].fractions.at(Region::RulesSection).mean >
                   st[static_cast<std::size_t>(y)].fractions.at(Region::RulesSection).mean;
        });
        std::vector<int> heads(order.begin(), order.begin() + std::min(2, c.heads));
        std::sort(heads.begin(), heads.end());

        const auto tr = draw(5000, kProbeTrain + 0x3c, Chain::LogOp);
        const auto te = draw(5000, kProbeTest + 0x3c, Chain::LogOp);
        const FeatureSite site{Stream::HeadOutputConcat, last, heads, PositionSpec::of(Region::AnswerPos)};
        std::vector<std::array<int, 2>> ytr, yte;
        for (const auto& p : tr) ytr.push_back(target_logop_roots(p));
        for (const auto& p : te) yte.push_back(target_logop_roots(p));
        ProbeConfig mc = pc;
        mc.lr = 0.5e-3;
        mc.steps = o.multilabel_steps;
        const auto r = train_multilabel_probe(collect_features(a.params, tr, site), ytr,
                                              collect_features(a.params, te, site), yte, pool, mc);
        json v = probe_values(r, tr.size(), te.size(), site.describe());
        v["heads"] = heads;
        json rule_att = json::array();
        for (const auto& s : st) rule_att.push_back(s.fractions.at(Region::RulesSection).mean);
        v["rules_attention_by_head"] = rule_att;
        report.results["probe_evidence3c"] = metrics_payload(v);
        accept(a, report, "P7.evidence3c", "LogOp roots decoded from two last-layer heads, top-2 accuracy", r.test_acc,
               ">=", 0.90);
    }

    if (want("evidence3d")) {
        const auto tr = draw(5000, kProbeTrain + 0x3d, Chain::LogOp);
        const auto te = draw(5000, kProbeTest + 0x3d, Chain::LogOp);
        const auto marks = encode(tr.front(), vocab, false).marks;
        json grid = json::array();
        double best = 0.0;
        for (int layer = 0; layer <= c.layers; ++layer)
            for (int pos = marks.query_pos; pos <= marks.answer_pos; ++pos) {
                const FeatureSite site{Stream::Residual, layer, {}, PositionSpec{std::nullopt, {pos}}};
                const auto r = train_affine_probe(collect_features(a.params, tr, site), targets(tr, target_linear_start),
                                                  collect_features(a.params, te, site), targets(te, target_linear_start),
                                                  pool, pc);
                grid.push_back({{"layer", layer}, {"position", pos}, {"train_acc", r.train_acc}, {"test_acc", r.test_acc}});
                best = std::max(best, r.test_acc);
            }
        report.results["probe_evidence3d"] = metrics_payload({{"grid", grid}, {"max_test_acc", best},
                                                              {"n_train", tr.size()}, {"n_test", te.size()}});
    }

    if (want("truth")) {
        const auto tr = draw(10000, kProbeTrain + 0x77, std::nullopt);
        const auto te = draw(5000, kProbeTest + 0x77, std::nullopt);
        auto seqs = [&](const std::vector<Problem>& ps) {
            std::vector<std::vector<TokenId>> s;
            for (const auto& p : ps) s.push_back(up_to_final_truth(p, vocab));
            return s;
        };
        const auto r = train_affine_probe(last_position_residual(a.params, seqs(tr), mid), targets(tr, target_final_truth),
                                          last_position_residual(a.params, seqs(te), mid), targets(te, target_final_truth),
                                          3, pc);
        report.results["probe_truth"] =
            metrics_payload(probe_values(r, tr.size(), te.size(), "residual[" + std::to_string(mid) + "]@final_query_var"));
    }
}

void stage_route(const Analysis& a, const RouteOptions& o, ExperimentReport& report) {
    const int pool = a.pool();
    const std::size_t ne = a.scaled(o.n_estimate, 100);
    const auto est2 = draw_problems(2 * ne, a.seed, kRouteEstimate, a.chain_length, pool, Chain::Linear);
    const std::vector<Problem> est(est2.begin(), est2.begin() + static_cast<std::ptrdiff_t>(ne));
    const auto held_lin = draw_problems(a.scaled(500), a.seed, kRouteHeldLinear, a.chain_length, pool, Chain::Linear);
    const auto held_lop = draw_problems(a.scaled(500), a.seed, kRouteHeldLogOp, a.chain_length, pool, Chain::LogOp);
    const auto d = estimate_direction(a.params, est, held_lin, held_lop, o.block);
    const auto d2 = estimate_direction(a.params, est2, {}, {}, o.block);
    const double cosang = std::clamp(d.h.dot(d2.h) / (d.h.norm() * d2.h.norm()), -1.0, 1.0);
    const double angle = std::acos(cosang) * 180.0 / std::numbers::pi;

    json values = {{"site", d.site.describe()},
                   {"n_estimate", d.n},
                   {"norm", d.h.norm()},
                   {"heldout_linear", to_json(d.linear_heldout)},
                   {"heldout_logop", to_json(d.logop_heldout)},
                   {"doubled_estimate_angle_deg", angle}};
    const std::size_t nv = a.scaled(o.n_eval);
    auto wants = [&](const char* m) {
        return std::find(o.interventions.begin(), o.interventions.end(), m) != o.interventions.end();
    };
    if (wants("subtract")) {
        const auto sub = direction_intervention_eval(
            a.params, draw_problems(nv, a.seed, kRouteSubtract, a.chain_length, pool, Chain::Linear),
            RouteMode::Subtract, d.h, o.block);
        values["subtract"] = to_json(sub);
        accept(a, report, "P8.subtract", "subtracting the routing direction yields the LogOp first token",
               sub.counterpart_rate, ">=", 0.70);
    }
    if (wants("add")) {
        const auto add = direction_intervention_eval(
            a.params, draw_problems(nv, a.seed, kRouteAdd, a.chain_length, pool, Chain::LogOp), RouteMode::Add, d.h,
            o.block);
        values["add"] = to_json(add);
        accept(a, report, "P8.add_attention", "adding the routing direction: last-layer QueryPos attention",
               add.layer3_query_attention, ">", 0.90);
        accept(a, report, "P8.add_linear", "adding the routing direction: correct linear first token rate",
               add.counterpart_rate, "<", 0.3);
    }
    report.results["routing"] = metrics_payload(values);
}

void stage_residual_patch(const Analysis& a, std::span<const std::uint64_t> seeds, const ResidualPatchOptions& o,
                          ExperimentReport& report) {
    const Vocab vocab = vocab_of(a.params);
    const auto spec = SamplingSpec::balanced(a.chain_length, a.pool());
    json runs = json::array();
    std::vector<double> clean, patched, deg;
    for (auto s : seeds) {
        CounterRng rng(s, kResidPatch);
        const auto pairs = sample_pairs(CounterfactualKind::LogOpFlip, a.scaled(o.n), spec, rng, vocab);
        const auto r = residual_patch_eval(a.params, pairs, o.layer);
        runs.push_back({{"seed", s}, {"n", r.n}, {"clean_exact", r.clean_exact}, {"patched_exact", r.patched_exact},
                        {"degradation", r.degradation()}});
        clean.push_back(r.clean_exact);
        patched.push_back(r.patched_exact);
        deg.push_back(r.degradation());
    }
    report.results["residual_patch"] = metrics_payload({{"layer", o.layer},
                                                        {"runs", runs},
                                                        {"clean_mean", mean_of(clean)},
                                                        {"patched_mean", mean_of(patched)},
                                                        {"patched_std", std_of(patched)},
                                                        {"degradation_mean", mean_of(deg)},
                                                        {"degradation_min", *std::min_element(deg.begin(), deg.end())}});
    accept(a, report, "P9", "smallest exact-match drop across seeds, residual patch from the LogOp-flipped twin",
           *std::min_element(deg.begin(), deg.end()), ">=", 0.10);
}

ScoreGrid stage_patch_scan(const Analysis& a, const PatchOptions& o, ExperimentReport& report) {
    const Vocab vocab = vocab_of(a.params);
    const int n = o.n > 0 ? o.n : (o.sub == SubComponent::Key ? 200 : 60);
    CounterRng rng(a.seed, kPatchPairs + static_cast<std::uint64_t>(o.counterfactual));
    const auto pairs = sample_pairs(o.counterfactual, a.scaled(n), SamplingSpec::balanced(a.chain_length, a.pool()), rng, vocab);
    ScanConfig sc{o.sub, PositionSpec::of(o.region), o.granularity, o.metric};
    const auto grid = patch_scan(a.params, pairs, sc);
    auto payload = head_grid_payload(grid);
    payload["counterfactual"] = std::string(to_string(o.counterfactual));
    payload["n_pairs"] = pairs.size();
    report.results["patch_scan"] = payload;

    if (o.counterfactual == CounterfactualKind::QueryFlip && o.sub == SubComponent::Output &&
        o.granularity == Granularity::Head && o.metric == Metric::Calibrated) {
        const double mx = grid.max_mean();
        std::size_t above = 0;
        for (const auto& cell : grid.cells)
            if (std::isfinite(cell.score.mean) && cell.score.mean > 0.5 * mx) ++above;
        // Without a finite maximum there is nothing to be sparse about.
        const double frac = std::isfinite(mx) ? static_cast<double>(above) / static_cast<double>(grid.cells.size())
                                              : std::nan("");
        report.results["patch_scan_sparsity"] =
            metrics_payload({{"max_mean", finite_or_null(mx)}, {"heads_above_half_max", above},
                             {"fraction", finite_or_null(frac)}});
        accept(a, report, "P10.sparsity", "fraction of heads scoring above half the maximum", frac, "<", 0.25);
    }
    return grid;
}

void stage_sufficiency(const Analysis& a, const SufficiencyOptions& o, ExperimentReport& report) {
    const auto& c = a.params.config;
    const Vocab vocab = vocab_of(a.params);
    const auto spec = SamplingSpec::balanced(a.chain_length, a.pool());
    CircuitSpec circuit;
    if (!o.families.empty()) {
        circuit.families = o.families;
    } else {
        CounterRng rng(a.seed, kCircuitScan + static_cast<std::uint64_t>(o.counterfactual));
        const auto pairs = sample_pairs(o.counterfactual, a.scaled(60), spec, rng, vocab);
        const auto grid = patch_scan(a.params, pairs, ScanConfig{});
        std::vector<std::vector<int>> bands = o.bands;
        if (bands.empty()) {
            bands.emplace_back();
            for (int l = 0; l < c.layers; ++l) bands.back().push_back(l);
        }
        circuit = select_circuit(grid, o.top_k, bands);
        report.results["circuit_scan"] = head_grid_payload(grid);
    }
    CounterRng rng(a.seed, kSufficiencyPairs + static_cast<std::uint64_t>(o.counterfactual));
    const auto pairs = sample_pairs(o.counterfactual, a.scaled(o.n), spec, rng, vocab);
    const auto r = circuit_sufficiency(a.params, pairs, circuit, o.direction);
    report.results["sufficiency"] = sufficiency_payload(r, circuit);
    if (o.counterfactual == CounterfactualKind::QueryFlip && o.direction == Direction::Normal)
        accept(a, report, "P10.c_null", "sufficiency ratio with every head frozen", r.ratio("C_null"), "<=", -0.5);
}

// ---- dispatch -------------------------------------------------------------

namespace {

json provenance_for(const ExperimentConfig& cfg, const Params* params) {
    json p = {{"seeds", cfg.seeds}, {"workers", worker_count()}};
    if (params) {
        p["checkpoint"] = cfg.checkpoint;
        p["params_hash"] = hex64(params_hash(*params));
        p["model"] = to_json(params->config);
    }
    return p;
}

Analysis analysis_for(const ExperimentConfig& cfg, const Params& params) {
    return Analysis{params, cfg.seeds.front(), cfg.scale, cfg.chain_length, cfg.thresholds};
}

std::filesystem::path data_dir(const ExperimentConfig& cfg) {
    if (cfg.data.empty()) throw std::invalid_argument("config key 'data' is required for this experiment");
    return cfg.data;
}

void ensure_data(const ExperimentConfig& cfg, std::ostream* log) {
    const auto dir = data_dir(cfg);
    if (std::filesystem::exists(dir / "train.jsonl") && std::filesystem::exists(dir / "test.jsonl")) return;
    SplitSpec s;
    s.sampling = SamplingSpec::training(cfg.chain_length, cfg.pool_size);
    s.train_n = cfg.gen.train_n;
    s.test_n = cfg.gen.test_n;
    s.seed = cfg.gen.seed;
    if (log) *log << "generating " << s.train_n << "/" << s.test_n << " problems into " << dir << "\n";
    std::filesystem::create_directories(dir);
    const auto splits = generate_splits(s);
    persist_dataset(dir / "test.jsonl", splits.test);
    persist_dataset(dir / "train.jsonl", splits.train);
}

ExperimentReport run_train(const ExperimentConfig& cfg) {
    ensure_data(cfg, &std::cout);
    if (cfg.out.empty()) throw std::invalid_argument("config key 'out' is required for training");
    const auto dir = data_dir(cfg);
    const auto train_set = load_dataset(dir / "train.jsonl");
    const auto test_set = load_dataset(dir / "test.jsonl");
    ModelConfig mc;
    mc.vocab_size = Vocab(train_set.header.pool_size).size();
    json mj = to_json(mc);
    if (cfg.train.contains("model")) mj.update(cfg.train["model"]);
    mc = model_config_from_json(mj);
    auto tc = train_config_from_json(cfg.train.value("train", json::object()));
    tc.seed = cfg.seeds.front();
    CounterRng rng(cfg.train.value("init_seed", tc.seed), 0x1417);
    const std::filesystem::path out = cfg.out;
    const auto res = train(init_model(mc, rng), train_set, &test_set, tc, {out, false, &std::cout});

    ExperimentReport r;
    r.kind = "train";
    r.provenance = provenance_for(cfg, &res.params);
    r.provenance["checkpoint"] = (out / "final").string();
    r.results["training_curve"] = training_curve_payload(out / "metrics.jsonl");
    r.results["training"] = metrics_payload({{"iters", res.iters_done},
                                             {"initial_loss", res.initial_loss},
                                             {"final_loss", res.final_loss},
                                             {"eval_exact_match", res.eval_exact_match},
                                             {"train_n", train_set.records.size()},
                                             {"test_n", test_set.records.size()}});
    const Analysis a{res.params, cfg.seeds.front(), cfg.scale, cfg.chain_length, cfg.thresholds};
    std::vector<Problem> held;
    for (const auto& rec : test_set.records) held.push_back(rec.problem);
    stage_exact_match(a, held, r);
    return r;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentReport r;
    if (cfg.kind == "full-replication") {
        auto all = full_replication(cfg);
        return all.back();
    }
    if (cfg.kind == "train") {
        r = run_train(cfg);
    } else {
        if (cfg.checkpoint.empty()) throw std::invalid_argument("config key 'checkpoint' is required for " + cfg.kind);
        if (!std::filesystem::exists(cfg.checkpoint)) throw std::runtime_error("checkpoint " + cfg.checkpoint + " does not exist");
        const auto ck = load_checkpoint(cfg.checkpoint);
        const Analysis a = analysis_for(cfg, ck.params);
        r.kind = cfg.kind;
        r.provenance = provenance_for(cfg, &ck.params);
        if (cfg.kind == "patch-scan") stage_patch_scan(a, cfg.patch, r);
        else if (cfg.kind == "sufficiency") stage_sufficiency(a, cfg.sufficiency, r);
        else if (cfg.kind == "probe") stage_probes(a, cfg.probe, r);
        else if (cfg.kind == "route") stage_route(a, cfg.route, r);
        else if (cfg.kind == "stats") stage_attention_stats(a, cfg.stats, r);
        else if (cfg.kind == "residual-patch") stage_residual_patch(a, cfg.seeds, cfg.residual_patch, r);
        else throw std::invalid_argument("unknown experiment kind '" + cfg.kind + "'");
    }
    r.config = to_json(cfg);
    r.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!cfg.out.empty()) {
        std::filesystem::path p = cfg.out;
        if (cfg.kind == "train") p /= "report.json";
        write_report(p, r);
    }
    return r;
}

std::vector<ExperimentReport> full_replication(const ExperimentConfig& cfg) {
    if (cfg.out.empty()) throw std::invalid_argument("config key 'out' is required for full-replication");
    const std::filesystem::path out = cfg.out;
    std::filesystem::create_directories(out);
    std::vector<ExperimentReport> reports;

    std::string ckpt = cfg.checkpoint;
    if (ckpt.empty() || !std::filesystem::exists(ckpt)) {
        auto tcfg = cfg;
        tcfg.kind = "train";
        tcfg.out = (out / "train").string();
        reports.push_back(run_experiment(tcfg));
        ckpt = (out / "train" / "final").string();
    }

    const auto ck = load_checkpoint(ckpt);
    auto stage = [&](const std::string& kind, auto&& body) {
        const auto t0 = std::chrono::steady_clock::now();
        ExperimentReport r;
        r.kind = kind;
        auto c = cfg;
        c.kind = kind;
        c.checkpoint = ckpt;
        c.out = (out / (kind + ".json")).string();
        r.config = to_json(c);
        r.provenance = provenance_for(c, &ck.params);
        body(analysis_for(c, ck.params), r);
        r.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_report(c.out, r);
        reports.push_back(r);
        std::cout << kind << " done in " << r.wall_clock_s << " s\n";
    };
    // A fresh training run already scored the held-out split.
    const bool trained_here = !reports.empty();
    if (!trained_here && !cfg.data.empty() && std::filesystem::exists(std::filesystem::path(cfg.data) / "test.jsonl"))
        stage("eval", [&](const Analysis& a, ExperimentReport& r) {
            const auto test_set = load_dataset(std::filesystem::path(cfg.data) / "test.jsonl");
            std::vector<Problem> held;
            for (const auto& rec : test_set.records) held.push_back(rec.problem);
            stage_exact_match(a, held, r);
        });
    stage("stats", [&](const Analysis& a, ExperimentReport& r) { stage_attention_stats(a, cfg.stats, r); });
    stage("probe", [&](const Analysis& a, ExperimentReport& r) { stage_probes(a, cfg.probe, r); });
    stage("route", [&](const Analysis& a, ExperimentReport& r) { stage_route(a, cfg.route, r); });
    stage("residual-patch",
          [&](const Analysis& a, ExperimentReport& r) { stage_residual_patch(a, cfg.seeds, cfg.residual_patch, r); });
    PatchOptions po;
    stage("patch-scan", [&](const Analysis& a, ExperimentReport& r) { stage_patch_scan(a, po, r); });
    stage("sufficiency", [&](const Analysis& a, ExperimentReport& r) { stage_sufficiency(a, cfg.sufficiency, r); });

    ExperimentReport summary;
    summary.kind = "full-replication";
    summary.config = to_json(cfg);
    summary.provenance = provenance_for(cfg, &ck.params);
    json table = json::array();
    double wall = 0.0;
    for (const auto& rep : reports) {
        wall += rep.wall_clock_s;
        for (const auto& acc : rep.acceptance) {
            table.push_back({{"stage", rep.kind}, {"id", acc.id}, {"value", std::isfinite(acc.value) ? json(acc.value) : json(nullptr)},
                             {"op", acc.op}, {"threshold", acc.threshold}, {"pass", acc.pass}});
            summary.acceptance.push_back(acc);
        }
    }
    summary.results["summary"] = metrics_payload({{"rows", table}, {"stages", reports.size()}});
    summary.wall_clock_s = wall;
    write_report(out / "summary.json", summary);
    reports.push_back(summary);
    return reports;
}

}  // namespace logicirc
