#include <CLI11.hpp>
#include <json.hpp>

#include <malloc.h>

#include <fstream>
#include <iostream>

#include "logicirc/dataset.hpp"
#include "logicirc/experiment.hpp"
#include "logicirc/inference.hpp"
#include "logicirc/model.hpp"
#include "logicirc/report.hpp"
#include "logicirc/train.hpp"

using namespace logicirc;
using nlohmann::json;

namespace {

// Exit codes: 0 ok, 1 error, 2 ran but a configured threshold failed.
constexpr int kThresholdFailed = 2;

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    return json::parse(in);
}

// Flags shared by the analysis subcommands. Values given on the command line
// override the same keys of --config.
struct Common {
    std::string config, checkpoint, out;
    std::vector<std::uint64_t> seeds;
    double scale = 0.0;
    int length = 0;
    bool thresholds = false;

    void attach(CLI::App* app, bool needs_checkpoint = true) {
        app->add_option("--config", config, "experiment config JSON; flags override it");
        auto* ck = app->add_option("--checkpoint,--model", checkpoint, "model directory");
        if (!needs_checkpoint) ck->description("model directory; trained first when missing");
        app->add_option("--out", out, "report path");
        app->add_option("--seed", seeds, "sampling seed(s)");
        app->add_option("--scale", scale, "multiplier on analysis sample counts");
        app->add_option("--length", length, "chain length")->check(CLI::IsMember({2, 3}));
        app->add_flag("--thresholds", thresholds, "attach acceptance checks; exit 2 if any fails");
    }

    json base(const std::string& kind) const {
        json j = config.empty() ? json::object() : read_json_file(config);
        j["kind"] = kind;
        if (!checkpoint.empty()) j["checkpoint"] = checkpoint;
        if (!out.empty()) j["out"] = out;
        if (!seeds.empty()) j["seeds"] = seeds;
        if (scale > 0.0) j["scale"] = scale;
        if (length) j["chain_length"] = length;
        if (thresholds) j["thresholds"] = true;
        return j;
    }
};

void print_acceptance(const ExperimentReport& r) {
    for (const auto& a : r.acceptance)
        std::cout << (a.pass ? "PASS " : "FAIL ") << a.id << ": " << a.value << " " << a.op << " " << a.threshold
                  << "  (" << a.description << ")\n";
}

int finish(const ExperimentReport& r, const ExperimentConfig& cfg) {
    if (cfg.out.empty()) std::cout << to_json(r).dump(2) << "\n";
    else std::cout << "report written to " << cfg.out << (cfg.kind == "train" ? "/report.json" : "") << "\n";
    print_acceptance(r);
    return cfg.thresholds && !r.all_pass() ? kThresholdFailed : 0;
}

template <class T>
void set_if(json& j, const char* key, const T& v, const T& unset) {
    if (v != unset) j[key] = v;
}

}  // namespace

int main(int argc, char** argv) {
    // Training allocates and frees the same large activation buffers every
    // step; keep them on the heap instead of round-tripping through mmap.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);

    CLI::App app{"logicirc: propositional-logic circuits in a small transformer"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate signature-disjoint train/test splits");
    SplitSpec split;
    int length = 3, pool = 80;
    std::string gen_out;
    gen->add_option("--length", length, "chain length (2 or 3)")->check(CLI::IsMember({2, 3}));
    gen->add_option("--pool", pool, "variable pool size");
    gen->add_option("--train-n", split.train_n);
    gen->add_option("--test-n", split.test_n);
    gen->add_option("--seed", split.seed);
    gen->add_option("--out", gen_out, "output directory")->required();

    auto* tr = app.add_subcommand("train", "train the transformer");
    std::string tr_config, tr_data, tr_out;
    bool tr_resume = false;
    tr->add_option("--config", tr_config, "JSON file {\"model\":{...},\"train\":{...},\"init_seed\":n}");
    tr->add_option("--data", tr_data, "directory with train.jsonl and test.jsonl")->required();
    tr->add_option("--out", tr_out, "run directory")->required();
    tr->add_flag("--resume", tr_resume, "continue from <out>/checkpoints/last");

    auto* run = app.add_subcommand("run", "run any experiment from a config file");
    std::string run_config;
    run->add_option("--config", run_config, "experiment config JSON")->required();

    Common pc_common;
    auto* patch = app.add_subcommand("patch", "activation-patching scan over heads or layers");
    pc_common.attach(patch);
    std::string p_cf, p_sub, p_region, p_gran, p_metric;
    int p_n = 0;
    patch->add_option("--counterfactual,--kind", p_cf, "query_flip | rule_location_swap | fact_flip | logop_flip");
    patch->add_option("--sub", p_sub, "output | query | key | value | residual | embedding");
    patch->add_option("--region", p_region, "positions to patch, e.g. on_after_query");
    patch->add_option("--granularity", p_gran, "head | kv_group");
    patch->add_option("--metric", p_metric, "calibrated | loss_increase");
    patch->add_option("--n", p_n, "number of prompt pairs");

    Common sc_common;
    auto* suff = app.add_subcommand("sufficiency", "freeze everything outside a circuit and measure what is left");
    sc_common.attach(suff);
    std::string s_cf, s_dir;
    int s_n = 0, s_k = 0;
    suff->add_option("--counterfactual", s_cf);
    suff->add_option("--direction", s_dir, "normal | alt");
    suff->add_option("--n", s_n);
    suff->add_option("--top-k", s_k, "heads per band when the circuit is discovered");

    Common pr_common;
    auto* probe = app.add_subcommand("probe", "linear probes on cached activations");
    pr_common.attach(probe);
    std::vector<std::string> pr_which;
    std::string pr_site, pr_target, pr_query;
    int pr_steps = 0;
    probe->add_option("--which", pr_which, "named probes: evidence2 contrast evidence3a ... truth");
    probe->add_option("--site", pr_site, "ad-hoc site, e.g. residual:2@query_pos");
    probe->add_option("--target", pr_target, "linear_start | logop_start | first_token | logop_kind | logop_roots | final_truth");
    probe->add_option("--query", pr_query, "linear | logop | mixed");
    probe->add_option("--steps", pr_steps, "optimizer steps");

    Common ro_common;
    auto* route = app.add_subcommand("route", "estimate the routing direction and intervene with it");
    ro_common.attach(route);
    bool ro_estimate = false;
    std::vector<std::string> ro_modes;
    route->add_flag("--estimate", ro_estimate, "only estimate the direction");
    route->add_option("--intervene", ro_modes, "add and/or subtract")->check(CLI::IsMember({"add", "subtract"}));

    Common st_common;
    auto* stats = app.add_subcommand("stats", "attention statistics and chain-type cosine matrix");
    st_common.attach(stats);
    int st_n = 0;
    stats->add_option("--n", st_n, "problems per query type");

    Common rp_common;
    auto* rpatch = app.add_subcommand("residual-patch", "exact match with the residual patched from a LogOp-flipped twin");
    rp_common.attach(rpatch);

    Common rep_common;
    auto* rep = app.add_subcommand("replicate", "data, training and every analysis stage, with a summary table");
    rep_common.attach(rep, false);
    std::string rep_data;
    rep->add_option("--data", rep_data, "dataset directory (generated when missing)");

    auto* rc = app.add_subcommand("render-check", "validate a report and list the figures it supports");
    std::string rc_report;
    rc->add_option("--report", rc_report, "report JSON")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) {
            split.sampling = SamplingSpec::training(length, pool);
            std::filesystem::create_directories(gen_out);
            const auto s = generate_splits(split);
            persist_dataset(std::filesystem::path(gen_out) / "train.jsonl", s.train);
            persist_dataset(std::filesystem::path(gen_out) / "test.jsonl", s.test);
            std::cout << "wrote " << s.train.records.size() << " train and " << s.test.records.size()
                      << " test problems to " << gen_out << "\n";
        } else if (*tr) {
            json cfg = tr_config.empty() ? json::object() : read_json_file(tr_config);
            for (const auto& [k, v] : cfg.items())
                if (k != "model" && k != "train" && k != "init_seed")
                    throw std::invalid_argument("unknown config key '" + k + "'");
            const auto train_set = load_dataset(std::filesystem::path(tr_data) / "train.jsonl");
            const auto test_set = load_dataset(std::filesystem::path(tr_data) / "test.jsonl");
            ModelConfig mc;
            mc.vocab_size = Vocab(train_set.header.pool_size).size();
            json mj = to_json(mc);
            if (cfg.contains("model")) mj.update(cfg["model"]);
            mc = model_config_from_json(mj);
            const auto tc = train_config_from_json(cfg.value("train", json::object()));
            CounterRng rng(cfg.value("init_seed", tc.seed), 0x1417);
            auto res = train(init_model(mc, rng), train_set, &test_set, tc, {tr_out, tr_resume, &std::cout});
            std::cout << "final exact match " << res.eval_exact_match << "\n";
        } else if (*rc) {
            std::ifstream in(rc_report);
            if (!in) throw std::runtime_error("cannot open " + rc_report);
            json j;
            try {
                j = json::parse(in);
            } catch (const json::parse_error& e) {
                throw std::runtime_error(std::string("not JSON: ") + e.what());
            }
            const auto errs = validate_report(j);
            if (!errs.empty()) {
                for (const auto& e : errs) std::cerr << e << "\n";
                return 1;
            }
            std::cout << "valid " << j["kind"].get<std::string>() << " report; figures:";
            for (const auto& f : renderable_figures(j)) std::cout << " " << f;
            std::cout << "\n";
        } else {
            json j;
            if (*run) {
                j = read_json_file(run_config);
            } else if (*patch) {
                j = pc_common.base("patch-scan");
                json& p = j["patch"];
                if (p.is_null()) p = json::object();
                set_if(p, "counterfactual", p_cf, std::string());
                set_if(p, "sub", p_sub, std::string());
                set_if(p, "region", p_region, std::string());
                set_if(p, "granularity", p_gran, std::string());
                set_if(p, "metric", p_metric, std::string());
                set_if(p, "n", p_n, 0);
            } else if (*suff) {
                j = sc_common.base("sufficiency");
                json& s = j["sufficiency"];
                if (s.is_null()) s = json::object();
                set_if(s, "counterfactual", s_cf, std::string());
                set_if(s, "direction", s_dir, std::string());
                set_if(s, "n", s_n, 0);
                set_if(s, "top_k", s_k, 0);
            } else if (*probe) {
                j = pr_common.base("probe");
                json& p = j["probe"];
                if (p.is_null()) p = json::object();
                if (!pr_which.empty()) p["which"] = pr_which;
                set_if(p, "site", pr_site, std::string());
                set_if(p, "target", pr_target, std::string());
                set_if(p, "query", pr_query, std::string());
                set_if(p, "steps", pr_steps, 0);
            } else if (*route) {
                j = ro_common.base("route");
                json& r = j["route"];
                if (r.is_null()) r = json::object();
                if (ro_estimate) r["interventions"] = json::array();
                else if (!ro_modes.empty()) r["interventions"] = ro_modes;
            } else if (*stats) {
                j = st_common.base("stats");
                if (st_n) j["stats"]["n"] = st_n;
            } else if (*rpatch) {
                j = rp_common.base("residual-patch");
            } else if (*rep) {
                j = rep_common.base("full-replication");
                if (!rep_data.empty()) j["data"] = rep_data;
            }
            const auto cfg = experiment_config_from_json(j);
            if (cfg.kind == "full-replication") {
                const auto reports = full_replication(cfg);
                print_acceptance(reports.back());
                std::cout << "reports under " << cfg.out << "\n";
                return cfg.thresholds && !reports.back().all_pass() ? kThresholdFailed : 0;
            }
            return finish(run_experiment(cfg), cfg);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
