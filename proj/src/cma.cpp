#include "logicirc/cma.hpp"
#include "logicirc/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

namespace logicirc {

namespace {

constexpr std::pair<CounterfactualKind, std::string_view> kKindNames[] = {
    {CounterfactualKind::QueryFlip, "query_flip"},
    {CounterfactualKind::RuleLocationSwap, "rule_location_swap"},
    {CounterfactualKind::FactFlip, "fact_flip"},
    {CounterfactualKind::LogOpFlip, "logop_flip"},
};

constexpr std::pair<SubComponent, std::string_view> kSubNames[] = {
    {SubComponent::Output, "output"},     {SubComponent::Query, "query"},
    {SubComponent::Key, "key"},           {SubComponent::Value, "value"},
    {SubComponent::Residual, "residual"}, {SubComponent::Embedding, "embedding"},
};

TokenId first_token(const Problem& p, const Vocab& vocab) {
    return vocab.var_id(*canonical_proof(p).first_variable());
}

bool mixed_roots(const Problem& p) {
    const auto roots = p.logop_roots();
    return p.fact_value(roots[0]) != p.fact_value(roots[1]);
}

Fact& fact_of(Problem& p, Var v) {
    for (auto& f : p.facts)
        if (f.var == v) return f;
    throw std::logic_error("no fact for root variable");
}

Score summarize(const std::vector<double>& v) {
    Score s;
    s.n = v.size();
    if (v.empty()) return s;
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size()));
    return s;
}

double mean_of(const std::vector<double>& v) {
    double sum = 0.0;
    for (double x : v) sum += x;
    return v.empty() ? 0.0 : sum / static_cast<double>(v.size());
}

// logit[b] - logit[a] at the ANSWER position.
double gap(const Mat& logits, int pos, TokenId a, TokenId b) {
    return static_cast<double>(logits(pos, b)) - static_cast<double>(logits(pos, a));
}

double cross_entropy_at(const Mat& logits, int pos, TokenId target) {
    const auto row = logits.row(pos).cast<double>();
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    return lse - row(target);
}

}  // namespace

std::string_view to_string(CounterfactualKind k) {
    for (const auto& [v, name] : kKindNames)
        if (v == k) return name;
    return "?";
}

CounterfactualKind counterfactual_from_string(std::string_view s) {
    for (const auto& [v, name] : kKindNames)
        if (name == s) return v;
    throw std::invalid_argument("unknown counterfactual kind '" + std::string(s) + "'");
}

std::string_view to_string(SubComponent s) {
    for (const auto& [v, name] : kSubNames)
        if (v == s) return name;
    return "?";
}

SubComponent sub_component_from_string(std::string_view s) {
    for (const auto& [v, name] : kSubNames)
        if (name == s) return v;
    throw std::invalid_argument("unknown sub-component '" + std::string(s) + "'");
}

bool applicable(const Problem& p, CounterfactualKind kind) {
    switch (kind) {
        case CounterfactualKind::QueryFlip:
        case CounterfactualKind::RuleLocationSwap: return true;
        case CounterfactualKind::FactFlip:
        case CounterfactualKind::LogOpFlip: return p.meta.queried == Chain::LogOp && mixed_roots(p);
    }
    return false;
}

PromptPair make_pair(const Problem& p, CounterfactualKind kind, const Vocab& vocab) {
    if (!applicable(p, kind))
        throw std::invalid_argument(std::string(to_string(kind)) +
                                    " needs the LogOp chain queried with one true and one false root");
    Problem alt = p;
    switch (kind) {
        case CounterfactualKind::QueryFlip:
            if (p.meta.queried == Chain::LogOp) {
                alt.query = p.linear_conclusion();
                alt.meta.queried = Chain::Linear;
            } else {
                alt.query = p.logop_conclusion();
                alt.meta.queried = Chain::LogOp;
            }
            break;
        case CounterfactualKind::RuleLocationSwap: {
            const int i = p.meta.logop_rule;
            const int j = p.meta.linear_rules.back();
            std::swap(alt.rules[static_cast<std::size_t>(i)], alt.rules[static_cast<std::size_t>(j)]);
            alt.meta.logop_rule = j;
            alt.meta.linear_rules.back() = i;
            break;
        }
        case CounterfactualKind::FactFlip: {
            const auto roots = p.logop_roots();
            auto& a = fact_of(alt, roots[0]);
            auto& b = fact_of(alt, roots[1]);
            std::swap(a.value, b.value);
            break;
        }
        case CounterfactualKind::LogOpFlip: {
            auto& op = *alt.rules[static_cast<std::size_t>(p.meta.logop_rule)].op;
            op = op == LogOp::And ? LogOp::Or : LogOp::And;
            break;
        }
    }
    validate(alt);

    PromptPair pair;
    pair.kind = kind;
    pair.orig_problem = p;
    pair.alt_problem = std::move(alt);
    pair.orig = encode(pair.orig_problem, vocab, false);
    pair.alt = encode(pair.alt_problem, vocab, false);
    pair.y_orig = first_token(pair.orig_problem, vocab);
    pair.y_alt = first_token(pair.alt_problem, vocab);
    if (pair.orig.size() != pair.alt.size()) throw std::logic_error("pair prompts differ in length");
    const bool same = pair.y_orig == pair.y_alt;
    if ((kind == CounterfactualKind::RuleLocationSwap) != same)
        throw std::logic_error(std::string(to_string(kind)) + " produced an unexpected answer change");
    return pair;
}

std::vector<PromptPair> sample_pairs(CounterfactualKind kind, std::size_t n, const SamplingSpec& spec,
                                     CounterRng& rng, const Vocab& vocab) {
    std::vector<PromptPair> out;
    out.reserve(n);
    std::size_t attempts = 0;
    while (out.size() < n) {
        if (++attempts > 50 * n + 1000) throw std::runtime_error("too few problems admit " + std::string(to_string(kind)));
        Problem p = sample_problem(rng, spec);
        if (applicable(p, kind)) out.push_back(make_pair(p, kind, vocab));
    }
    return out;
}

std::vector<int> PositionSpec::resolve(const RegionMap& rm) const {
    std::vector<int> pos = absolute;
    if (region) {
        const auto& r = rm.at(*region);
        pos.insert(pos.end(), r.begin(), r.end());
    }
    std::sort(pos.begin(), pos.end());
    pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
    for (int p : pos)
        if (p < 0 || p >= rm.seq_len)
            throw std::invalid_argument("position " + std::to_string(p) + " outside the sequence");
    return pos;
}

std::string PositionSpec::describe() const {
    std::string s = region ? std::string(to_string(*region)) : "";
    for (int p : absolute) s += (s.empty() ? "" : ",") + std::to_string(p);
    return s;
}

ForwardResult<float> patched_forward(const Params& params, std::span<const TokenId> tokens,
                                     std::span<const InterventionSpec> specs, const Cache& donor,
                                     const RegionMap& regions, const CaptureSpec& capture) {
    if (regions.seq_len != static_cast<int>(tokens.size()))
        throw std::invalid_argument("region map does not belong to this sequence");
    if (donor.seq_len != static_cast<int>(tokens.size()))
        throw std::invalid_argument("donor cache has a different sequence length");
    std::vector<Intervention<float>> ivs;
    ivs.reserve(specs.size());
    for (const auto& s : specs) {
        Intervention<float> iv;
        iv.layer = s.layer;
        iv.unit = s.unit;
        switch (s.sub) {
            case SubComponent::Output: iv.site = Site::HeadOutput; break;
            case SubComponent::Query: iv.site = Site::Query; break;
            case SubComponent::Key: iv.site = Site::Key; break;
            case SubComponent::Value: iv.site = Site::Value; break;
            case SubComponent::Residual: iv.site = Site::Residual; break;
            case SubComponent::Embedding: iv.site = Site::Embedding; break;
        }
        if (!donor.has(iv.site))
            throw std::invalid_argument("donor cache lacks site '" + std::string(to_string(iv.site)) + "'");
        iv.positions = s.positions.resolve(regions);
        iv.donor = &donor;
        ivs.push_back(std::move(iv));
    }
    return forward<float>(params, tokens, capture, ivs);
}

Score calibrated_score(const Deltas& d) {
    Score s;
    s.n = d.intervened.size();
    if (d.intervened.empty()) throw std::invalid_argument("calibrated score needs at least one sample");
    for (double x : d.intervened)
        if (!std::isfinite(x)) throw std::invalid_argument("non-finite intervened logit difference");
    if (!std::isfinite(d.orig_dagger) || !std::isfinite(d.alt)) throw std::invalid_argument("non-finite deltas");
    const double denom = d.alt - d.orig_dagger;
    const double numer = mean_of(d.intervened) - d.orig_dagger;
    if (!(denom > 0.0)) {
        s.degenerate = true;
        s.mean = numer == 0.0 ? 0.0 : std::numeric_limits<double>::quiet_NaN();
        s.std = s.mean;
        return s;
    }
    s.mean = numer / denom;
    std::vector<double> per;
    per.reserve(d.intervened.size());
    for (double x : d.intervened) per.push_back((x - d.orig_dagger) / denom);
    s.std = summarize(per).std;
    return s;
}

const SiteScore& ScoreGrid::at(int layer, int unit) const {
    if (layer < 0 || layer >= layers || unit < 0 || unit >= units) throw std::out_of_range("score grid index");
    return cells[static_cast<std::size_t>(layer * units + unit)];
}

double ScoreGrid::max_mean() const {
    double m = -std::numeric_limits<double>::infinity();
    for (const auto& c : cells)
        if (std::isfinite(c.score.mean)) m = std::max(m, c.score.mean);
    return m;
}

namespace {

std::pair<int, int> grid_shape(const ModelConfig& c, const ScanConfig& cfg) {
    if (cfg.sub == SubComponent::Residual) return {c.layers + 1, 1};
    if (cfg.sub == SubComponent::Embedding) return {1, 1};
    return {c.layers, cfg.granularity == Granularity::Head ? c.heads : c.kv_groups};
}

}  // namespace

std::vector<InterventionSpec> scan_site(const ModelConfig& c, const ScanConfig& cfg, int layer, int unit) {
    std::vector<InterventionSpec> out;
    auto add = [&](int u) { out.push_back({cfg.sub, layer, u, cfg.positions}); };
    switch (cfg.sub) {
        case SubComponent::Residual:
        case SubComponent::Embedding: add(-1); break;
        case SubComponent::Output:
        case SubComponent::Query:
            if (cfg.granularity == Granularity::Head) {
                add(unit);
            } else {
                for (int h = 0; h < c.heads; ++h)
                    if (c.group_of(h) == unit) add(h);
            }
            break;
        case SubComponent::Key:
        case SubComponent::Value:
            if (cfg.granularity == Granularity::Head) {
                if (c.kv_groups != c.heads)
                    throw std::invalid_argument("keys and values are shared within a group; scan them per kv-group");
                add(unit);
            } else {
                add(unit);
            }
            break;
    }
    return out;
}

ScoreGrid patch_scan(const Params& params, std::span<const PromptPair> pairs, const ScanConfig& cfg) {
    if (pairs.empty()) throw std::invalid_argument("patch scan needs at least one pair");
    const auto& c = params.config;
    const auto [layers, units] = grid_shape(c, cfg);
    const std::size_t nsites = static_cast<std::size_t>(layers * units);
    const int pool = c.vocab_size - Vocab::kNumSpecial;
    const Vocab vocab(pool);

    struct PairResult {
        double dagger = 0, alt = 0, clean_ce = 0;
        std::vector<double> value;  // per site
    };
    std::vector<PairResult> res(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t i) {
        const auto& pr = pairs[i];
        const auto rm = region_map(pr.orig_problem, pr.orig, vocab);
        const int a = pr.orig.marks.answer_pos;
        const auto orig = forward<float>(params, pr.orig.ids, CaptureSpec::none());
        const auto alt = forward<float>(params, pr.alt.ids, CaptureSpec::all());
        auto& r = res[i];
        r.dagger = gap(orig.logits, a, pr.y_orig, pr.y_alt);
        r.alt = gap(alt.logits, pr.alt.marks.answer_pos, pr.y_orig, pr.y_alt);
        r.clean_ce = cross_entropy_at(orig.logits, a, pr.y_orig);
        r.value.resize(nsites);
        for (int l = 0; l < layers; ++l)
            for (int u = 0; u < units; ++u) {
                const auto specs = scan_site(c, cfg, l, u);
                const auto out = patched_forward(params, pr.orig.ids, specs, alt.cache, rm);
                r.value[static_cast<std::size_t>(l * units + u)] =
                    cfg.metric == Metric::Calibrated ? gap(out.logits, a, pr.y_orig, pr.y_alt)
                                                     : cross_entropy_at(out.logits, a, pr.y_orig) - r.clean_ce;
            }
    });

    ScoreGrid g;
    g.config = cfg;
    g.layers = layers;
    g.units = units;
    std::vector<double> dag, alt, ce;
    for (const auto& r : res) {
        dag.push_back(r.dagger);
        alt.push_back(r.alt);
        ce.push_back(r.clean_ce);
    }
    g.orig_dagger = mean_of(dag);
    g.alt = mean_of(alt);
    g.clean_loss = mean_of(ce);
    for (int l = 0; l < layers; ++l)
        for (int u = 0; u < units; ++u) {
            std::vector<double> v;
            for (const auto& r : res) v.push_back(r.value[static_cast<std::size_t>(l * units + u)]);
            SiteScore s{l, u, {}};
            s.score = cfg.metric == Metric::Calibrated ? calibrated_score({g.orig_dagger, g.alt, v}) : summarize(v);
            g.cells.push_back(s);
        }
    return g;
}

CircuitSpec CircuitSpec::all_heads(const ModelConfig& c) {
    CircuitSpec s;
    for (int l = 0; l < c.layers; ++l) {
        HeadFamily f;
        f.name = "layer" + std::to_string(l);
        for (int h = 0; h < c.heads; ++h) f.heads.push_back({l, h});
        s.families.push_back(std::move(f));
    }
    return s;
}

std::vector<std::string> CircuitSpec::overlap_warnings() const {
    std::map<HeadRef, std::vector<std::string>> owners;
    for (const auto& f : families)
        for (const auto& h : f.heads) owners[h].push_back(f.name);
    std::vector<std::string> out;
    for (const auto& [h, names] : owners) {
        if (names.size() < 2) continue;
        std::string w = "head (" + std::to_string(h.layer) + "," + std::to_string(h.head) + ") is in";
        for (const auto& n : names) w += " " + n;
        out.push_back(w);
    }
    return out;
}

double SufficiencyResult::ratio(const std::string& label) const {
    for (const auto& r : rows)
        if (r.label == label) return r.ratio;
    throw std::out_of_range("no sufficiency row '" + label + "'");
}

SufficiencyResult circuit_sufficiency(const Params& params, std::span<const PromptPair> pairs,
                                      const CircuitSpec& circuit, Direction direction) {
    if (pairs.empty()) throw std::invalid_argument("sufficiency needs at least one pair");
    const auto& c = params.config;
    for (const auto& f : circuit.families)
        for (const auto& h : f.heads)
            if (h.layer < 0 || h.layer >= c.layers || h.head < 0 || h.head >= c.heads)
                throw std::invalid_argument("circuit head (" + std::to_string(h.layer) + "," + std::to_string(h.head) +
                                            ") not in the model");
    const Vocab vocab(c.vocab_size - Vocab::kNumSpecial);

    // Row 0 is the full circuit, row 1 the empty one, then one per removed family.
    std::vector<std::pair<std::string, std::vector<const HeadFamily*>>> variants;
    std::vector<const HeadFamily*> all;
    for (const auto& f : circuit.families) all.push_back(&f);
    variants.push_back({"C", all});
    variants.push_back({"C_null", {}});
    for (const auto& f : circuit.families) {
        std::vector<const HeadFamily*> rest;
        for (const auto* g : all)
            if (g != &f) rest.push_back(g);
        variants.push_back({"C - " + f.name, rest});
    }

    std::vector<double> clean(pairs.size());
    std::vector<std::vector<double>> kept(variants.size(), std::vector<double>(pairs.size()));
    parallel_for(pairs.size(), [&](std::size_t i) {
        const auto& pr = pairs[i];
        const bool normal = direction == Direction::Normal;
        const Problem& run_problem = normal ? pr.orig_problem : pr.alt_problem;
        const TokenSeq& run = normal ? pr.orig : pr.alt;
        const TokenSeq& other = normal ? pr.alt : pr.orig;
        // Gap favouring the run's own answer.
        const TokenId mine = normal ? pr.y_orig : pr.y_alt;
        const TokenId theirs = normal ? pr.y_alt : pr.y_orig;
        const int a = run.marks.answer_pos;

        const auto rm = region_map(run_problem, run, vocab);
        const auto donor = forward<float>(params, other.ids, CaptureSpec::all());
        const auto base = forward<float>(params, run.ids, CaptureSpec::none());
        clean[i] = gap(base.logits, a, theirs, mine);
        const auto window = rm.at(Region::OnAfterQuery);

        for (std::size_t v = 0; v < variants.size(); ++v) {
            std::map<HeadRef, std::set<int>> keep;
            for (const auto* f : variants[v].second) {
                const auto pos = f->positions.resolve(rm);
                for (const auto& h : f->heads) keep[h].insert(pos.begin(), pos.end());
            }
            std::vector<InterventionSpec> specs;
            for (int l = 0; l < c.layers; ++l)
                for (int h = 0; h < c.heads; ++h) {
                    const auto it = keep.find({l, h});
                    InterventionSpec s{SubComponent::Output, l, h, {}};
                    for (int p : window)
                        if (it == keep.end() || !it->second.count(p)) s.positions.absolute.push_back(p);
                    if (!s.positions.absolute.empty()) specs.push_back(std::move(s));
                }
            const auto out = specs.empty() ? base : patched_forward(params, run.ids, specs, donor.cache, rm);
            kept[v][i] = gap(out.logits, a, theirs, mine);
        }
    });

    SufficiencyResult r;
    r.direction = direction;
    r.warnings = circuit.overlap_warnings();
    r.clean_gap = mean_of(clean);
    if (!(std::abs(r.clean_gap) > 0.0)) throw std::invalid_argument("clean logit gap is zero; ratio undefined");
    for (std::size_t v = 0; v < variants.size(); ++v) {
        std::vector<double> ratios;
        for (double x : kept[v]) ratios.push_back(x / r.clean_gap);
        r.rows.push_back({variants[v].first, mean_of(kept[v]) / r.clean_gap, summarize(ratios).std});
    }
    return r;
}

CircuitSpec select_circuit(const ScoreGrid& grid, int k, const std::vector<std::vector<int>>& bands) {
    if (grid.config.sub != SubComponent::Output || grid.config.granularity != Granularity::Head ||
        grid.config.metric != Metric::Calibrated)
        throw std::invalid_argument("circuit selection needs a per-head calibrated output scan");
    if (k < 1) throw std::invalid_argument("k must be positive");
    std::map<int, std::vector<HeadRef>> by_layer;
    for (const auto& band : bands) {
        std::vector<const SiteScore*> cand;
        for (const auto& c : grid.cells)
            if (std::find(band.begin(), band.end(), c.layer) != band.end() && std::isfinite(c.score.mean))
                cand.push_back(&c);
        std::stable_sort(cand.begin(), cand.end(),
                         [](const SiteScore* a, const SiteScore* b) { return a->score.mean > b->score.mean; });
        for (std::size_t i = 0; i < cand.size() && i < static_cast<std::size_t>(k); ++i)
            by_layer[cand[i]->layer].push_back({cand[i]->layer, cand[i]->unit});
    }
    CircuitSpec s;
    for (auto& [l, heads] : by_layer) {
        std::sort(heads.begin(), heads.end());
        heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
        s.families.push_back({"layer" + std::to_string(l), heads, PositionSpec::of(Region::OnAfterQuery)});
    }
    return s;
}

nlohmann::json to_json(const ScoreGrid& g) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : g.cells) {
        nlohmann::json j = {{"layer", c.layer}, {"unit", c.unit}, {"n", c.score.n}, {"degenerate", c.score.degenerate}};
        // NaN is not representable in JSON.
        j["mean"] = std::isfinite(c.score.mean) ? nlohmann::json(c.score.mean) : nlohmann::json(nullptr);
        j["std"] = std::isfinite(c.score.std) ? nlohmann::json(c.score.std) : nlohmann::json(nullptr);
        cells.push_back(j);
    }
    return {{"sub", std::string(to_string(g.config.sub))},
            {"positions", g.config.positions.describe()},
            {"granularity", g.config.granularity == Granularity::Head ? "head" : "kv_group"},
            {"metric", g.config.metric == Metric::Calibrated ? "calibrated" : "loss_increase"},
            {"layers", g.layers},
            {"units", g.units},
            {"cells", cells},
            {"deltas", {{"orig_dagger", g.orig_dagger}, {"alt", g.alt}, {"clean_loss", g.clean_loss}}}};
}

nlohmann::json to_json(const SufficiencyResult& r) {
    nlohmann::json rows = nlohmann::json::array();
    auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
    for (const auto& row : r.rows) rows.push_back({{"label", row.label}, {"ratio", num(row.ratio)}, {"std", num(row.std)}});
    return {{"direction", r.direction == Direction::Normal ? "normal" : "alt"},
            {"clean_gap", r.clean_gap},
            {"rows", rows},
            {"warnings", r.warnings}};
}

nlohmann::json to_json(const CircuitSpec& c) {
    nlohmann::json fams = nlohmann::json::array();
    for (const auto& f : c.families) {
        nlohmann::json heads = nlohmann::json::array();
        for (const auto& h : f.heads) heads.push_back({h.layer, h.head});
        fams.push_back({{"name", f.name}, {"heads", heads}, {"positions", f.positions.describe()}});
    }
    return fams;
}

}  // namespace logicirc
