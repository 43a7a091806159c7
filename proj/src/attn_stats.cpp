#include "logicirc/attn_stats.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace logicirc {

namespace {

constexpr std::pair<Region, std::string_view> kRegionNames[] = {
    {Region::RulesSection, "rules"},
    {Region::FactsSection, "facts"},
    {Region::QuerySection, "query_section"},
    {Region::Rest, "rest"},
    {Region::QueryPos, "query_pos"},
    {Region::AnswerPos, "answer_pos"},
    {Region::OnAfterQuery, "on_after_query"},
    {Region::QueriedRuleSpan, "queried_rule"},
    {Region::QueriedRuleConclusion, "queried_rule_conclusion"},
    {Region::CorrectFactSpan, "correct_fact"},
    {Region::CorrectAnswerTokens, "correct_answer_tokens"},
    {Region::RelevantContext, "relevant_context"},
};

std::vector<int> range(int first, int last) {
    std::vector<int> v;
    for (int i = first; i <= last; ++i) v.push_back(i);
    return v;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

RegionFraction summarize(const std::vector<double>& v) {
    RegionFraction f;
    f.n = v.size();
    f.mean = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - f.mean) * (x - f.mean);
    f.std = v.empty() ? 0.0 : std::sqrt(ss / static_cast<double>(v.size()));
    return f;
}

}  // namespace

std::string_view to_string(Region r) {
    for (const auto& [k, name] : kRegionNames)
        if (k == r) return name;
    return "?";
}

Region region_from_string(std::string_view s) {
    for (const auto& [k, name] : kRegionNames)
        if (name == s) return k;
    throw std::invalid_argument("unknown region '" + std::string(s) + "'");
}

const std::vector<int>& RegionMap::at(Region r) const {
    auto it = positions.find(r);
    if (it == positions.end()) throw std::invalid_argument("region '" + std::string(to_string(r)) + "' not mapped");
    return it->second;
}

RegionMap region_map(const Problem& p, const TokenSeq& tokens, const Vocab& vocab, CountingMode mode) {
    const auto ctx = encode(p, vocab, false);
    if (tokens.size() < ctx.size() || !std::equal(ctx.ids.begin(), ctx.ids.end(), tokens.ids.begin()))
        throw std::invalid_argument("token sequence does not encode the problem");
    const Landmarks& m = ctx.marks;
    const bool follow = mode == CountingMode::WithFollowing;

    RegionMap rm;
    rm.seq_len = tokens.size();
    auto& pos = rm.positions;
    pos[Region::RulesSection] = range(m.rules_start, m.rules_end);
    pos[Region::FactsSection] = range(m.facts_start, m.facts_end);
    pos[Region::QuerySection] = range(m.query_start, m.query_end);
    pos[Region::Rest] = range(m.answer_pos, rm.seq_len - 1);
    pos[Region::QueryPos] = {m.query_pos};
    pos[Region::AnswerPos] = {m.answer_pos};
    pos[Region::OnAfterQuery] = range(m.query_pos, m.answer_pos);
    pos[Region::RelevantContext] = range(0, rm.seq_len - 1);

    // Rule i occupies premises (with connective), "implies", conclusion, ".".
    int at = m.rules_start + 1;
    for (const auto& r : p.rules) {
        const int len = static_cast<int>(r.premises.size()) * 2 - 1 + 3;
        if (r.conclusion == p.query) {
            pos[Region::QueriedRuleSpan] = range(at, at + len - 1);
            const int concl = at + len - 2;
            pos[Region::QueriedRuleConclusion] = follow ? std::vector<int>{concl, concl + 1} : std::vector<int>{concl};
        }
        at += len;
    }

    std::set<Var> answers;
    for (const auto& pr : minimal_proofs(p)) answers.insert(*pr.first_variable());
    std::set<int> fact_span, answer_tokens;
    for (std::size_t i = 0; i < p.facts.size(); ++i) {
        if (!answers.count(p.facts[i].var)) continue;
        const int start = m.facts_start + 1 + 3 * static_cast<int>(i);
        for (int k = 0; k < 3; ++k) fact_span.insert(start + k);
        if (follow)
            for (int k = 0; k < 3; ++k) answer_tokens.insert(start + k);
        else
            answer_tokens.insert(start);
    }
    for (int i = m.rules_start; i <= m.rules_end; ++i) {
        const TokenId t = ctx.ids[static_cast<std::size_t>(i)];
        if (vocab.is_var(t) && answers.count(vocab.var_of(t))) {
            answer_tokens.insert(i);
            if (follow) answer_tokens.insert(i + 1);
        }
    }
    pos[Region::CorrectFactSpan].assign(fact_span.begin(), fact_span.end());
    pos[Region::CorrectAnswerTokens].assign(answer_tokens.begin(), answer_tokens.end());
    return rm;
}

AttnStat attention_region_stats(std::span<const AttnSample> samples, int layer, int head, Region source,
                                std::span<const Region> regions) {
    if (samples.empty()) throw std::invalid_argument("attention statistics need at least one sample");
    AttnStat st;
    st.layer = layer;
    st.head = head;
    st.source = source;
    std::map<Region, std::vector<double>> per_region;
    std::map<Region, double> top1_counts;
    std::vector<double> top1, ratio;
    for (const auto& s : samples) {
        if (!s.cache || !s.regions) throw std::invalid_argument("incomplete attention sample");
        if (!s.cache->captured.attention) throw std::invalid_argument("cache holds no attention");
        const auto& att = s.cache->attention.at(static_cast<std::size_t>(layer)).at(static_cast<std::size_t>(head));
        const auto& src = s.regions->at(source);
        if (src.size() != 1) throw std::invalid_argument("attention source must be a single position");
        const int q = src.front();
        const auto& relevant = s.regions->at(Region::RelevantContext);
        double total = 0.0;
        for (int k : relevant)
            if (k <= q) total += att(q, k);
        if (total <= 0.0) throw std::invalid_argument("no attention inside the relevant context");

        double best = -1.0, second = -1.0;
        int best_pos = -1;
        for (int k : relevant) {
            if (k > q) continue;
            const double w = att(q, k) / total;
            if (w > best) {
                second = best;
                best = w;
                best_pos = k;
            } else if (w > second) {
                second = w;
            }
        }
        top1.push_back(best);
        if (second > 0.0) ratio.push_back(best / second);

        for (Region r : regions) {
            const auto& span = s.regions->at(r);
            if (span.empty()) throw std::invalid_argument("region '" + std::string(to_string(r)) + "' is empty");
            double w = 0.0;
            for (int k : span)
                if (k <= q) w += att(q, k);
            per_region[r].push_back(w / total);
            if (std::find(span.begin(), span.end(), best_pos) != span.end()) top1_counts[r] += 1.0;
        }
    }
    for (Region r : regions) {
        st.fractions[r] = summarize(per_region[r]);
        st.top1_share[r] = top1_counts[r] / static_cast<double>(samples.size());
    }
    st.top1_weight = summarize(top1);
    st.top1_over_top2 = summarize(ratio);
    return st;
}

nlohmann::json to_json(const AttnStat& s) {
    auto rf = [](const RegionFraction& f) { return nlohmann::json{{"mean", f.mean}, {"std", f.std}, {"n", f.n}}; };
    nlohmann::json fr = nlohmann::json::object(), top = nlohmann::json::object();
    for (const auto& [r, f] : s.fractions) fr[std::string(to_string(r))] = rf(f);
    for (const auto& [r, v] : s.top1_share) top[std::string(to_string(r))] = v;
    return {{"layer", s.layer},           {"head", s.head}, {"source", std::string(to_string(s.source))},
            {"fractions", fr},            {"top1_share", top}, {"top1_weight", rf(s.top1_weight)},
            {"top1_over_top2", rf(s.top1_over_top2)}};
}

Eigen::MatrixXd cosine_matrix(std::span<const Eigen::VectorXd> vectors) {
    const auto n = static_cast<Eigen::Index>(vectors.size());
    if (n < 2) throw std::invalid_argument("cosine matrix needs at least two vectors");
    Eigen::MatrixXd unit(vectors.front().size(), n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& v = vectors[static_cast<std::size_t>(i)];
        if (v.size() != unit.rows()) throw std::invalid_argument("vectors differ in dimension");
        const double norm = v.norm();
        if (norm == 0.0) throw std::invalid_argument("zero vector at index " + std::to_string(i));
        unit.col(i) = v / norm;
    }
    Eigen::MatrixXd m = unit.transpose() * unit;
    for (Eigen::Index i = 0; i < n; ++i) {
        m(i, i) = 1.0;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double c = std::clamp(m(i, j), -1.0, 1.0);
            m(i, j) = c;
            m(j, i) = c;
        }
    }
    return m;
}

GroupCosine group_cosine(const Eigen::MatrixXd& m, int n_first) {
    const int n = static_cast<int>(m.rows());
    if (n_first < 2 || n - n_first < 2) throw std::invalid_argument("each group needs at least two members");
    double w1 = 0, w2 = 0, x = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const bool a = i < n_first, b = j < n_first;
            if (a && b) w1 += m(i, j);
            else if (!a && !b) w2 += m(i, j);
            else x += m(i, j);
        }
    const double n1 = n_first, n2 = n - n_first;
    GroupCosine g;
    g.within_first = w1 / (n1 * (n1 - 1));
    g.within_second = w2 / (n2 * (n2 - 1));
    g.within = (w1 + w2) / (n1 * (n1 - 1) + n2 * (n2 - 1));
    g.cross = x / (2 * n1 * n2);
    return g;
}

}  // namespace logicirc
