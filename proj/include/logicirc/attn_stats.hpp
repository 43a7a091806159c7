#pragma once

// Symbolic token regions of an encoded problem and attention statistics over
// them.

#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "logicirc/logic.hpp"
#include "logicirc/model.hpp"
#include "logicirc/vocab.hpp"

namespace logicirc {

enum class Region : std::uint8_t {
    RulesSection,   // RULES_START .. RULES_END
    FactsSection,   // FACTS_START .. FACTS_END
    QuerySection,   // QUERY_START .. QUERY_END
    Rest,           // ANSWER and anything after it
    QueryPos,       // the queried variable
    AnswerPos,      // the ANSWER token
    OnAfterQuery,   // QueryPos .. AnswerPos
    QueriedRuleSpan,        // every token of the rule concluding the query, with its "."
    QueriedRuleConclusion,  // that rule's conclusion variable (and "." when counting registers)
    CorrectFactSpan,        // "X TRUE ." for each acceptable first answer variable X
    CorrectAnswerTokens,    // X in the rules (and the next token) plus X's fact sentence
    RelevantContext,        // the whole sequence; no few-shot prefix exists
};

std::string_view to_string(Region r);
Region region_from_string(std::string_view s);

// Whether single-token targets also count the token right after them, the
// "." that tends to act as a register. The alternative counts the variable
// token alone.
enum class CountingMode : std::uint8_t { WithFollowing, TokenOnly };

struct RegionMap {
    int seq_len = 0;
    std::map<Region, std::vector<int>> positions;  // sorted, unique

    const std::vector<int>& at(Region r) const;
};

// Throws std::invalid_argument if `tokens` does not start with the encoding
// of `problem`.
RegionMap region_map(const Problem& problem, const TokenSeq& tokens, const Vocab& vocab,
                     CountingMode mode = CountingMode::WithFollowing);

struct AttnSample {
    const Cache* cache = nullptr;  // must hold attention
    const RegionMap* regions = nullptr;
};

struct RegionFraction {
    double mean = 0.0;
    double std = 0.0;  // population std across samples
    std::size_t n = 0;
};

struct AttnStat {
    int layer = 0;
    int head = 0;
    Region source = Region::AnswerPos;
    std::map<Region, RegionFraction> fractions;
    // Share of samples whose most-attended position lies in each region.
    std::map<Region, double> top1_share;
    RegionFraction top1_weight;        // renormalized weight of the top position
    RegionFraction top1_over_top2;     // computed per sample, then averaged
};

// Attention of head (layer, head) from the single position of `source`,
// renormalized over RelevantContext. Fractions are averaged over samples.
AttnStat attention_region_stats(std::span<const AttnSample> samples, int layer, int head, Region source,
                                std::span<const Region> regions);

nlohmann::json to_json(const AttnStat& s);

// Pairwise cosine similarities; throws on fewer than two vectors or a zero
// vector. The diagonal is exactly 1.
Eigen::MatrixXd cosine_matrix(std::span<const Eigen::VectorXd> vectors);

struct GroupCosine {
    double within_first = 0.0;
    double within_second = 0.0;
    double within = 0.0;  // both diagonal blocks, self-pairs excluded
    double cross = 0.0;
};
// Block means of a cosine matrix whose first `n_first` rows form one group.
GroupCosine group_cosine(const Eigen::MatrixXd& m, int n_first);

}  // namespace logicirc
