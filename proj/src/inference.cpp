#include "logicirc/inference.hpp"

#include <algorithm>
#include <stdexcept>

namespace logicirc {

namespace {

TokenId argmax_row(const Mat& logits, Eigen::Index row) {
    Eigen::Index best = 0;
    logits.row(row).maxCoeff(&best);
    return static_cast<TokenId>(best);
}

TokenId query_token(std::span<const TokenId> context) {
    for (std::size_t i = 0; i + 1 < context.size(); ++i)
        if (context[i] == Vocab::kQueryStart) return context[i + 1];
    throw std::invalid_argument("context has no QUERY_START");
}

}  // namespace

std::vector<TokenId> generate_greedy(const Params& params, std::span<const TokenId> context, int max_new,
                                     std::span<const Intervention<float>> interventions) {
    if (context.empty() || context.back() != Vocab::kAnswer)
        throw std::invalid_argument("greedy decoding needs a context ending in ANSWER");
    const TokenId query = query_token(context);
    std::vector<TokenId> seq(context.begin(), context.end());
    std::vector<TokenId> out;
    const int budget = std::min(max_new, params.config.max_seq_len - static_cast<int>(context.size()));
    for (int i = 0; i < budget; ++i) {
        const auto r = forward<float>(params, seq, CaptureSpec::none(), interventions);
        const TokenId next = argmax_row(r.logits, r.logits.rows() - 1);
        seq.push_back(next);
        out.push_back(next);
        const std::size_t n = out.size();
        if (next == Vocab::kPeriod && n >= 3 && out[n - 3] == query &&
            (out[n - 2] == Vocab::kTrue || out[n - 2] == Vocab::kFalse || out[n - 2] == Vocab::kUndetermined))
            break;
    }
    return out;
}

EvalStats evaluate_exact_match(const Params& params, std::span<const Problem> problems, const Vocab& vocab,
                               std::size_t batch) {
    struct Item {
        std::size_t problem;
        int context_len;
    };
    EvalStats st;
    st.n = problems.size();
    std::vector<char> solved(problems.size(), 0), first_ok(problems.size(), 0);
    std::vector<std::vector<TokenId>> seqs;
    std::vector<Item> items;
    auto flush = [&] {
        if (seqs.empty()) return;
        const auto logits = forward_batch<float>(params, seqs);
        for (std::size_t s = 0; s < seqs.size(); ++s) {
            const auto& seq = seqs[s];
            const int c = items[s].context_len;
            bool all = true;
            for (int t = c - 1; t + 1 < static_cast<int>(seq.size()); ++t) {
                const bool hit = argmax_row(logits[s], t) == seq[static_cast<std::size_t>(t + 1)];
                if (t == c - 1 && hit) first_ok[items[s].problem] = 1;
                if (!hit) {
                    all = false;
                    break;
                }
            }
            if (all) solved[items[s].problem] = 1;
        }
        seqs.clear();
        items.clear();
    };
    for (std::size_t i = 0; i < problems.size(); ++i) {
        for (const auto& proof : minimal_proofs(problems[i])) {
            auto ts = encode_with_proof(problems[i], vocab, proof);
            items.push_back({i, ts.marks.context_len});
            seqs.push_back(std::move(ts.ids));
        }
        if (seqs.size() >= batch) flush();
    }
    flush();
    st.exact_match = static_cast<std::size_t>(std::count(solved.begin(), solved.end(), 1));
    st.first_token = static_cast<std::size_t>(std::count(first_ok.begin(), first_ok.end(), 1));
    return st;
}

EvalStats evaluate_greedy(const Params& params, std::span<const Problem> problems, const Vocab& vocab) {
    EvalStats st;
    st.n = problems.size();
    for (const auto& p : problems) {
        const auto ctx = encode(p, vocab, false);
        const auto out = generate_greedy(params, ctx.ids);
        const auto v = verify_answer(p, decode_words(out, vocab));
        st.exact_match += v.exact_match;
        st.first_token += v.first_token_correct;
        st.final_truth += v.final_truth_correct;
    }
    return st;
}

std::vector<TokenId> first_token_predictions(const Params& params, std::span<const std::vector<TokenId>> contexts,
                                             std::size_t batch) {
    std::vector<TokenId> out;
    out.reserve(contexts.size());
    for (std::size_t i = 0; i < contexts.size(); i += batch) {
        const auto chunk = contexts.subspan(i, std::min(batch, contexts.size() - i));
        const auto logits = forward_batch<float>(params, chunk);
        for (const auto& l : logits) out.push_back(argmax_row(l, l.rows() - 1));
    }
    return out;
}

}  // namespace logicirc
