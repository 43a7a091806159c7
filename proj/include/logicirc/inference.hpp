#pragma once

#include <span>
#include <vector>

#include "logicirc/logic.hpp"
#include "logicirc/model.hpp"
#include "logicirc/vocab.hpp"

namespace logicirc {

// Argmax decoding after a context that ends with ANSWER. Stops after the
// "." that closes the query variable's truth value, or after max_new tokens.
// Returns only the generated tokens. Interventions are applied at every
// decoding step; their positions refer to the context.
std::vector<TokenId> generate_greedy(const Params& params, std::span<const TokenId> context, int max_new = 32,
                                     std::span<const Intervention<float>> interventions = {});

struct EvalStats {
    std::size_t n = 0;
    std::size_t exact_match = 0;
    std::size_t first_token = 0;
    std::size_t final_truth = 0;  // filled by evaluate_greedy only

    double exact_rate() const { return n ? static_cast<double>(exact_match) / static_cast<double>(n) : 0.0; }
    double first_token_rate() const { return n ? static_cast<double>(first_token) / static_cast<double>(n) : 0.0; }
    double final_truth_rate() const { return n ? static_cast<double>(final_truth) / static_cast<double>(n) : 0.0; }
};

// Exact match by teacher forcing: greedy decoding reproduces proof P exactly
// iff the argmax at every answer position equals P's next token, because the
// stop rule fires only at P's final ".". A problem counts as solved if any
// accepted proof is reproduced.
EvalStats evaluate_exact_match(const Params& params, std::span<const Problem> problems, const Vocab& vocab,
                               std::size_t batch = 64);

// Same numbers through real decoding plus verify_answer; slower.
EvalStats evaluate_greedy(const Params& params, std::span<const Problem> problems, const Vocab& vocab);

// Argmax at the ANSWER position for every context.
std::vector<TokenId> first_token_predictions(const Params& params, std::span<const std::vector<TokenId>> contexts,
                                             std::size_t batch = 128);

}  // namespace logicirc
