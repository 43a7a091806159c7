#pragma once

#include <optional>

#include "logicirc/logic.hpp"
#include "logicirc/model.hpp"

namespace fixtures {

using namespace logicirc;

inline Var V(char c) { return Var{static_cast<std::uint16_t>(c - 'A')}; }

inline Rule unary(char a, char c) { return {{V(a)}, std::nullopt, V(c)}; }
inline Rule binary(char a, LogOp op, char b, char c) { return {{V(a), V(b)}, op, V(c)}; }

// The worked example: K implies D. V implies E. D or E implies A.
// P implies T. T implies S.
inline Problem worked_example(bool k = true, bool v = false, bool p = true, LogOp op = LogOp::Or) {
    Problem pr;
    pr.rules = {unary('K', 'D'), unary('V', 'E'), binary('D', op, 'E', 'A'), unary('P', 'T'), unary('T', 'S')};
    pr.facts = {{V('K'), k}, {V('V'), v}, {V('P'), p}};
    pr.query = V('A');
    pr.meta.chain_length = 3;
    pr.meta.queried = Chain::LogOp;
    pr.meta.logop_rule = 2;
    pr.meta.logop_hops = {0, 1};
    pr.meta.linear_rules = {3, 4};
    validate(pr);
    return pr;
}

// Length 2: A or B implies C. D implies E.
inline Problem short_example(bool a, bool b, bool d, Chain queried, LogOp op = LogOp::Or) {
    Problem pr;
    pr.rules = {binary('A', op, 'B', 'C'), unary('D', 'E')};
    pr.facts = {{V('A'), a}, {V('B'), b}, {V('D'), d}};
    pr.meta.chain_length = 2;
    pr.meta.queried = queried;
    pr.meta.logop_rule = 0;
    pr.meta.linear_rules = {1};
    pr.query = queried == Chain::LogOp ? V('C') : V('E');
    validate(pr);
    return pr;
}

// Small model over the real vocabulary with O(scale) random weights, so that
// attention is far from uniform.
inline Params random_model(std::uint64_t seed, int kv_groups = 3, int d_model = 24, double scale = 0.5) {
    ModelConfig c;
    c.layers = 3;
    c.heads = 3;
    c.d_model = d_model;
    c.max_seq_len = 72;
    c.kv_groups = kv_groups;
    auto p = ModelParams<double>::zeros(c);
    CounterRng rng(seed, 11);
    p.visit([&](const std::string& name, double* d, Eigen::Index r, Eigen::Index cols) {
        const bool gain = name.ends_with("gain");
        for (Eigen::Index i = 0; i < r * cols; ++i) d[i] = (gain ? 1.0 : 0.0) + rng.normal(0.0, scale);
    });
    return p.cast<float>();
}

}  // namespace fixtures
