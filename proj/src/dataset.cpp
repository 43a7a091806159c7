#include "logicirc/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <unordered_set>

#include <json.hpp>

namespace logicirc {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "logicirc-dataset";

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
    if (s.size() != 16) throw std::invalid_argument("signature must be 16 hex digits");
    std::size_t used = 0;
    const auto v = std::stoull(s, &used, 16);
    if (used != s.size()) throw std::invalid_argument("bad signature");
    return v;
}

json problem_to_json(const Problem& p) {
    json rules = json::array();
    for (const auto& r : p.rules) {
        json jr;
        json prem = json::array();
        for (Var v : r.premises) prem.push_back(v.id);
        jr["p"] = prem;
        if (r.op) jr["op"] = std::string(to_string(*r.op));
        jr["c"] = r.conclusion.id;
        rules.push_back(jr);
    }
    json facts = json::array();
    for (const auto& f : p.facts) facts.push_back(json::array({f.var.id, f.value}));
    json meta = {{"len", p.meta.chain_length},
                 {"queried", std::string(to_string(p.meta.queried))},
                 {"logop_rule", p.meta.logop_rule},
                 {"logop_hops", p.meta.logop_hops},
                 {"linear_rules", p.meta.linear_rules}};
    return {{"rules", rules}, {"facts", facts}, {"query", p.query.id}, {"meta", meta}};
}

Var var_from(const json& j) { return Var{j.get<std::uint16_t>()}; }

Problem problem_from_json(const json& j) {
    Problem p;
    for (const auto& jr : j.at("rules")) {
        Rule r;
        for (const auto& v : jr.at("p")) r.premises.push_back(var_from(v));
        if (jr.contains("op")) {
            const auto op = jr.at("op").get<std::string>();
            if (op != "and" && op != "or") throw std::invalid_argument("unknown connective '" + op + "'");
            r.op = op == "and" ? LogOp::And : LogOp::Or;
        }
        r.conclusion = var_from(jr.at("c"));
        p.rules.push_back(std::move(r));
    }
    for (const auto& jf : j.at("facts")) p.facts.push_back({var_from(jf.at(0)), jf.at(1).get<bool>()});
    p.query = var_from(j.at("query"));
    const auto& m = j.at("meta");
    p.meta.chain_length = m.at("len").get<int>();
    const auto q = m.at("queried").get<std::string>();
    if (q != "logop" && q != "linear") throw std::invalid_argument("unknown chain '" + q + "'");
    p.meta.queried = q == "logop" ? Chain::LogOp : Chain::Linear;
    p.meta.logop_rule = m.at("logop_rule").get<int>();
    p.meta.logop_hops = m.at("logop_hops").get<std::vector<int>>();
    p.meta.linear_rules = m.at("linear_rules").get<std::vector<int>>();
    validate(p);
    return p;
}

}  // namespace

DatasetRecord make_record(const Problem& p, const Vocab& vocab) {
    DatasetRecord r;
    r.context = encode_words(context_words(p), vocab);
    r.answer = encode_words(proof_words(canonical_proof(p)), vocab);
    r.problem = p;
    r.signature = signature(p);
    return r;
}

void persist_dataset(const std::filesystem::path& path, const DatasetFile& data) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
        const auto& h = data.header;
        json header = {{"format", kFormat},
                       {"version", h.version},
                       {"split", h.split},
                       {"chain_length", h.chain_length},
                       {"pool_size", h.pool_size},
                       {"seed", h.seed},
                       {"logop_query_prob", h.logop_query_prob},
                       {"count", data.records.size()}};
        out << header.dump() << '\n';
        for (const auto& r : data.records) {
            json j = {{"context", r.context},
                      {"answer", r.answer},
                      {"signature", hex64(r.signature)},
                      {"problem", problem_to_json(r.problem)}};
            out << j.dump() << '\n';
        }
        if (!out) throw std::runtime_error("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

DatasetFile load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dataset " + path.string());
    DatasetFile data;
    std::string line;
    std::size_t lineno = 0;
    std::size_t declared = 0;

    if (!std::getline(in, line)) throw DatasetError(1, "missing header");
    ++lineno;
    try {
        const auto h = json::parse(line);
        if (h.at("format").get<std::string>() != kFormat) throw std::invalid_argument("not a logicirc dataset");
        data.header.version = h.at("version").get<int>();
        if (data.header.version != 1)
            throw std::invalid_argument("unsupported version " + std::to_string(data.header.version));
        data.header.split = h.at("split").get<std::string>();
        data.header.chain_length = h.at("chain_length").get<int>();
        data.header.pool_size = h.at("pool_size").get<int>();
        data.header.seed = h.at("seed").get<std::uint64_t>();
        data.header.logop_query_prob = h.at("logop_query_prob").get<double>();
        declared = h.at("count").get<std::size_t>();
    } catch (const std::exception& e) {
        throw DatasetError(lineno, std::string("bad header: ") + e.what());
    }

    const Vocab vocab(data.header.pool_size);
    data.records.reserve(declared);
    while (std::getline(in, line)) {
        ++lineno;
        try {
            const auto j = json::parse(line);
            DatasetRecord r;
            r.context = j.at("context").get<std::vector<TokenId>>();
            r.answer = j.at("answer").get<std::vector<TokenId>>();
            r.signature = parse_hex64(j.at("signature").get<std::string>());
            r.problem = problem_from_json(j.at("problem"));
            for (TokenId t : r.context)
                if (t < 0 || t >= vocab.size()) throw std::invalid_argument("token id out of range");
            for (TokenId t : r.answer)
                if (t < 0 || t >= vocab.size()) throw std::invalid_argument("token id out of range");
            if (r.context != encode_words(context_words(r.problem), vocab))
                throw std::invalid_argument("context does not encode the stored problem");
            if (signature(r.problem) != r.signature) throw std::invalid_argument("signature mismatch");
            data.records.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw DatasetError(lineno, e.what());
        }
    }
    if (data.records.size() != declared)
        throw DatasetError(lineno + 1, "header declares " + std::to_string(declared) + " records, found " +
                                           std::to_string(data.records.size()));
    return data;
}

namespace {

DatasetFile draw_split(const SplitSpec& spec, const std::string& split, std::size_t n, std::uint64_t stream,
                       std::unordered_set<std::uint64_t>& seen) {
    const Vocab vocab(spec.sampling.pool_size);
    DatasetFile out;
    out.header.split = split;
    out.header.chain_length = spec.sampling.chain_length;
    out.header.pool_size = spec.sampling.pool_size;
    out.header.seed = spec.seed;
    out.header.logop_query_prob = spec.sampling.logop_query_prob;
    out.records.reserve(n);
    CounterRng rng(spec.seed, stream);
    std::size_t attempts = 0;
    while (out.records.size() < n) {
        if (++attempts > 20 * n + 1000)
            throw std::runtime_error("could not draw " + std::to_string(n) + " distinct problems for split " + split);
        Problem p = sample_problem(rng, spec.sampling);
        const auto sig = signature(p);
        if (!seen.insert(sig).second) continue;
        out.records.push_back(make_record(p, vocab));
    }
    return out;
}

constexpr std::uint64_t kTestStream = 0x7e57;
constexpr std::uint64_t kTrainStream = 0x77a1;

}  // namespace

Splits generate_splits(const SplitSpec& spec) {
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(spec.train_n + spec.test_n);
    Splits s;
    s.test = draw_split(spec, "test", spec.test_n, kTestStream, seen);
    s.train = draw_split(spec, "train", spec.train_n, kTrainStream, seen);
    return s;
}

DatasetFile generate_test_split(const SplitSpec& spec) {
    std::unordered_set<std::uint64_t> seen;
    return draw_split(spec, "test", spec.test_n, kTestStream, seen);
}

}  // namespace logicirc
