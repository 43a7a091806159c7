#include <doctest.h>

#include <fstream>
#include <set>
#include <unordered_set>

#include "logicirc/dataset.hpp"
#include "logicirc/vocab.hpp"

using namespace logicirc;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("logicirc_" + name);
}

}  // namespace

TEST_CASE("vocabulary layout") {
    const Vocab v = build_vocab(80);
    CHECK(v.size() == 95);
    CHECK(v.id("implies") == Vocab::kImplies);
    CHECK(v.token(v.id("implies")) == "implies");
    CHECK(v.id("A") == 15);
    CHECK(v.var_id(Var{79}) == 94);
    CHECK(v.token(94) == "B3");
    for (TokenId i = 0; i < v.size(); ++i) CHECK(v.id(v.token(i)) == i);
    const Vocab w = build_vocab(80);
    for (TokenId i = 0; i < v.size(); ++i) CHECK(v.token(i) == w.token(i));
    CHECK_THROWS_AS(build_vocab(6), std::invalid_argument);
    CHECK_THROWS_AS(v.id("BANANA"), std::invalid_argument);
}

TEST_CASE("encoding") {
    const Vocab vocab(80);
    CounterRng rng(1);
    std::set<std::vector<TokenId>> seen;
    std::set<std::uint64_t> sigs;
    for (int i = 0; i < 1000; ++i) {
        const auto p = sample_problem(rng, SamplingSpec::training());
        const auto seq = encode(p, vocab, false);
        CHECK(seq.size() == context_length(3));
        CHECK(seq.size() == 40);
        CHECK(seq.ids[static_cast<std::size_t>(seq.marks.query_pos)] == vocab.var_id(p.query));
        CHECK(seq.marks.answer_pos == seq.size() - 1);
        CHECK(seq.ids.back() == Vocab::kAnswer);
        CHECK(seq.ids[static_cast<std::size_t>(seq.marks.rules_end)] == Vocab::kRulesEnd);
        CHECK(seq.ids[static_cast<std::size_t>(seq.marks.facts_start)] == Vocab::kFactsStart);
        CHECK(decode(seq.ids, vocab) == render_context(p));
        // Injective: distinct problems give distinct token sequences.
        if (sigs.insert(signature(p)).second) CHECK(seen.insert(seq.ids).second);

        const auto full = encode(p, vocab, true);
        CHECK(full.has_answer());
        const std::vector<TokenId> answer(full.ids.begin() + full.marks.context_len, full.ids.end());
        CHECK(verify_answer(p, decode_words(answer, vocab)).exact_match);
    }
    CounterRng rng2(2);
    CHECK(encode(sample_problem(rng2, SamplingSpec::training(2)), vocab, false).size() == context_length(2));
    CHECK(context_length(2) == 28);
}

TEST_CASE("dataset round trip and corruption") {
    SplitSpec spec;
    spec.train_n = 1000;
    spec.test_n = 100;
    spec.seed = 5;
    const auto splits = generate_splits(spec);
    const auto path = temp_file("ds.jsonl");
    persist_dataset(path, splits.train);
    const auto back = load_dataset(path);
    CHECK(back == splits.train);

    std::unordered_set<std::uint64_t> train_sigs;
    for (const auto& r : splits.train.records) CHECK(train_sigs.insert(r.signature).second);
    for (const auto& r : splits.test.records) CHECK(train_sigs.count(r.signature) == 0);
    CHECK(generate_test_split(spec) == splits.test);

    const Vocab vocab(80);
    for (const auto& r : back.records)
        CHECK(verify_answer(r.problem, decode_words(r.answer, vocab)).exact_match);

    SUBCASE("truncated file names the offending line") {
        const auto size = std::filesystem::file_size(path);
        std::filesystem::resize_file(path, size - 40);
        try {
            load_dataset(path);
            FAIL("expected an error");
        } catch (const DatasetError& e) {
            CHECK(e.line() == 1001);
        }
    }
    SUBCASE("edited record is rejected") {
        std::ifstream in(path);
        std::string all((std::istreambuf_iterator<char>(in)), {});
        in.close();
        const auto pos = all.find("\"context\":[0,", all.find('\n'));
        all.replace(pos, 13, "\"context\":[1,");
        std::ofstream(path) << all;
        try {
            load_dataset(path);
            FAIL("expected an error");
        } catch (const DatasetError& e) {
            CHECK(e.line() == 2);
        }
    }
    SUBCASE("missing records are detected") {
        std::ifstream in(path);
        std::string header;
        std::getline(in, header);
        in.close();
        std::ofstream(path) << header << '\n';
        CHECK_THROWS_AS(load_dataset(path), DatasetError);
    }
    std::filesystem::remove(path);
}

TEST_CASE("split sizes") {
    SplitSpec spec;
    spec.train_n = 20000;
    spec.test_n = 5000;
    const auto s = generate_splits(spec);
    CHECK(s.train.records.size() == 20000);
    CHECK(s.test.records.size() == 5000);
    CHECK(s.test.header.split == "test");
}
