#pragma once

// JSON-lines datasets. The first line is a header object; every following
// line is one record:
//
//   {"format":"logicirc-dataset","version":1,"split":"train","chain_length":3,
//    "pool_size":80,"seed":1,"count":500000, ...}
//   {"context":[0,25,9,...],"answer":[25,12,7,...],"signature":"9f2c...",
//    "problem":{"rules":[{"p":[10],"c":3},{"p":[3,4],"op":"or","c":0},...],
//               "facts":[[10,true],...],"query":0,
//               "meta":{"len":3,"queried":"logop","logop_rule":2,
//                       "logop_hops":[0,1],"linear_rules":[3,4]}}}

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "logicirc/logic.hpp"
#include "logicirc/vocab.hpp"

namespace logicirc {

struct DatasetRecord {
    std::vector<TokenId> context;
    std::vector<TokenId> answer;
    Problem problem;
    std::uint64_t signature = 0;

    bool operator==(const DatasetRecord&) const = default;
};

struct DatasetHeader {
    int version = 1;
    std::string split = "train";
    int chain_length = 3;
    int pool_size = 80;
    std::uint64_t seed = 0;
    double logop_query_prob = 0.8;

    bool operator==(const DatasetHeader&) const = default;
};

struct DatasetFile {
    DatasetHeader header;
    std::vector<DatasetRecord> records;

    bool operator==(const DatasetFile&) const = default;
};

class DatasetError : public std::runtime_error {
public:
    DatasetError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

DatasetRecord make_record(const Problem& p, const Vocab& vocab);

void persist_dataset(const std::filesystem::path& path, const DatasetFile& data);
DatasetFile load_dataset(const std::filesystem::path& path);

struct SplitSpec {
    SamplingSpec sampling = SamplingSpec::training();
    std::size_t train_n = 500000;
    std::size_t test_n = 5000;
    std::uint64_t seed = 1;
};

// Test split is drawn first; training problems whose signature appears in
// either split are redrawn, so the splits are signature-disjoint.
struct Splits {
    DatasetFile train;
    DatasetFile test;
};
Splits generate_splits(const SplitSpec& spec);
// Just the test half of generate_splits, reproduced without the training set.
DatasetFile generate_test_split(const SplitSpec& spec);

}  // namespace logicirc
