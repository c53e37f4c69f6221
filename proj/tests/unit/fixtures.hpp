#pragma once

#include "casemix/ipd.hpp"

#include <string>
#include <vector>

namespace fixtures {

/// A block of identical subjects: `n` rows with covariates `l`, arm `treat`,
/// of which the first `events` have outcome 1.
struct Block {
    std::string study;
    int treat;
    std::vector<double> l;
    int n;
    int events;
};

inline casemix::IpdDataset from_blocks(const std::vector<std::string>& covariates, const std::vector<Block>& blocks) {
    std::vector<casemix::IpdRecord> records;
    for (const auto& b : blocks)
        for (int i = 0; i < b.n; ++i) records.push_back({b.study, b.treat, i < b.events ? 1 : 0, b.l});
    return casemix::IpdDataset(casemix::CovariateSchema(covariates), records);
}

/// Two trials with a binary covariate. Trial "k" (listed first, index 0) has
/// P(L=1) = 0.25 and within-arm risks 0.2 / 0.6 (treated) and 0.3 / 0.5
/// (control) at L = 0 / 1. Trial "j" (index 1) has P(L=1) = 0.5. Standardizing
/// either arm of trial k to trial j gives exactly 0.5*0.2 + 0.5*0.6 = 0.4 and
/// 0.5*0.3 + 0.5*0.5 = 0.4.
inline casemix::IpdDataset discrete_pair() {
    return from_blocks({"L"}, {
                                  {"k", 1, {0.0}, 30, 6},
                                  {"k", 1, {1.0}, 10, 6},
                                  {"k", 0, {0.0}, 30, 9},
                                  {"k", 0, {1.0}, 10, 5},
                                  {"j", 1, {0.0}, 20, 10},
                                  {"j", 1, {1.0}, 20, 12},
                                  {"j", 0, {0.0}, 20, 8},
                                  {"j", 0, {1.0}, 20, 4},
                              });
}

}  // namespace fixtures
