#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dermfuse/common.hpp"

namespace dermfuse {

struct FoldAssignment {
    int k = 0;
    std::vector<int> fold_of;  // sample index -> fold id in [0, k)
};

// Greedy size-balanced grouped K-fold: groups ordered by (size descending,
// identifier ascending) are assigned to the fold with the smallest current
// sample count, ties broken by lowest fold index. All samples of a group
// land in one fold.
inline FoldAssignment group_kfold(const std::vector<std::string>& group_ids, int k) {
    if (k < 2) throw ConfigError("group_kfold: need at least 2 folds, got " + std::to_string(k));

    std::map<std::string, std::vector<size_t>> members;
    for (size_t i = 0; i < group_ids.size(); ++i) members[group_ids[i]].push_back(i);
    if (int64_t(members.size()) < int64_t(k))
        throw InsufficientGroupsError("group_kfold: " + std::to_string(members.size()) +
                                      " distinct groups < " + std::to_string(k) + " folds");

    struct GroupRef {
        const std::string* id;
        const std::vector<size_t>* idx;
    };
    std::vector<GroupRef> order;
    order.reserve(members.size());
    for (const auto& [id, idx] : members) order.push_back({&id, &idx});
    std::stable_sort(order.begin(), order.end(), [](const GroupRef& a, const GroupRef& b) {
        if (a.idx->size() != b.idx->size()) return a.idx->size() > b.idx->size();
        return *a.id < *b.id;
    });

    FoldAssignment out;
    out.k = k;
    out.fold_of.assign(group_ids.size(), -1);
    std::vector<int64_t> load(size_t(k), 0);
    for (const GroupRef& g : order) {
        int best = 0;
        for (int f = 1; f < k; ++f)
            if (load[size_t(f)] < load[size_t(best)]) best = f;
        for (size_t i : *g.idx) out.fold_of[i] = best;
        load[size_t(best)] += int64_t(g.idx->size());
    }
    return out;
}

inline std::pair<std::vector<size_t>, std::vector<size_t>> fold_iter(const FoldAssignment& a,
                                                                     int fold) {
    if (fold < 0 || fold >= a.k)
        throw ConfigError("fold_iter: fold " + std::to_string(fold) + " out of range [0, " +
                          std::to_string(a.k) + ")");
    std::pair<std::vector<size_t>, std::vector<size_t>> out;
    for (size_t i = 0; i < a.fold_of.size(); ++i)
        (a.fold_of[i] == fold ? out.second : out.first).push_back(i);
    return out;
}

}  // namespace dermfuse
