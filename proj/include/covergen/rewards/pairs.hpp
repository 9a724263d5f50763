// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/world/world.hpp"

#include <filesystem>
#include <ostream>
#include <vector>

namespace covergen::rewards {

struct PreferencePair {
  int64_t user_id = 0;
  int64_t item_m = 0;  // preferred
  int64_t item_n = 0;  // less preferred
  bool operator==(const PreferencePair&) const = default;
};

inline std::ostream& operator<<(std::ostream& os, const PreferencePair& p) {
  return os << "(" << p.user_id << ": " << p.item_m << " > " << p.item_n << ")";
}

inline constexpr size_t kMinInteractions = 6;

// Per user with at least six interactions: rank by relevance (descending,
// ties by item_id ascending) and emit top-k1 × bottom-k2. Users with
// k1 + k2 > count are skipped. Output is ordered by user_id, then rank.
std::vector<PreferencePair> build_preference_pairs(const std::vector<world::Interaction>& interactions, int64_t k1,
                                                   int64_t k2);

void write_pairs(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs);
std::vector<PreferencePair> read_pairs(const std::filesystem::path& path);

// 80/10/10 split by user id (shuffled with seed). Every pair of a user lands in
// the same split.
struct PairSplit {
  std::vector<PreferencePair> train, val, test;
};
PairSplit split_pairs_by_user(const std::vector<PreferencePair>& pairs, uint64_t seed);

}  // namespace covergen::rewards
