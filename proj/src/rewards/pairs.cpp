// SPDX-License-Identifier: Apache-2.0
#include "covergen/rewards/pairs.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>

namespace covergen::rewards {

std::vector<PreferencePair> build_preference_pairs(const std::vector<world::Interaction>& interactions, int64_t k1,
                                                   int64_t k2) {
  if (k1 < 1 || k2 < 1) throw ArgumentError("k1 and k2 must be >= 1");
  std::vector<PreferencePair> out;
  for (auto& [user, rows] : world::group_by_user(interactions)) {
    if (rows.size() < kMinInteractions) continue;
    if (static_cast<size_t>(k1 + k2) > rows.size()) continue;
    auto ranked = rows;
    std::sort(ranked.begin(), ranked.end(), [](const world::Interaction& a, const world::Interaction& b) {
      if (a.relevance != b.relevance) return a.relevance > b.relevance;
      return a.item_id < b.item_id;
    });
    const auto n = static_cast<int64_t>(ranked.size());
    for (int64_t i = 0; i < k1; ++i) {
      for (int64_t j = n - k2; j < n; ++j) out.push_back({user, ranked[i].item_id, ranked[j].item_id});
    }
  }
  return out;
}

void write_pairs(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path.string());
  for (const auto& p : pairs) {
    f << nlohmann::json{{"user_id", p.user_id}, {"item_m", p.item_m}, {"item_n", p.item_n}}.dump() << '\n';
  }
}

std::vector<PreferencePair> read_pairs(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw MissingDependency(path.string(), "train-reward");
  std::vector<PreferencePair> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("user_id"), j.at("item_m"), j.at("item_n")});
  }
  return out;
}

PairSplit split_pairs_by_user(const std::vector<PreferencePair>& pairs, uint64_t seed) {
  std::set<int64_t> ids;
  for (const auto& p : pairs) ids.insert(p.user_id);
  std::vector<int64_t> users(ids.begin(), ids.end());
  auto rng = make_engine(seed, "pair-split");
  std::shuffle(users.begin(), users.end(), rng);
  const auto n = users.size();
  const auto n_train = n * 8 / 10;
  const auto n_val = n / 10;
  std::map<int64_t, int> part;
  for (size_t i = 0; i < n; ++i) part[users[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
  PairSplit s;
  for (const auto& p : pairs) {
    switch (part[p.user_id]) {
      case 0: s.train.push_back(p); break;
      case 1: s.val.push_back(p); break;
      default: s.test.push_back(p); break;
    }
  }
  return s;
}

}  // namespace covergen::rewards
