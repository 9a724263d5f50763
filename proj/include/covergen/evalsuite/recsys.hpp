// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/embedder/embedder.hpp"
#include "covergen/world/world.hpp"

#include <torch/torch.h>

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace covergen::evalsuite {

// Which cover features the recommender sees. Each mode adds to the previous.
enum class RecsysMode { NoImage, Item, AveragedUser, GeneratedUser };

std::string recsys_mode_name(RecsysMode mode);
// ArgumentError for unknown names.
RecsysMode parse_recsys_mode(const std::string& name);
const std::vector<RecsysMode>& all_recsys_modes();

// Row-indexed interaction data. Rows index `items` / `users` of the world.
struct RecsysData {
  int64_t n_users = 0;
  int64_t n_items = 0;
  std::vector<std::pair<int64_t, int64_t>> train;  // (user row, item row)
  std::map<int64_t, std::vector<int64_t>> seen;    // training items per user row, excluded at test time
  std::map<int64_t, std::vector<int64_t>> test;    // held-out items per user row
  torch::Tensor item_features;       // [I, d] embedder features of each cover
  torch::Tensor history_features;    // [U, d] mean features of the user's history covers
  torch::Tensor generated_features;  // [U, d] mean features of covers generated for the user
};

// History interactions train, future interactions test. Generated features
// are left undefined; fill them before running the generated_user mode.
RecsysData build_recsys_data(const embedder::FrozenEmbedder& embedder, const std::vector<world::ItemRecord>& items,
                             const std::vector<world::UserProfile>& users, const world::TimeSplit& split);

struct RecsysOptions {
  int64_t k = 10;
  int64_t epochs = 10;
  int64_t batch = 256;
  double lr = 3e-3;
  int64_t id_dim = 8;
  int64_t out_dim = 32;
  double temperature = 0.5;
};

struct RecsysResult {
  double recall = 0.0;
  double ndcg = 0.0;
  int64_t n_users = 0;  // test users scored
};

// Two-tower dot-product recommender trained with in-batch softmax, then
// Recall@k and NDCG@k averaged over test users (training items excluded from
// the ranking).
RecsysResult recsys_eval(RecsysMode mode, const RecsysData& data, const RecsysOptions& options, uint64_t seed);

}  // namespace covergen::evalsuite
