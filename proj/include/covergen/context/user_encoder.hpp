// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/world/world.hpp"

#include <json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <vector>

namespace covergen::context {

struct UserEncoderConfig {
  int64_t dim = 32;
  int64_t hidden = 64;
  nlohmann::json to_json() const;
  static UserEncoderConfig from_json(const nlohmann::json& j);
};

// Two-tower model. The item tower embeds public item metadata (style
// features); the user tower combines attribute embeddings with the mean item
// embedding of the user's history. Both outputs are unit-norm.
struct UserEncoderImpl : torch::nn::Module {
  explicit UserEncoderImpl(const UserEncoderConfig& config);

  torch::Tensor item_embed(const torch::Tensor& features);  // [B, kFeatureDim] -> [B, dim]
  // attributes: [B, A] category ids in attribute_schema order.
  // history_mean: [B, dim]; has_history: [B] bool (false -> attributes only).
  torch::Tensor user_embed(const torch::Tensor& attributes, const torch::Tensor& history_mean,
                           const torch::Tensor& has_history);

  UserEncoderConfig config;
  torch::nn::ModuleList attribute_tables{nullptr};
  torch::nn::Sequential item_tower{nullptr}, user_tower{nullptr};
};
TORCH_MODULE(UserEncoder);

torch::Tensor attribute_tensor(const std::vector<world::UserProfile>& users);  // [B, A] int64
torch::Tensor style_features(const std::vector<world::ItemRecord>& items);     // [B, kFeatureDim] float

struct UserTrainOptions {
  int64_t epochs = 30;
  int64_t batch = 128;
  double lr = 3e-3;
  double temperature = 0.1;
  uint64_t seed = 0;
};

struct UserModel {
  UserEncoder encoder{nullptr};
  std::vector<double> epoch_loss;

  // e_u for one user given the items in their history (may be empty).
  torch::Tensor encode(const world::UserProfile& user, const std::vector<world::ItemRecord>& history) const;
  // Batched over users; `history` maps user_id -> interactions (items looked up in `catalog`).
  torch::Tensor encode_all(const std::vector<world::UserProfile>& users,
                           const std::map<int64_t, std::vector<world::Interaction>>& history,
                           const std::vector<world::ItemRecord>& catalog) const;
  torch::Tensor embed_items(const std::vector<world::ItemRecord>& items) const;

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static UserModel load(const std::filesystem::path& path);
  std::string digest() const;
  void freeze();
};

// In-batch softmax over (user, interacted item) pairs. The user side sees its
// history with the positive item left out.
UserModel train_user_encoder(const std::vector<world::UserProfile>& users, const std::vector<world::ItemRecord>& items,
                             const std::vector<world::Interaction>& history, const UserEncoderConfig& config,
                             const UserTrainOptions& options);

}  // namespace covergen::context
