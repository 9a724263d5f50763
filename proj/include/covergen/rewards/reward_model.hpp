// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/common/layers.hpp"
#include "covergen/embedder/embedder.hpp"
#include "covergen/rewards/pairs.hpp"

#include <json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace covergen::rewards {

// −ln σ(p_m − p_n), evaluated as softplus(p_n − p_m).
double bt_loss(double p_m, double p_n);
torch::Tensor bt_loss(const torch::Tensor& p_m, const torch::Tensor& p_n);  // mean over the batch

// Which inputs the reward model sees (ablations).
enum class RewardVariant { Full, ImageOnly, ImageTitle, ImageUser, NoTransformer };
RewardVariant parse_reward_variant(const std::string& name);
std::string to_string(RewardVariant v);
const std::vector<RewardVariant>& all_reward_variants();

struct RewardModelConfig {
  int64_t embed_dim = 64;
  int64_t width = 64;
  int64_t layers = 2;
  int64_t heads = 4;
  RewardVariant variant = RewardVariant::Full;
  nlohmann::json to_json() const;
  static RewardModelConfig from_json(const nlohmann::json& j);
};

// Heads over frozen embeddings:
//   t_f = FC_t(t), c_f = FC_c(c)  (width/2 each, so concat(t_f, c_f) has width)
//   i_f = FC_i(i), u_f = FC_u(u)
//   [t_t, i_t, u_t] = Transformer([concat(t_f, c_f), i_f, u_f] + type embeddings)
//   p = FC_per(concat(t_t, i_t, u_t))
// Ablations drop tokens (and the transformer for NoTransformer).
struct PersonalizedRewardImpl : torch::nn::Module {
  explicit PersonalizedRewardImpl(const RewardModelConfig& config);
  // Each input [B, embed_dim]; returns p [B].
  torch::Tensor forward(const torch::Tensor& title, const torch::Tensor& caption, const torch::Tensor& image,
                        const torch::Tensor& user);
  int64_t trainable_parameters() const;

  RewardModelConfig config;
  torch::nn::Linear fc_t{nullptr}, fc_c{nullptr}, fc_i{nullptr}, fc_u{nullptr};
  torch::Tensor type_embed;
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::Sequential fc_per{nullptr};
};
TORCH_MODULE(PersonalizedReward);

// Frozen-embedder features of the catalog and of user profiles.
struct RewardFeatures {
  std::map<int64_t, int64_t> item_row, user_row;
  torch::Tensor title, caption, image;  // [I, d]
  torch::Tensor user;                   // [U, d]
};
RewardFeatures compute_reward_features(const embedder::FrozenEmbedder& embedder,
                                       const std::vector<world::ItemRecord>& items,
                                       const std::vector<world::UserProfile>& users);

struct RewardModel {
  PersonalizedReward net{nullptr};
  std::vector<double> train_loss, val_accuracy;
  int64_t best_epoch = -1;

  // p for (user, item) rows using precomputed features; no gradient.
  torch::Tensor score_pairs(const RewardFeatures& f, const std::vector<int64_t>& users,
                            const std::vector<int64_t>& items) const;
  // Differentiable in `images` ([B,3,H,W] in [0,1]).
  torch::Tensor score_images(const embedder::FrozenEmbedder& embedder, const torch::Tensor& images,
                             const torch::Tensor& title_emb, const torch::Tensor& caption_emb,
                             const torch::Tensor& user_emb) const;

  void freeze();
  std::string digest() const;
  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static RewardModel load(const std::filesystem::path& path);
};

// Single-tuple score from raw inputs.
double personalized_score(const RewardModel& model, const embedder::FrozenEmbedder& embedder,
                          const world::TokenSeq& title, const world::TokenSeq& caption, const torch::Tensor& image,
                          const world::TokenSeq& user_text);

struct RewardTrainOptions {
  int64_t epochs = 60;
  int64_t batch = 64;
  double lr = 1e-4;
  int64_t patience = 5;
  uint64_t seed = 0;
};

// Minimises mean bt_loss on `train`; keeps the parameters of the epoch with
// the best validation accuracy and stops after `patience` epochs without
// improvement. Throws ConfigError on an empty split.
RewardModel train_personalized_reward(const RewardFeatures& features, const std::vector<PreferencePair>& train,
                                      const std::vector<PreferencePair>& val, const RewardModelConfig& config,
                                      const RewardTrainOptions& options);

// Fraction of pairs with p_m > p_n; ties count 0.5. ArgumentError on empty input.
double preference_accuracy(const std::vector<double>& p_m, const std::vector<double>& p_n);
double preference_accuracy(const RewardModel& model, const RewardFeatures& features,
                           const std::vector<PreferencePair>& pairs);

}  // namespace covergen::rewards
