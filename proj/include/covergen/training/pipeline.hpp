// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/context/context_encoder.hpp"
#include "covergen/context/user_encoder.hpp"
#include "covergen/diffusion/sampler.hpp"
#include "covergen/embedder/embedder.hpp"
#include "covergen/rewards/reward_model.hpp"

#include <map>
#include <string>
#include <vector>

namespace covergen::training {

// Every frozen component plus per-item / per-user conditioning computed once.
struct FrozenStack {
  embedder::FrozenEmbedder embedder;
  context::ContextModel context;
  context::UserModel users_model;
  diffusion::BaseModel base;
  rewards::RewardModel reward;  // may be empty before train-reward

  std::vector<world::ItemRecord> items;
  std::vector<world::UserProfile> users;
  std::map<int64_t, std::vector<world::Interaction>> history;

  torch::Tensor context_bank;  // [I, N, d]   C_ref of each item's untransformed reference
  torch::Tensor user_bank;     // [U, d_u]    U_pre from history
  torch::Tensor prompt_ids;    // [I, L]      explicit prompts
  torch::Tensor caption_ids;   // [I, L]
  torch::Tensor prompt_emb, caption_emb, title_emb;  // [I, d]
  torch::Tensor profile_emb;   // [U, d]

  int64_t item_row(int64_t item_id) const;
  int64_t user_row(int64_t user_id) const;

  // Digests of every frozen group, keyed by group name.
  std::map<std::string, std::string> frozen_digests() const;

  std::map<int64_t, int64_t> item_index, user_index;
};

// Computes the banks. `reward` may be default-constructed.
FrozenStack build_stack(embedder::FrozenEmbedder embedder, context::ContextModel context,
                        context::UserModel users_model, diffusion::BaseModel base, rewards::RewardModel reward,
                        std::vector<world::ItemRecord> items, std::vector<world::UserProfile> users,
                        const std::vector<world::Interaction>& history);

struct ConditionOptions {
  bool use_meta = true;
  bool use_user = true;
};

// c_p for (item, user) rows, or an undefined tensor when both sources are off.
torch::Tensor personalized_condition(const FrozenStack& stack, diffusion::Adapter& adapter,
                                     const std::vector<int64_t>& item_rows, const std::vector<int64_t>& user_rows,
                                     const ConditionOptions& options);

struct GenerateOptions {
  diffusion::SampleOptions sample;
  ConditionOptions condition;
  bool personalized = true;  // false: prompt only, no c_p
};

// Covers in [0, 1] for the given (item row, user row) pairs. Row i of the
// result uses noise derived from (sample.seed, i).
torch::Tensor generate_covers(const FrozenStack& stack, diffusion::Adapter* adapter,
                              const std::vector<int64_t>& item_rows, const std::vector<int64_t>& user_rows,
                              const GenerateOptions& options, int64_t chunk = 64);

}  // namespace covergen::training
