// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/common/tensor_io.hpp"
#include "covergen/training/pipeline.hpp"

#include <json.hpp>

#include <map>
#include <string>
#include <vector>

namespace covergen::training {

struct TrainConfig {
  double lambda_h = 0.05;
  double lambda_per = 1.0;
  double lambda_p = 0.5;
  double lambda_r = 0.1;
  int64_t stage1_steps = 100;
  int64_t stage2_steps = 600;
  int64_t batch = 8;
  double lr = 5e-4;
  double t_lo = 0.1;  // fraction of T
  double t_hi = 0.9;
  int64_t sample_steps = 15;
  // Subtract each image's mean score over the batch's users, leaving only the user-specific part.
  bool center_per = true;
  ConditionOptions condition;
  uint64_t seed = 0;

  void validate(int64_t timesteps) const;
  nlohmann::json to_json() const;
};

// Scores of one generated batch (means) and the weighted objective.
struct RewardBundle {
  double h = 0, p = 0, per = 0, rec = 0, total = 0;
  nlohmann::json to_json() const;
};

struct RewardWeights {
  double h = 0.25, per = 0.25, p = 0.25, r = 0.25;
};

// total = λ_h·(−h) + λ_per·(−per) + λ_p·(−p) + λ_r·(−rec), averaged over the
// batch. A zero λ leaves its term out of the graph entirely.
torch::Tensor combine_rewards(const torch::Tensor& h, const torch::Tensor& p, const torch::Tensor& per,
                              const torch::Tensor& rec, const RewardWeights& w);

// Reward-gradient timesteps: the points of the DDIM grid inside [t_lo·T, t_hi·T].
std::vector<int64_t> feedback_timesteps(int64_t timesteps, int64_t sample_steps, double t_lo, double t_hi);

// x̂0 (image space, [0,1]) for a batch via the truncated path: a no-gradient
// DDIM rollout (guidance 1) down to t*, then one gradient-carrying prediction.
torch::Tensor truncated_x0(const FrozenStack& stack, diffusion::Adapter& adapter, const std::vector<int64_t>& item_rows,
                           const std::vector<int64_t>& user_rows, const TrainConfig& config, int64_t t_star,
                           uint64_t noise_seed);

struct StageLog {
  std::vector<double> loss;
  std::vector<RewardBundle> rewards;  // stage 2 only
  nlohmann::json to_json() const;
};

// Stage 1: minimise λ_r·(1 − cos(embed_image(x̂0), embed_text(caption))).
// Only adapter and fusion parameters are optimised.
StageLog stage1_initialize(diffusion::Adapter& adapter, const FrozenStack& stack, const TrainConfig& config);

// Stage 2: multi-reward feedback. Throws ConfigError naming a reward whose
// model is missing while its λ is positive.
StageLog stage2_reward_feedback(diffusion::Adapter& adapter, const FrozenStack& stack, const TrainConfig& config);

// Mean rewards of x̂0 over a fixed probe set (no gradient).
RewardBundle probe_rewards(const FrozenStack& stack, diffusion::Adapter& adapter, const TrainConfig& config,
                           int64_t n_probe, uint64_t seed);

struct AuditEntry {
  std::string group;
  bool frozen = true;
  std::string before, after;
  bool changed() const { return before != after; }
};

struct AuditReport {
  std::vector<AuditEntry> entries;
  double adapter_max_delta = 0.0;
  bool passed() const;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

// Compares digests taken before training with the current state. The adapter
// is reported with its largest absolute parameter change. Throws
// FrozenParameterChanged when a frozen group differs.
AuditReport freeze_audit(const std::map<std::string, std::string>& before, const FrozenStack& stack,
                         const NamedTensors& adapter_before, const diffusion::Adapter& adapter_after);

}  // namespace covergen::training
