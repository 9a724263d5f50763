// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>
#include <torch/torch.h>

namespace covergen::diffusion {

// Linear-β DDPM schedule. Timesteps are 1-based: t ∈ [1, T]; alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  NoiseSchedule(int64_t timesteps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

  int64_t timesteps() const { return timesteps_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }
  double beta(int64_t t) const;
  double alpha(int64_t t) const { return 1.0 - beta(t); }
  double alpha_bar(int64_t t) const;  // t ∈ [0, T]
  // ᾱ gathered for a batch of timesteps, float32 [B].
  torch::Tensor alpha_bar(const torch::Tensor& t) const;

  // x_t = √ᾱ_t x0 + √(1−ᾱ_t) ε
  torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& noise) const;

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);

 private:
  int64_t timesteps_;
  double beta_start_, beta_end_;
  std::vector<double> alpha_bar_;  // index t, alpha_bar_[0] = 1
  torch::Tensor alpha_bar_t_;
};

// x̂0 = (x_t − √(1−ᾱ_t) ε̂) / √ᾱ_t
torch::Tensor predict_x0(const torch::Tensor& x_t, int64_t t, const torch::Tensor& eps, const NoiseSchedule& schedule);
torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& eps,
                         const NoiseSchedule& schedule);

// ε = ε_uncond + s (ε_cond − ε_uncond)
torch::Tensor cfg_combine(const torch::Tensor& eps_cond, const torch::Tensor& eps_uncond, double scale);

// Model space is [-1, 1]; images are [0, 1].
inline torch::Tensor to_model_space(const torch::Tensor& img) { return img * 2.0 - 1.0; }
inline torch::Tensor to_image_space(const torch::Tensor& x) { return ((x + 1.0) * 0.5).clamp(0.0, 1.0); }

}  // namespace covergen::diffusion
