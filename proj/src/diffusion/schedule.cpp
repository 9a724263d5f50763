// SPDX-License-Identifier: Apache-2.0
#include "covergen/diffusion/schedule.hpp"

#include "covergen/common/errors.hpp"

#include <cmath>

namespace covergen::diffusion {

NoiseSchedule::NoiseSchedule(int64_t timesteps, double beta_start, double beta_end)
    : timesteps_(timesteps), beta_start_(beta_start), beta_end_(beta_end) {
  if (timesteps < 1) throw ConfigError("diffusion timesteps must be >= 1");
  if (!(beta_start > 0 && beta_end < 1 && beta_start <= beta_end)) throw ConfigError("invalid beta range");
  alpha_bar_.assign(static_cast<size_t>(timesteps + 1), 1.0);
  for (int64_t t = 1; t <= timesteps; ++t) alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - beta(t));
  alpha_bar_t_ = torch::tensor(alpha_bar_, torch::kDouble);
}

double NoiseSchedule::beta(int64_t t) const {
  if (t < 1 || t > timesteps_) throw ArgumentError("timestep out of range: " + std::to_string(t));
  if (timesteps_ == 1) return beta_start_;
  return beta_start_ + (beta_end_ - beta_start_) * static_cast<double>(t - 1) / static_cast<double>(timesteps_ - 1);
}

double NoiseSchedule::alpha_bar(int64_t t) const {
  if (t < 0 || t > timesteps_) throw ArgumentError("timestep out of range: " + std::to_string(t));
  return alpha_bar_[t];
}

torch::Tensor NoiseSchedule::alpha_bar(const torch::Tensor& t) const {
  if (t.numel() > 0 && (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() > timesteps_)) {
    throw ArgumentError("timestep out of range");
  }
  return alpha_bar_t_.index_select(0, t.to(torch::kInt64).reshape({-1})).to(torch::kFloat);
}

torch::Tensor NoiseSchedule::q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& noise) const {
  auto ab = alpha_bar(t).to(x0.dtype()).view({-1, 1, 1, 1});
  return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise;
}

nlohmann::json NoiseSchedule::to_json() const {
  return {{"timesteps", timesteps_}, {"beta_start", beta_start_}, {"beta_end", beta_end_}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  return NoiseSchedule(j.at("timesteps").get<int64_t>(), j.at("beta_start").get<double>(),
                       j.at("beta_end").get<double>());
}

torch::Tensor predict_x0(const torch::Tensor& x_t, int64_t t, const torch::Tensor& eps, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.timesteps()) throw ArgumentError("timestep out of range: " + std::to_string(t));
  const double ab = schedule.alpha_bar(t);
  return (x_t - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
}

torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& eps,
                         const NoiseSchedule& schedule) {
  auto ab = schedule.alpha_bar(t).to(x_t.dtype()).view({-1, 1, 1, 1});
  return (x_t - (1.0 - ab).sqrt() * eps) / ab.sqrt();
}

torch::Tensor cfg_combine(const torch::Tensor& eps_cond, const torch::Tensor& eps_uncond, double scale) {
  if (eps_cond.sizes() != eps_uncond.sizes()) throw ArgumentError("cfg_combine needs equal shapes");
  if (scale == 1.0) return eps_cond;
  if (scale == 0.0) return eps_uncond;
  return eps_uncond + scale * (eps_cond - eps_uncond);
}

}  // namespace covergen::diffusion
