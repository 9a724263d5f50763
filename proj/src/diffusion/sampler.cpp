// SPDX-License-Identifier: Apache-2.0
#include "covergen/diffusion/sampler.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/rng.hpp"

#include <cmath>

namespace covergen::diffusion {

std::vector<int64_t> ddim_timesteps(int64_t timesteps, int64_t steps) {
  if (steps < 1) throw ArgumentError("DDIM needs at least one step");
  if (steps > timesteps) throw ArgumentError("DDIM steps exceed the schedule length");
  std::vector<int64_t> out;
  for (int64_t k = steps; k >= 1; --k) out.push_back(k * timesteps / steps);
  return out;
}

torch::Tensor ddim_step(const torch::Tensor& x_t, int64_t t, int64_t t_prev, const torch::Tensor& eps,
                        const NoiseSchedule& schedule, bool clip_x0) {
  auto x0 = predict_x0(x_t, t, eps, schedule);
  if (clip_x0) x0 = x0.clamp(-1.0, 1.0);
  const double ab_prev = schedule.alpha_bar(t_prev);
  if (clip_x0) {
    // Re-derive ε from the clipped x̂0 so the update stays on the DDIM path.
    const double ab = schedule.alpha_bar(t);
    auto e = (x_t - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
    return std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * e;
  }
  return std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
}

torch::Tensor guided_noise(Denoiser& model, const torch::Tensor& x, int64_t t, const Condition& cond, double guidance) {
  const auto b = x.size(0);
  auto tt = torch::full({b}, t, torch::kInt64);
  auto eps_cond = model->forward(x, tt, cond.text, cond.c_p, cond.adapter);
  if (guidance == 1.0) return eps_cond;
  auto eps_uncond = model->forward(x, tt, null_prompt(b));
  return cfg_combine(eps_cond, eps_uncond, guidance);
}

torch::Tensor initial_noise(int64_t batch, int64_t image_size, uint64_t seed) {
  std::vector<torch::Tensor> rows;
  for (int64_t i = 0; i < batch; ++i) {
    auto gen = make_generator(derive_seed(seed, "ddim-x" + std::to_string(i)));
    rows.push_back(torch::randn({3, image_size, image_size}, gen));
  }
  return torch::stack(rows);
}

PartialRollout ddim_rollout(Denoiser& model, const NoiseSchedule& schedule, const Condition& cond,
                            const torch::Tensor& x_T, const SampleOptions& options, int64_t stop_after) {
  const auto ts = ddim_timesteps(schedule.timesteps(), options.steps);
  const auto n = stop_after < 0 ? static_cast<int64_t>(ts.size()) : std::min<int64_t>(stop_after, ts.size());
  auto x = x_T;
  int64_t t = ts.front();
  for (int64_t k = 0; k < n; ++k) {
    const int64_t t_prev = k + 1 < static_cast<int64_t>(ts.size()) ? ts[k + 1] : 0;
    auto eps = guided_noise(model, x, ts[k], cond, options.guidance);
    x = ddim_step(x, ts[k], t_prev, eps, schedule, options.clip_x0);
    t = t_prev;
  }
  return {x, t};
}

torch::Tensor ddim_sample(Denoiser& model, const NoiseSchedule& schedule, const Condition& cond,
                          const SampleOptions& options) {
  ddim_timesteps(schedule.timesteps(), options.steps);  // validates steps
  auto x_T = initial_noise(cond.text.size(0), model->config.image_size, options.seed);
  return to_image_space(ddim_rollout(model, schedule, cond, x_T, options).x);
}

}  // namespace covergen::diffusion
