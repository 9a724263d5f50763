// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/diffusion/denoiser.hpp"

#include <vector>

namespace covergen::diffusion {

// Descending uniform subsequence t_k = floor(k·T/S), k = S..1.
std::vector<int64_t> ddim_timesteps(int64_t timesteps, int64_t steps);

// Deterministic (η = 0) DDIM update from t to t_prev (t_prev = 0 gives x̂0).
torch::Tensor ddim_step(const torch::Tensor& x_t, int64_t t, int64_t t_prev, const torch::Tensor& eps,
                        const NoiseSchedule& schedule, bool clip_x0 = false);

struct Condition {
  torch::Tensor text;  // [B, L] ids
  torch::Tensor c_p;   // [B, Lp, d_p] or undefined
  AdapterImpl* adapter = nullptr;
};

// Guided ε̂. The unconditional branch uses the empty prompt and no c_p, and is
// skipped entirely when guidance == 1.
torch::Tensor guided_noise(Denoiser& model, const torch::Tensor& x, int64_t t, const Condition& cond, double guidance);

struct SampleOptions {
  int64_t steps = 15;
  double guidance = 7.0;
  uint64_t seed = 99;
  bool clip_x0 = true;  // clamp x̂0 to [-1, 1] inside each update
};

// Initial x_T ~ N(0, I) for `batch` samples; row i depends only on (seed, i).
torch::Tensor initial_noise(int64_t batch, int64_t image_size, uint64_t seed);

// Runs the DDIM trajectory from x_T over the first `stop_after` updates
// (all when < 0) and returns the model-space state together with the
// timestep it corresponds to.
struct PartialRollout {
  torch::Tensor x;
  int64_t t = 0;
};
PartialRollout ddim_rollout(Denoiser& model, const NoiseSchedule& schedule, const Condition& cond,
                            const torch::Tensor& x_T, const SampleOptions& options, int64_t stop_after = -1);

// Full sampling; returns images in [0, 1]. Throws ArgumentError when steps > T.
torch::Tensor ddim_sample(Denoiser& model, const NoiseSchedule& schedule, const Condition& cond,
                          const SampleOptions& options);

}  // namespace covergen::diffusion
