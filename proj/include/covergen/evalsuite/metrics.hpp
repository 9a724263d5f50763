// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/embedder/embedder.hpp"

#include <torch/torch.h>

#include <vector>

namespace covergen::evalsuite {

// Windowed SSIM with 8x8 uniform windows (stride 1), C1 = (0.01 L)², C2 = (0.03 L)²,
// L = 1, averaged over windows and channels (and the batch). Computed in double.
// Inputs [3,H,W] or [B,3,H,W].
double ssim(const torch::Tensor& a, const torch::Tensor& b);

// ‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2 (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}); PSD square roots by
// eigendecomposition with negative eigenvalues clamped at zero.
double frechet_distance(const torch::Tensor& mu1, const torch::Tensor& sigma1, const torch::Tensor& mu2,
                        const torch::Tensor& sigma2);

// Fréchet distance between Gaussians fitted to two feature sets [n, d]. When
// n <= d the covariance is shrunk toward (tr Σ / d)·I with weight d / (n + d).
double fid_features(const torch::Tensor& a, const torch::Tensor& b);
// Same, on frozen-embedder features of two image sets.
double fid(const embedder::FrozenEmbedder& embedder, const torch::Tensor& images_a, const torch::Tensor& images_b);

// Embedder-activation distance: per layer, channel vectors are unit-normalised
// at every position, the squared difference is summed over channels and
// averaged over positions; layers are averaged. Returns [B].
torch::Tensor perceptual_distance(const embedder::FrozenEmbedder& embedder, const torch::Tensor& a,
                                  const torch::Tensor& b);

// Mean aesthetic proxy. ArgumentError on an empty set.
double aesthetic_eval(const torch::Tensor& images);

// Ranking metrics for binary relevance over a ranked list.
double recall_at_k(const std::vector<int64_t>& ranked, const std::vector<int64_t>& relevant, int64_t k);
double ndcg_at_k(const std::vector<int64_t>& ranked, const std::vector<int64_t>& relevant, int64_t k);

// Exact two-sided binomial test against p = 0.5: the probability of outcomes
// no more likely than `successes`.
double binomial_two_sided(int64_t successes, int64_t trials);

}  // namespace covergen::evalsuite
