// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>

namespace covergen::context {

enum class TransformMode { Mask, Blur, Crop };

TransformMode parse_transform_mode(const std::string& name);  // ArgumentError on unknown names
std::string to_string(TransformMode mode);

// Degrades a reference image ([3, H, W] in [0, 1]) for robust context training.
//   Mask: zeroes one random rectangle whose area is floor(strength·H·W) up to
//         row granularity.
//   Blur: separable Gaussian with σ = 3·strength pixels, edge-clamped.
//   Crop: a random window of side (1 − strength/2)·H, bilinearly resized back.
// strength must lie in (0, 1]. Deterministic in seed.
torch::Tensor transform_reference(const torch::Tensor& image, TransformMode mode, double strength, uint64_t seed);

torch::Tensor gaussian_blur(const torch::Tensor& image, double sigma);

}  // namespace covergen::context
