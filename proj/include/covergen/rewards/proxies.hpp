// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/embedder/embedder.hpp"

#include <torch/torch.h>

namespace covergen::rewards {

// Constants of the aesthetic proxy.
struct AestheticConstants {
  double color_scale = 0.3;   // colorfulness saturates around this opponent-channel spread
  double sharp_scale = 0.02;  // sharpness saturates around this mean squared gradient
  double eps = 1e-8;
};

// Colorfulness: √(var(R−G) + var((R+G)/2 − B) + ε) − √ε, per image.
torch::Tensor colorfulness(const torch::Tensor& images);
// Sharpness: mean over pixels of squared forward differences (x and y).
torch::Tensor sharpness(const torch::Tensor& images);

// 0.5·tanh(colorfulness / color_scale) + 0.5·tanh(sharpness / sharp_scale).
// images: [B,3,H,W] or [3,H,W] in [0, 1]; returns [B] (or a scalar). In [0, 1).
torch::Tensor aesthetic_reward(const torch::Tensor& images, const AestheticConstants& k = {});

// cos(embed_image(image), embed_text(caption)); images [B,3,H,W], captions [B,L].
torch::Tensor relevance_reward(const embedder::FrozenEmbedder& embedder, const torch::Tensor& images,
                               const torch::Tensor& caption_ids);

}  // namespace covergen::rewards
