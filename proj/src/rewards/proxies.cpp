// SPDX-License-Identifier: Apache-2.0
#include "covergen/rewards/proxies.hpp"

#include "covergen/common/errors.hpp"

#include <cmath>

namespace covergen::rewards {

namespace {

torch::Tensor batched(const torch::Tensor& images) {
  if (images.dim() == 3) return images.unsqueeze(0);
  if (images.dim() != 4 || images.size(1) != 3) throw ArgumentError("expected [B,3,H,W] images");
  return images;
}

}  // namespace

torch::Tensor colorfulness(const torch::Tensor& images) {
  const double eps = AestheticConstants{}.eps;
  auto x = batched(images);
  auto r = x.select(1, 0), g = x.select(1, 1), b = x.select(1, 2);
  auto rg = (r - g).flatten(1);
  auto yb = ((r + g) * 0.5 - b).flatten(1);
  auto var = rg.var(1, false) + yb.var(1, false);
  return (var + eps).sqrt() - std::sqrt(eps);
}

torch::Tensor sharpness(const torch::Tensor& images) {
  auto x = batched(images);
  auto dx = x.slice(3, 1) - x.slice(3, 0, -1);
  auto dy = x.slice(2, 1) - x.slice(2, 0, -1);
  return dx.pow(2).mean({1, 2, 3}) + dy.pow(2).mean({1, 2, 3});
}

torch::Tensor aesthetic_reward(const torch::Tensor& images, const AestheticConstants& k) {
  auto c = torch::tanh(colorfulness(images) / k.color_scale);
  auto s = torch::tanh(sharpness(images) / k.sharp_scale);
  auto r = 0.5 * c + 0.5 * s;
  return images.dim() == 3 ? r.squeeze(0) : r;
}

torch::Tensor relevance_reward(const embedder::FrozenEmbedder& embedder, const torch::Tensor& images,
                               const torch::Tensor& caption_ids) {
  auto x = batched(images);
  if (caption_ids.size(0) != x.size(0)) throw ArgumentError("one caption per image required");
  return (embedder.embed_images(x) * embedder.embed_texts(caption_ids)).sum(-1);
}

}  // namespace covergen::rewards
