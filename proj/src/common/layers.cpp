// SPDX-License-Identifier: Apache-2.0
#include "covergen/common/layers.hpp"

#include <cmath>

namespace covergen {

torch::Tensor scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                   const torch::Tensor& allowed) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
  auto scores = torch::matmul(q, k.transpose(-2, -1)) * scale;
  if (allowed.defined()) scores = scores.masked_fill(allowed.logical_not(), -std::numeric_limits<float>::infinity());
  return torch::matmul(torch::softmax(scores, -1), v);
}

torch::Tensor split_heads(const torch::Tensor& x, int64_t heads) {
  const auto b = x.size(0), l = x.size(1), d = x.size(2);
  return x.view({b, l, heads, d / heads}).transpose(1, 2);
}

torch::Tensor merge_heads(const torch::Tensor& x) {
  const auto b = x.size(0), h = x.size(1), l = x.size(2), dh = x.size(3);
  return x.transpose(1, 2).contiguous().view({b, l, h * dh});
}

TransformerBlockImpl::TransformerBlockImpl(int64_t width, int64_t heads_, int64_t ff_width) : heads(heads_) {
  TORCH_CHECK(width % heads == 0, "transformer width must be divisible by heads");
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  qkv = register_module("qkv", torch::nn::Linear(width, 3 * width));
  proj = register_module("proj", torch::nn::Linear(width, width));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  fc1 = register_module("fc1", torch::nn::Linear(width, ff_width));
  fc2 = register_module("fc2", torch::nn::Linear(ff_width, width));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& allowed) {
  auto parts = qkv(norm1(x)).chunk(3, -1);
  auto q = split_heads(parts[0], heads);
  auto k = split_heads(parts[1], heads);
  auto v = split_heads(parts[2], heads);
  auto mask = allowed.defined() ? allowed.unsqueeze(1) : allowed;
  auto h = x + proj(merge_heads(scaled_dot_attention(q, k, v, mask)));
  return h + fc2(torch::gelu(fc1(norm2(h))));
}

torch::Tensor masked_mean(const torch::Tensor& x, const torch::Tensor& mask) {
  auto m = mask.to(x.dtype()).unsqueeze(-1);
  return (x * m).sum(1) / m.sum(1).clamp_min(1.0);
}

}  // namespace covergen
