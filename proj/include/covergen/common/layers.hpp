// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

namespace covergen {

// softmax(q kᵀ / sqrt(head_dim)) v over [B, H, Lq, dh] x [B, H, Lk, dh].
// `allowed` (optional) is boolean, broadcastable to [B, H, Lq, Lk]; false
// entries are excluded from the softmax. Every query row must keep at least
// one allowed key.
torch::Tensor scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                   const torch::Tensor& allowed = {});

// [B, L, H*dh] <-> [B, H, L, dh]
torch::Tensor split_heads(const torch::Tensor& x, int64_t heads);
torch::Tensor merge_heads(const torch::Tensor& x);

// Pre-LayerNorm transformer block (self-attention + GELU MLP).
struct TransformerBlockImpl : torch::nn::Module {
  TransformerBlockImpl(int64_t width, int64_t heads, int64_t ff_width);
  // x: [B, L, width]; allowed: [B, L, L] boolean or undefined.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& allowed = {});

  int64_t heads;
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Linear qkv{nullptr}, proj{nullptr}, fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TransformerBlock);

// Mean over positions where mask is true. x: [B, L, D], mask: [B, L] bool.
torch::Tensor masked_mean(const torch::Tensor& x, const torch::Tensor& mask);

}  // namespace covergen
