// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>
#include <torch/torch.h>

namespace covergen::context {

struct FusionConfig {
  int64_t meta_tokens = 2;    // N
  int64_t context_dim = 64;   // embedder dimension d
  int64_t user_dim = 32;      // d_u
  int64_t context_tokens = 2; // N_c
  int64_t user_tokens = 2;    // N_u
  int64_t token_dim = 64;     // d_p
  nlohmann::json to_json() const;
  static FusionConfig from_json(const nlohmann::json& j);
};

// Projects the flattened context embedding to N_c tokens and the user
// embedding to N_u tokens, each normalised without affine parameters, and
// concatenates them along the sequence axis. Either input may be undefined;
// its tokens are then dropped.
struct ContextFusionImpl : torch::nn::Module {
  explicit ContextFusionImpl(const FusionConfig& config);
  // context: [B, N, d] or undefined; user: [B, d_u] or undefined.
  torch::Tensor forward(const torch::Tensor& context, const torch::Tensor& user);

  FusionConfig config;
  torch::nn::Linear context_proj{nullptr}, user_proj{nullptr};
  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(ContextFusion);

}  // namespace covergen::context
