// SPDX-License-Identifier: Apache-2.0
#include "covergen/context/fusion.hpp"

#include "covergen/common/errors.hpp"

namespace covergen::context {

nlohmann::json FusionConfig::to_json() const {
  return {{"meta_tokens", meta_tokens},       {"context_dim", context_dim}, {"user_dim", user_dim},
          {"context_tokens", context_tokens}, {"user_tokens", user_tokens}, {"token_dim", token_dim}};
}

FusionConfig FusionConfig::from_json(const nlohmann::json& j) {
  FusionConfig c;
  c.meta_tokens = j.at("meta_tokens");
  c.context_dim = j.at("context_dim");
  c.user_dim = j.at("user_dim");
  c.context_tokens = j.at("context_tokens");
  c.user_tokens = j.at("user_tokens");
  c.token_dim = j.at("token_dim");
  return c;
}

ContextFusionImpl::ContextFusionImpl(const FusionConfig& cfg) : config(cfg) {
  context_proj =
      register_module("context_proj", torch::nn::Linear(cfg.meta_tokens * cfg.context_dim, cfg.context_tokens * cfg.token_dim));
  user_proj = register_module("user_proj", torch::nn::Linear(cfg.user_dim, cfg.user_tokens * cfg.token_dim));
  norm = register_module("norm", torch::nn::LayerNorm(
                                     torch::nn::LayerNormOptions({cfg.token_dim}).elementwise_affine(false).eps(1e-9)));
}

torch::Tensor ContextFusionImpl::forward(const torch::Tensor& context, const torch::Tensor& user) {
  std::vector<torch::Tensor> parts;
  if (context.defined()) {
    if (context.dim() != 3 || context.size(1) != config.meta_tokens || context.size(2) != config.context_dim) {
      throw ConfigError("context embedding shape does not match the fusion configuration");
    }
    auto flat = context.reshape({context.size(0), -1});
    parts.push_back(norm(context_proj(flat).view({context.size(0), config.context_tokens, config.token_dim})));
  }
  if (user.defined()) {
    if (user.dim() != 2 || user.size(1) != config.user_dim) {
      throw ConfigError("user embedding dimension does not match the fusion configuration");
    }
    parts.push_back(norm(user_proj(user).view({user.size(0), config.user_tokens, config.token_dim})));
  }
  if (parts.empty()) throw ArgumentError("fusion needs a context or a user embedding");
  return torch::cat(parts, 1);
}

}  // namespace covergen::context
