// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/context/fusion.hpp"
#include "covergen/diffusion/schedule.hpp"
#include "covergen/world/world.hpp"

#include <json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <vector>

namespace covergen::diffusion {

// Base cross-attention projections of one layer (frozen with the denoiser).
struct CrossAttentionImpl : torch::nn::Module {
  CrossAttentionImpl(int64_t query_dim, int64_t context_dim, int64_t heads);
  int64_t heads;
  torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
};
TORCH_MODULE(CrossAttention);

// Personalized key/value projections W_k^p, W_v^p of one layer. Zero-initialised.
struct PersonalKVImpl : torch::nn::Module {
  PersonalKVImpl(int64_t personal_dim, int64_t attention_dim);
  torch::nn::Linear to_k{nullptr}, to_v{nullptr};
};
TORCH_MODULE(PersonalKV);

// Z_new = Attention(Z W_q, c_t W_k, c_t W_v) + Attention(Z W_q, c_p W_k^p, c_p W_v^p)
// Z: [B, L, query_dim]; c_t: [B, Lt, context_dim]; text_keys: [B, Lt] bool
// (false = padding) or undefined; c_p: [B, Lp, personal_dim] or undefined
// (text path only). Returns [B, L, query_dim] before the output projection.
torch::Tensor dual_path_attention(const torch::Tensor& z, const torch::Tensor& c_t, const torch::Tensor& text_keys,
                                  const torch::Tensor& c_p, CrossAttentionImpl& base, PersonalKVImpl* personal);

struct DenoiserConfig {
  int64_t channels = 16;
  int64_t heads = 1;
  int64_t text_dim = 64;
  int64_t max_text = 12;
  int64_t personal_dim = 64;  // d_p
  int64_t image_size = 32;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

struct ResBlockImpl : torch::nn::Module {
  ResBlockImpl(int64_t in, int64_t out, int64_t temb);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear temb_proj{nullptr};
};
TORCH_MODULE(ResBlock);

// Trainable personalization parameters: W_k^p, W_v^p for each cross-attention
// layer plus the fusion projections that build c_p.
struct AdapterImpl : torch::nn::Module {
  AdapterImpl(const std::vector<int64_t>& layer_dims, const context::FusionConfig& fusion);
  PersonalKVImpl& layer(size_t i) { return *personal[i]->as<PersonalKV>(); }
  size_t layers() const { return personal->size(); }
  torch::nn::ModuleList personal{nullptr};
  context::ContextFusion fusion{nullptr};
  std::vector<int64_t> layer_dims;
};
TORCH_MODULE(Adapter);

// Two-resolution U-shaped ε-predictor with one cross-attention block per
// resolution (16x16 then 32x32). Inputs live in [-1, 1].
struct DenoiserImpl : torch::nn::Module {
  explicit DenoiserImpl(const DenoiserConfig& config);

  // x: [B,3,H,W]; t: [B] int64 in [1, T]; text: [B, L] ids; c_p: [B, Lp, d_p] or undefined.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& text,
                        const torch::Tensor& c_p = {}, AdapterImpl* adapter = nullptr);

  std::vector<int64_t> attention_dims() const;
  torch::Tensor embed_text(const torch::Tensor& ids);

  DenoiserConfig config;
  torch::nn::Embedding tokens{nullptr}, positions{nullptr};
  torch::nn::LayerNorm text_norm{nullptr};
  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::Conv2d conv_in{nullptr}, down{nullptr}, up{nullptr}, conv_out{nullptr};
  ResBlock res_hi{nullptr}, res_lo{nullptr}, res_mid{nullptr}, res_up{nullptr};
  torch::nn::GroupNorm attn_norm_lo{nullptr}, attn_norm_hi{nullptr}, out_norm{nullptr};
  CrossAttention attn_lo{nullptr}, attn_hi{nullptr};

 private:
  torch::Tensor attend(const torch::Tensor& h, torch::nn::GroupNorm& norm, CrossAttention& attn, size_t layer,
                       const torch::Tensor& text, const torch::Tensor& text_keys, const torch::Tensor& c_p,
                       AdapterImpl* adapter);
};
TORCH_MODULE(Denoiser);

// Validates t ∈ [1, T] and runs the denoiser.
torch::Tensor predict_noise(Denoiser& model, const NoiseSchedule& schedule, const torch::Tensor& x_t,
                            const torch::Tensor& t, const torch::Tensor& text, const torch::Tensor& c_p = {},
                            AdapterImpl* adapter = nullptr);

// The empty prompt: a single <null> token per row.
torch::Tensor null_prompt(int64_t batch);

Adapter make_adapter(const Denoiser& model, const context::FusionConfig& fusion, uint64_t seed);

struct PretrainOptions {
  int64_t steps = 2500;
  int64_t batch = 32;
  double lr = 1e-3;
  double cond_dropout = 0.1;
  uint64_t seed = 0;
};

struct BaseModel {
  Denoiser model{nullptr};
  NoiseSchedule schedule;
  std::vector<double> loss_curve;

  void freeze();
  std::string digest() const;
  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static BaseModel load(const std::filesystem::path& path);
};

// DDPM ε-objective on (cover, explicit prompt) pairs; the prompt is replaced by
// the empty prompt with probability cond_dropout. The result is frozen.
BaseModel pretrain_base(const std::vector<world::ItemRecord>& items, const NoiseSchedule& schedule,
                        const DenoiserConfig& config, const PretrainOptions& options);

void save_adapter(const Adapter& adapter, const std::filesystem::path& path, const nlohmann::json& extra = {});
Adapter load_adapter(const std::filesystem::path& path);

}  // namespace covergen::diffusion
