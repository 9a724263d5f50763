// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/common/layers.hpp"
#include "covergen/world/vocab.hpp"

#include <json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

namespace covergen::embedder {

struct EmbedderConfig {
  int64_t dim = 64;
  int64_t text_width = 64;
  int64_t text_heads = 4;
  int64_t max_tokens = 16;
  double temperature = 0.1;

  nlohmann::json to_json() const;
  static EmbedderConfig from_json(const nlohmann::json& j);
};

// Three stride-2-ish conv stages, a 4x4 pooled grid and a linear head.
struct ImageEncoderImpl : torch::nn::Module {
  explicit ImageEncoderImpl(int64_t dim);
  // [B, 3, H, W] in [0, 1] -> unit-norm [B, dim].
  torch::Tensor forward(const torch::Tensor& images);
  // Post-activation feature maps of the three conv stages.
  std::vector<torch::Tensor> features(const torch::Tensor& images);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(ImageEncoder);

// Token + position embedding, one transformer block, masked mean pool, linear head.
struct TextEncoderImpl : torch::nn::Module {
  explicit TextEncoderImpl(const EmbedderConfig& config);
  // int64 [B, L] padded ids -> unit-norm [B, dim].
  torch::Tensor forward(const torch::Tensor& ids);

  torch::nn::Embedding tokens{nullptr}, positions{nullptr};
  TransformerBlock block{nullptr};
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(TextEncoder);

struct JointEmbedderImpl : torch::nn::Module {
  explicit JointEmbedderImpl(const EmbedderConfig& config);
  EmbedderConfig config;
  ImageEncoder image{nullptr};
  TextEncoder text{nullptr};
};
TORCH_MODULE(JointEmbedder);

// Symmetric InfoNCE: mean of image->text and text->image cross-entropies over
// the in-batch similarity matrix scaled by 1/τ. Inputs are unit-norm [B, d].
torch::Tensor info_nce_loss(const torch::Tensor& image_emb, const torch::Tensor& text_emb, double temperature);

// Read-only handle to a trained embedder. All parameters have gradients
// disabled; gradients still flow to the inputs, so rewards built on top stay
// differentiable w.r.t. pixels. The digest is taken at freeze time.
class FrozenEmbedder {
 public:
  FrozenEmbedder() = default;
  explicit FrozenEmbedder(JointEmbedder model);

  torch::Tensor embed_images(const torch::Tensor& images) const;  // [B,3,H,W] -> [B,d]
  torch::Tensor embed_image(const torch::Tensor& image) const;    // [3,H,W] -> [d]
  torch::Tensor embed_texts(const torch::Tensor& ids) const;      // [B,L] -> [B,d]
  torch::Tensor embed_text(const world::TokenSeq& tokens) const;  // -> [d]
  std::vector<torch::Tensor> image_features(const torch::Tensor& images) const;

  int64_t dim() const { return model_->config.dim; }
  const std::string& digest() const { return digest_; }
  // Recomputes the weight digest; true when unchanged since freezing.
  bool verify() const;
  const JointEmbedderImpl& model() const { return *model_; }
  explicit operator bool() const { return static_cast<bool>(model_); }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static FrozenEmbedder load(const std::filesystem::path& path);

 private:
  JointEmbedder model_{nullptr};
  std::string digest_;
};

struct TrainingPair {
  torch::Tensor image;  // [3, H, W]
  world::TokenSeq text;
};

struct TrainOptions {
  int64_t epochs = 20;
  int64_t batch = 64;
  double temperature = 0.1;
  double lr = 2e-3;
  uint64_t seed = 0;
  // Per-image pixel noise σ is drawn uniformly from [0, augment_noise].
  double augment_noise = 0.08;
};

struct TrainResult {
  FrozenEmbedder embedder;
  std::vector<double> epoch_loss;  // mean loss per epoch
  double initial_loss = 0.0;       // loss over the first epoch's batches at init
};

// Throws ArgumentError when batch < 2 (the contrastive loss needs negatives).
TrainResult train_joint_embedder(const std::vector<TrainingPair>& pairs, const EmbedderConfig& config,
                                 const TrainOptions& options);

}  // namespace covergen::embedder
