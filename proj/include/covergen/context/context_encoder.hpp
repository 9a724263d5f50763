// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/common/layers.hpp"
#include "covergen/context/transforms.hpp"
#include "covergen/embedder/embedder.hpp"
#include "covergen/world/world.hpp"

#include <json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <random>
#include <vector>

namespace covergen::context {

struct ContextEncoderConfig {
  int64_t hidden = 128;
  int64_t layers = 2;
  int64_t heads = 4;
  int64_t output_dim = 64;  // must equal the embedder dimension
  int64_t patch = 8;
  int64_t image_size = 32;
  int64_t max_title = 12;
  int64_t max_meta = 8;

  int64_t patches() const { return (image_size / patch) * (image_size / patch); }
  nlohmann::json to_json() const;
  static ContextEncoderConfig from_json(const nlohmann::json& j);
};

// N learnable vectors appended after the title; their encoder outputs become
// the context embedding.
struct MetaTokenBlockImpl : torch::nn::Module {
  MetaTokenBlockImpl(int64_t count, int64_t hidden);
  int64_t count() const { return tokens.size(0); }
  torch::Tensor tokens;  // [N, hidden]
};
TORCH_MODULE(MetaTokenBlock);

// Decoder-style stand-in for the multimodal LLM. The input sequence is
// [image patches | title tokens | meta tokens] under a causal mask, with
// padded title positions removed from every key set. Title positions carry a
// next-token head; meta positions carry a head into the embedder space.
struct ContextEncoderImpl : torch::nn::Module {
  explicit ContextEncoderImpl(const ContextEncoderConfig& config);

  struct Output {
    torch::Tensor context;    // [B, N, output_dim]
    torch::Tensor lm_logits;  // [B, Lt, vocab]; position k predicts title token k
  };
  Output forward(const torch::Tensor& images, const torch::Tensor& title_ids, const MetaTokenBlock& meta);

  ContextEncoderConfig config;
  torch::nn::Linear patch_proj{nullptr};
  torch::Tensor patch_pos, meta_pos;
  torch::nn::Embedding tokens{nullptr}, title_pos{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear lm_head{nullptr}, context_head{nullptr};
};
TORCH_MODULE(ContextEncoder);

// C_ref for a batch: images [B,3,H,W] (already transformed or not), title ids [B,L].
torch::Tensor encode_context(ContextEncoder& encoder, const MetaTokenBlock& meta, const torch::Tensor& images,
                             const torch::Tensor& title_ids);

// Mean over the N predictions (and the batch) of ||prediction - target||².
// context: [N, d] or [B, N, d]; target: [d] or [B, d].
torch::Tensor meta_reconstruction_loss(const torch::Tensor& context, const torch::Tensor& target);

// Next-token cross-entropy over non-padding title positions.
torch::Tensor title_lm_loss(const torch::Tensor& lm_logits, const torch::Tensor& title_ids);

struct MetaTrainOptions {
  int64_t meta_tokens = 2;
  int64_t steps = 1200;
  int64_t batch = 32;
  double lr = 1e-3;
  double max_strength = 0.3;
  bool train_encoder = true;  // false: only the meta tokens are optimised
  uint64_t seed = 0;
};

struct ContextModel {
  ContextEncoder encoder{nullptr};
  MetaTokenBlock meta{nullptr};
  std::vector<double> recon_curve;  // per-step reconstruction loss
  std::vector<double> lm_curve;     // per-step next-token loss

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static ContextModel load(const std::filesystem::path& path);
  std::string digest() const;
  void freeze();
};

// Optimises meta tokens with the reconstruction loss against
// embed_image(untransformed reference) and title positions with next-token
// prediction. Inputs are randomly masked, blurred or cropped each step.
// `init` (optional) continues from an existing encoder/meta pair.
ContextModel train_meta_tokens(const std::vector<world::ItemRecord>& items, const embedder::FrozenEmbedder& embedder,
                               const ContextEncoderConfig& config, const MetaTrainOptions& options,
                               const ContextModel* init = nullptr);

// Mean reconstruction loss over `items` with transforms drawn from `seed`
// (strength <= max_strength). max_strength == 0 evaluates clean references.
double evaluate_reconstruction(const ContextModel& model, const embedder::FrozenEmbedder& embedder,
                               const std::vector<world::ItemRecord>& items, double max_strength, uint64_t seed);

// One random transform of the given maximum strength, as used in training.
torch::Tensor random_transform(const torch::Tensor& image, double max_strength, std::mt19937_64& rng);

}  // namespace covergen::context
