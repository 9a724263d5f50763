// SPDX-License-Identifier: Apache-2.0
#include "covergen/embedder/embedder.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/rng.hpp"
#include "covergen/common/tensor_io.hpp"

#include <algorithm>
#include <numeric>

namespace covergen::embedder {

namespace F = torch::nn::functional;

nlohmann::json EmbedderConfig::to_json() const {
  return {{"dim", dim},
          {"text_width", text_width},
          {"text_heads", text_heads},
          {"max_tokens", max_tokens},
          {"temperature", temperature},
          {"vocab", world::Vocabulary::instance().size()}};
}

EmbedderConfig EmbedderConfig::from_json(const nlohmann::json& j) {
  EmbedderConfig c;
  c.dim = j.at("dim").get<int64_t>();
  c.text_width = j.at("text_width").get<int64_t>();
  c.text_heads = j.at("text_heads").get<int64_t>();
  c.max_tokens = j.at("max_tokens").get<int64_t>();
  c.temperature = j.at("temperature").get<double>();
  return c;
}

ImageEncoderImpl::ImageEncoderImpl(int64_t dim) {
  conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, 16, 3).padding(1)));
  conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(16, 32, 3).padding(1).stride(2)));
  conv3 = register_module("conv3", torch::nn::Conv2d(torch::nn::Conv2dOptions(32, 64, 3).padding(1).stride(2)));
  head = register_module("head", torch::nn::Linear(64 * 4 * 4, dim));
}

std::vector<torch::Tensor> ImageEncoderImpl::features(const torch::Tensor& images) {
  auto x = images * 2.0 - 1.0;
  auto a1 = torch::relu(conv1(x));
  auto a2 = torch::relu(conv2(a1));
  auto a3 = torch::relu(conv3(a2));
  return {a1, a2, a3};
}

torch::Tensor ImageEncoderImpl::forward(const torch::Tensor& images) {
  auto feats = features(images);
  auto pooled = F::adaptive_avg_pool2d(feats.back(), F::AdaptiveAvgPool2dFuncOptions({4, 4}));
  return F::normalize(head(pooled.flatten(1)), F::NormalizeFuncOptions().dim(-1));
}

TextEncoderImpl::TextEncoderImpl(const EmbedderConfig& config) {
  tokens = register_module("tokens", torch::nn::Embedding(world::Vocabulary::instance().size(), config.text_width));
  positions = register_module("positions", torch::nn::Embedding(config.max_tokens, config.text_width));
  block = register_module("block", TransformerBlock(config.text_width, config.text_heads, 2 * config.text_width));
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.text_width})));
  head = register_module("head", torch::nn::Linear(config.text_width, config.dim));
}

torch::Tensor TextEncoderImpl::forward(const torch::Tensor& ids) {
  const auto length = ids.size(1);
  TORCH_CHECK(length <= positions->weight.size(0), "token sequence exceeds max_tokens");
  auto mask = world::token_mask(ids);
  auto pos = torch::arange(length, torch::kInt64);
  auto x = tokens(ids) + positions(pos).unsqueeze(0);
  // Keys restricted to real tokens; padded queries are dropped by the pool.
  auto allowed = mask.unsqueeze(1).expand({ids.size(0), length, length});
  x = norm(block(x, allowed));
  return F::normalize(head(masked_mean(x, mask)), F::NormalizeFuncOptions().dim(-1));
}

JointEmbedderImpl::JointEmbedderImpl(const EmbedderConfig& cfg) : config(cfg) {
  image = register_module("image", ImageEncoder(cfg.dim));
  text = register_module("text", TextEncoder(cfg));
}

torch::Tensor info_nce_loss(const torch::Tensor& image_emb, const torch::Tensor& text_emb, double temperature) {
  if (image_emb.size(0) < 2) throw ArgumentError("info_nce_loss needs at least two pairs");
  auto logits = torch::matmul(image_emb, text_emb.t()) / temperature;
  auto target = torch::arange(logits.size(0), torch::kInt64);
  return 0.5 * (F::cross_entropy(logits, target) + F::cross_entropy(logits.t(), target));
}

FrozenEmbedder::FrozenEmbedder(JointEmbedder model) : model_(std::move(model)) {
  model_->eval();
  for (auto& p : model_->parameters()) p.set_requires_grad(false);
  digest_ = digest_module(*model_);
}

torch::Tensor FrozenEmbedder::embed_images(const torch::Tensor& images) const { return model_.ptr()->image->forward(images); }

torch::Tensor FrozenEmbedder::embed_image(const torch::Tensor& image) const {
  return embed_images(image.unsqueeze(0)).squeeze(0);
}

torch::Tensor FrozenEmbedder::embed_texts(const torch::Tensor& ids) const { return model_.ptr()->text->forward(ids); }

torch::Tensor FrozenEmbedder::embed_text(const world::TokenSeq& tokens) const {
  return embed_texts(world::pad_batch({tokens})).squeeze(0);
}

std::vector<torch::Tensor> FrozenEmbedder::image_features(const torch::Tensor& images) const {
  return model_.ptr()->image->features(images);
}

bool FrozenEmbedder::verify() const { return digest_module(*model_) == digest_; }

void FrozenEmbedder::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json hyper = model_->config.to_json();
  hyper["frozen_digest"] = digest_;
  if (!extra.is_null()) hyper["training"] = extra;
  write_checkpoint(path, collect_tensors(*model_), hyper);
}

FrozenEmbedder FrozenEmbedder::load(const std::filesystem::path& path) {
  const auto side = read_sidecar(path);
  JointEmbedder model(EmbedderConfig::from_json(side.at("hyperparameters")));
  assign_tensors(*model, read_checkpoint(path));
  FrozenEmbedder frozen(model);
  if (frozen.digest() != side.at("hyperparameters").at("frozen_digest").get<std::string>()) {
    throw ConfigError("embedder checkpoint digest mismatch: " + path.string());
  }
  return frozen;
}

TrainResult train_joint_embedder(const std::vector<TrainingPair>& pairs, const EmbedderConfig& config,
                                 const TrainOptions& options) {
  if (options.batch < 2) throw ArgumentError("contrastive training needs batch >= 2");
  if (pairs.size() < 2) throw ArgumentError("contrastive training needs at least two pairs");
  torch::manual_seed(derive_seed(options.seed, "embedder-init"));
  JointEmbedder model(config);
  model->train();
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(options.lr));
  auto rng = make_engine(options.seed, "embedder-order");
  auto gen = make_generator(derive_seed(options.seed, "embedder-noise"));

  const auto batch = std::min<int64_t>(options.batch, static_cast<int64_t>(pairs.size()));
  std::vector<size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int64_t count = 0;
    for (size_t start = 0; start + static_cast<size_t>(batch) <= order.size(); start += static_cast<size_t>(batch)) {
      std::vector<torch::Tensor> imgs;
      std::vector<world::TokenSeq> texts;
      for (int64_t b = 0; b < batch; ++b) {
        const auto& p = pairs[order[start + static_cast<size_t>(b)]];
        imgs.push_back(p.image);
        texts.push_back(p.text);
      }
      auto images = torch::stack(imgs);
      if (options.augment_noise > 0) {
        auto sigma = torch::rand({batch, 1, 1, 1}, gen) * options.augment_noise;
        images = (images + sigma * torch::randn(images.sizes(), gen)).clamp(0.0, 1.0);
      }
      auto loss = info_nce_loss(model->image(images), model->text(world::pad_batch(texts)), options.temperature);
      if (epoch == 0 && count == 0) result.initial_loss = loss.item<double>();
      opt.zero_grad();
      loss.backward();
      opt.step();
      total += loss.item<double>();
      ++count;
    }
    result.epoch_loss.push_back(count ? total / static_cast<double>(count) : 0.0);
  }
  result.embedder = FrozenEmbedder(model);
  return result;
}

}  // namespace covergen::embedder
