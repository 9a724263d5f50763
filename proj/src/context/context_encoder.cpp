// SPDX-License-Identifier: Apache-2.0
#include "covergen/context/context_encoder.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/rng.hpp"
#include "covergen/common/tensor_io.hpp"

#include <algorithm>
#include <numeric>

namespace covergen::context {

namespace F = torch::nn::functional;

nlohmann::json ContextEncoderConfig::to_json() const {
  return {{"hidden", hidden},       {"layers", layers},         {"heads", heads},
          {"output_dim", output_dim}, {"patch", patch},         {"image_size", image_size},
          {"max_title", max_title}, {"max_meta", max_meta}};
}

ContextEncoderConfig ContextEncoderConfig::from_json(const nlohmann::json& j) {
  ContextEncoderConfig c;
  c.hidden = j.at("hidden");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.output_dim = j.at("output_dim");
  c.patch = j.at("patch");
  c.image_size = j.at("image_size");
  c.max_title = j.at("max_title");
  c.max_meta = j.at("max_meta");
  return c;
}

MetaTokenBlockImpl::MetaTokenBlockImpl(int64_t count, int64_t hidden) {
  if (count < 1) throw ArgumentError("meta token count must be >= 1");
  tokens = register_parameter("tokens", torch::randn({count, hidden}) * 0.02);
}

ContextEncoderImpl::ContextEncoderImpl(const ContextEncoderConfig& cfg) : config(cfg) {
  const auto patch_dim = 3 * cfg.patch * cfg.patch;
  patch_proj = register_module("patch_proj", torch::nn::Linear(patch_dim, cfg.hidden));
  patch_pos = register_parameter("patch_pos", torch::randn({cfg.patches(), cfg.hidden}) * 0.02);
  meta_pos = register_parameter("meta_pos", torch::randn({cfg.max_meta, cfg.hidden}) * 0.02);
  tokens = register_module("tokens", torch::nn::Embedding(world::Vocabulary::instance().size(), cfg.hidden));
  title_pos = register_module("title_pos", torch::nn::Embedding(cfg.max_title, cfg.hidden));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < cfg.layers; ++i) blocks->push_back(TransformerBlock(cfg.hidden, cfg.heads, 2 * cfg.hidden));
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.hidden})));
  lm_head = register_module("lm_head", torch::nn::Linear(cfg.hidden, world::Vocabulary::instance().size()));
  context_head = register_module("context_head", torch::nn::Linear(cfg.hidden, cfg.output_dim));
}

ContextEncoderImpl::Output ContextEncoderImpl::forward(const torch::Tensor& images, const torch::Tensor& title_ids,
                                                       const MetaTokenBlock& meta) {
  const auto b = images.size(0);
  const auto p = config.patch;
  const auto lt = title_ids.size(1);
  const auto n = meta->count();
  if (lt > config.max_title) throw ArgumentError("title longer than max_title");
  if (n > config.max_meta) throw ArgumentError("more meta tokens than max_meta");

  // [B,3,H,W] -> [B, patches, 3*p*p]
  auto x = images * 2.0 - 1.0;
  auto patches = x.unfold(2, p, p).unfold(3, p, p).permute({0, 2, 3, 1, 4, 5}).reshape({b, config.patches(), -1});
  auto img_tok = patch_proj(patches) + patch_pos.unsqueeze(0);
  auto txt_tok = tokens(title_ids) + title_pos(torch::arange(lt, torch::kInt64)).unsqueeze(0);
  auto meta_tok = (meta->tokens + meta_pos.slice(0, 0, n)).unsqueeze(0).expand({b, n, config.hidden});
  auto seq = torch::cat({img_tok, txt_tok, meta_tok}, 1);

  const auto np = config.patches();
  const auto len = np + lt + n;
  auto causal = torch::ones({len, len}, torch::kBool).tril();
  auto key_ok = torch::cat({torch::ones({b, np}, torch::kBool), world::token_mask(title_ids),
                            torch::ones({b, n}, torch::kBool)},
                           1);
  auto allowed = causal.unsqueeze(0) & key_ok.unsqueeze(1);

  auto h = seq;
  for (const auto& blk : *blocks) h = blk->as<TransformerBlock>()->forward(h, allowed);
  h = norm(h);

  Output out;
  out.context = context_head(h.slice(1, np + lt, len));
  // Position np-1+k (last patch, then title tokens) predicts title token k.
  out.lm_logits = lm_head(h.slice(1, np - 1, np - 1 + lt));
  return out;
}

torch::Tensor encode_context(ContextEncoder& encoder, const MetaTokenBlock& meta, const torch::Tensor& images,
                             const torch::Tensor& title_ids) {
  return encoder->forward(images, title_ids, meta).context;
}

torch::Tensor meta_reconstruction_loss(const torch::Tensor& context, const torch::Tensor& target) {
  if (context.dim() < 2 || context.size(-2) < 1) throw ArgumentError("reconstruction needs at least one prediction");
  if (context.size(-1) != target.size(-1)) {
    throw ConfigError("context dimension " + std::to_string(context.size(-1)) + " does not match target dimension " +
                      std::to_string(target.size(-1)));
  }
  const auto diff = context - target.unsqueeze(-2);
  return diff.pow(2).sum(-1).mean();
}

torch::Tensor title_lm_loss(const torch::Tensor& lm_logits, const torch::Tensor& title_ids) {
  return F::cross_entropy(lm_logits.reshape({-1, lm_logits.size(-1)}), title_ids.reshape({-1}),
                          F::CrossEntropyFuncOptions().ignore_index(world::Vocabulary::kPad));
}

void ContextModel::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  auto tensors = collect_tensors(*encoder, "encoder.");
  for (auto& t : collect_tensors(*meta, "meta.")) tensors.push_back(std::move(t));
  nlohmann::json hyper = encoder->config.to_json();
  hyper["meta_tokens"] = meta->count();
  if (!extra.is_null()) hyper["training"] = extra;
  write_checkpoint(path, tensors, hyper);
}

ContextModel ContextModel::load(const std::filesystem::path& path) {
  const auto side = read_sidecar(path);
  const auto& hyper = side.at("hyperparameters");
  ContextModel m;
  m.encoder = ContextEncoder(ContextEncoderConfig::from_json(hyper));
  m.meta = MetaTokenBlock(hyper.at("meta_tokens").get<int64_t>(), m.encoder->config.hidden);
  const auto tensors = read_checkpoint(path);
  assign_tensors(*m.encoder, tensors, "encoder.");
  assign_tensors(*m.meta, tensors, "meta.");
  m.freeze();
  return m;
}

std::string ContextModel::digest() const {
  auto tensors = collect_tensors(*encoder, "encoder.");
  for (auto& t : collect_tensors(*meta, "meta.")) tensors.push_back(std::move(t));
  return digest_tensors(tensors);
}

void ContextModel::freeze() {
  encoder->eval();
  for (auto& p : encoder->parameters()) p.set_requires_grad(false);
  for (auto& p : meta->parameters()) p.set_requires_grad(false);
}

torch::Tensor random_transform(const torch::Tensor& image, double max_strength, std::mt19937_64& rng) {
  static constexpr TransformMode modes[] = {TransformMode::Mask, TransformMode::Blur, TransformMode::Crop};
  const auto mode = modes[std::uniform_int_distribution<int>(0, 2)(rng)];
  const double strength = std::uniform_real_distribution<double>(0.05, 1.0)(rng) * max_strength;
  return transform_reference(image, mode, strength, rng());
}

namespace {

struct Batch {
  torch::Tensor images, titles, targets;
};

Batch make_batch(const std::vector<world::ItemRecord>& items, const std::vector<size_t>& idx,
                 const torch::Tensor& targets, double max_strength, std::mt19937_64& rng) {
  std::vector<torch::Tensor> imgs;
  std::vector<world::TokenSeq> titles;
  for (size_t i : idx) {
    imgs.push_back(max_strength > 0 ? random_transform(items[i].ref_image, max_strength, rng) : items[i].ref_image);
    titles.push_back(items[i].title);
  }
  auto index = torch::tensor(std::vector<int64_t>(idx.begin(), idx.end()), torch::kInt64);
  return {torch::stack(imgs), world::pad_batch(titles), targets.index_select(0, index)};
}

torch::Tensor embed_targets(const embedder::FrozenEmbedder& embedder, const std::vector<world::ItemRecord>& items) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> chunks;
  for (size_t s = 0; s < items.size(); s += 256) {
    std::vector<world::ItemRecord> part(items.begin() + s, items.begin() + std::min(items.size(), s + 256));
    chunks.push_back(embedder.embed_images(world::stack_images(part)));
  }
  return torch::cat(chunks);
}

}  // namespace

ContextModel train_meta_tokens(const std::vector<world::ItemRecord>& items, const embedder::FrozenEmbedder& embedder,
                               const ContextEncoderConfig& config, const MetaTrainOptions& options,
                               const ContextModel* init) {
  if (items.empty()) throw ArgumentError("train_meta_tokens needs a non-empty catalog");
  if (config.output_dim != embedder.dim()) throw ConfigError("context output_dim must equal the embedder dimension");
  torch::manual_seed(derive_seed(options.seed, "context-init"));
  ContextModel model;
  model.encoder = ContextEncoder(config);
  model.meta = MetaTokenBlock(options.meta_tokens, config.hidden);
  if (init) {
    assign_tensors(*model.encoder, collect_tensors(*init->encoder));
    if (init->meta->count() == options.meta_tokens) assign_tensors(*model.meta, collect_tensors(*init->meta));
  }
  model.encoder->train();

  std::vector<torch::Tensor> params = model.meta->parameters();
  if (options.train_encoder) {
    for (auto& p : model.encoder->parameters()) params.push_back(p);
  } else {
    for (auto& p : model.encoder->parameters()) p.set_requires_grad(false);
  }
  torch::optim::Adam opt(params, torch::optim::AdamOptions(options.lr));

  const auto targets = embed_targets(embedder, items);
  auto rng = make_engine(options.seed, "context-batches");
  std::vector<size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = order.size();
  const auto batch = std::min<size_t>(static_cast<size_t>(options.batch), items.size());

  for (int64_t step = 0; step < options.steps; ++step) {
    if (cursor + batch > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    std::vector<size_t> idx(order.begin() + cursor, order.begin() + cursor + batch);
    cursor += batch;
    auto b = make_batch(items, idx, targets, options.max_strength, rng);
    auto out = model.encoder->forward(b.images, b.titles, model.meta);
    auto recon = meta_reconstruction_loss(out.context, b.targets);
    auto lm = title_lm_loss(out.lm_logits, b.titles);
    auto loss = recon + lm;
    opt.zero_grad();
    loss.backward();
    opt.step();
    model.recon_curve.push_back(recon.item<double>());
    model.lm_curve.push_back(lm.item<double>());
  }
  model.freeze();
  return model;
}

double evaluate_reconstruction(const ContextModel& model, const embedder::FrozenEmbedder& embedder,
                               const std::vector<world::ItemRecord>& items, double max_strength, uint64_t seed) {
  torch::NoGradGuard guard;
  const auto targets = embed_targets(embedder, items);
  auto rng = make_engine(seed, "context-eval");
  double total = 0.0;
  for (size_t s = 0; s < items.size(); s += 128) {
    std::vector<size_t> idx;
    for (size_t i = s; i < std::min(items.size(), s + 128); ++i) idx.push_back(i);
    auto b = make_batch(items, idx, targets, max_strength, rng);
    auto encoder = model.encoder;
    auto ctx = encode_context(encoder, model.meta, b.images, b.titles);
    total += meta_reconstruction_loss(ctx, b.targets).item<double>() * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(items.size());
}

}  // namespace covergen::context
