// SPDX-License-Identifier: Apache-2.0
#include "covergen/diffusion/denoiser.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/layers.hpp"
#include "covergen/common/rng.hpp"
#include "covergen/common/tensor_io.hpp"
#include "covergen/context/prompt.hpp"

#include <cmath>
#include <numeric>

namespace covergen::diffusion {

namespace nn = torch::nn;

CrossAttentionImpl::CrossAttentionImpl(int64_t query_dim, int64_t context_dim, int64_t h) : heads(h) {
  if (query_dim % h != 0) throw ConfigError("attention width must be divisible by the head count");
  to_q = register_module("to_q", nn::Linear(nn::LinearOptions(query_dim, query_dim).bias(false)));
  to_k = register_module("to_k", nn::Linear(nn::LinearOptions(context_dim, query_dim).bias(false)));
  to_v = register_module("to_v", nn::Linear(nn::LinearOptions(context_dim, query_dim).bias(false)));
  to_out = register_module("to_out", nn::Linear(query_dim, query_dim));
}

PersonalKVImpl::PersonalKVImpl(int64_t personal_dim, int64_t attention_dim) {
  to_k = register_module("to_k", nn::Linear(nn::LinearOptions(personal_dim, attention_dim).bias(false)));
  to_v = register_module("to_v", nn::Linear(nn::LinearOptions(personal_dim, attention_dim).bias(false)));
  torch::NoGradGuard guard;
  to_k->weight.zero_();
  to_v->weight.zero_();
}

torch::Tensor dual_path_attention(const torch::Tensor& z, const torch::Tensor& c_t, const torch::Tensor& text_keys,
                                  const torch::Tensor& c_p, CrossAttentionImpl& base, PersonalKVImpl* personal) {
  const auto h = base.heads;
  auto q = split_heads(base.to_q(z), h);
  torch::Tensor allowed;
  if (text_keys.defined()) allowed = text_keys.unsqueeze(1).unsqueeze(1);  // [B,1,1,Lt]
  auto out = scaled_dot_attention(q, split_heads(base.to_k(c_t), h), split_heads(base.to_v(c_t), h), allowed);
  if (c_p.defined()) {
    if (!personal) throw ArgumentError("personalized context given without adapter parameters");
    out = out + scaled_dot_attention(q, split_heads(personal->to_k(c_p), h), split_heads(personal->to_v(c_p), h));
  }
  return merge_heads(out);
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"channels", channels}, {"heads", heads},           {"text_dim", text_dim},
          {"max_text", max_text}, {"personal_dim", personal_dim}, {"image_size", image_size}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.channels = j.at("channels");
  c.heads = j.at("heads");
  c.text_dim = j.at("text_dim");
  c.max_text = j.at("max_text");
  c.personal_dim = j.at("personal_dim");
  c.image_size = j.at("image_size");
  return c;
}

namespace {

int64_t groups_for(int64_t ch) { return ch % 4 == 0 ? 4 : 1; }

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
  const auto half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat) / static_cast<double>(half));
  auto args = t.to(torch::kFloat).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({args.cos(), args.sin()}, 1);
}

}  // namespace

ResBlockImpl::ResBlockImpl(int64_t in, int64_t out, int64_t temb) {
  norm1 = register_module("norm1", nn::GroupNorm(groups_for(in), in));
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
  temb_proj = register_module("temb_proj", nn::Linear(temb, out));
  norm2 = register_module("norm2", nn::GroupNorm(groups_for(out), out));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
  if (in != out) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1(torch::silu(norm1(x)));
  h = h + temb_proj(temb).unsqueeze(-1).unsqueeze(-1);
  h = conv2(torch::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

AdapterImpl::AdapterImpl(const std::vector<int64_t>& dims, const context::FusionConfig& fusion_config)
    : layer_dims(dims) {
  personal = register_module("personal", nn::ModuleList());
  for (auto d : dims) personal->push_back(PersonalKV(fusion_config.token_dim, d));
  fusion = register_module("fusion", context::ContextFusion(fusion_config));
}

DenoiserImpl::DenoiserImpl(const DenoiserConfig& cfg) : config(cfg) {
  const auto c = cfg.channels;
  const auto temb = 4 * c;
  tokens = register_module("tokens", nn::Embedding(world::Vocabulary::instance().size(), cfg.text_dim));
  positions = register_module("positions", nn::Embedding(cfg.max_text, cfg.text_dim));
  text_norm = register_module("text_norm", nn::LayerNorm(nn::LayerNormOptions({cfg.text_dim})));
  time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(c, temb), nn::SiLU(), nn::Linear(temb, temb)));
  conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(3, c, 3).padding(1)));
  res_hi = register_module("res_hi", ResBlock(c, c, temb));
  down = register_module("down", nn::Conv2d(nn::Conv2dOptions(c, 2 * c, 3).stride(2).padding(1)));
  res_lo = register_module("res_lo", ResBlock(2 * c, 2 * c, temb));
  attn_norm_lo = register_module("attn_norm_lo", nn::GroupNorm(groups_for(2 * c), 2 * c));
  attn_lo = register_module("attn_lo", CrossAttention(2 * c, cfg.text_dim, cfg.heads));
  res_mid = register_module("res_mid", ResBlock(2 * c, 2 * c, temb));
  up = register_module("up", nn::Conv2d(nn::Conv2dOptions(2 * c, c, 3).padding(1)));
  res_up = register_module("res_up", ResBlock(2 * c, c, temb));
  attn_norm_hi = register_module("attn_norm_hi", nn::GroupNorm(groups_for(c), c));
  attn_hi = register_module("attn_hi", CrossAttention(c, cfg.text_dim, cfg.heads));
  out_norm = register_module("out_norm", nn::GroupNorm(groups_for(c), c));
  conv_out = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(c, 3, 3).padding(1)));
  torch::NoGradGuard guard;
  conv_out->weight.zero_();
  conv_out->bias.zero_();
}

std::vector<int64_t> DenoiserImpl::attention_dims() const { return {2 * config.channels, config.channels}; }

torch::Tensor DenoiserImpl::embed_text(const torch::Tensor& ids) {
  if (ids.size(1) > config.max_text) throw ArgumentError("prompt longer than max_text");
  auto pos = torch::arange(ids.size(1), torch::kInt64);
  return text_norm(tokens(ids) + positions(pos).unsqueeze(0));
}

torch::Tensor DenoiserImpl::attend(const torch::Tensor& h, nn::GroupNorm& norm, CrossAttention& attn, size_t layer,
                                   const torch::Tensor& text, const torch::Tensor& text_keys, const torch::Tensor& c_p,
                                   AdapterImpl* adapter) {
  const auto b = h.size(0), ch = h.size(1), hh = h.size(2), ww = h.size(3);
  auto z = norm(h).flatten(2).transpose(1, 2);  // [B, HW, C]
  PersonalKVImpl* personal = (adapter && c_p.defined()) ? &adapter->layer(layer) : nullptr;
  auto out = attn->to_out(dual_path_attention(z, text, text_keys, c_p, *attn, personal));
  return h + out.transpose(1, 2).reshape({b, ch, hh, ww});
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& text,
                                    const torch::Tensor& c_p, AdapterImpl* adapter) {
  if (c_p.defined() && !adapter) throw ArgumentError("personalized context given without adapter parameters");
  if (adapter && adapter->layers() != 2) throw ConfigError("adapter layer count does not match the denoiser");
  auto temb = time_mlp->forward(timestep_embedding(t, config.channels));
  auto ctx = embed_text(text);
  auto keys = world::token_mask(text);

  auto h0 = res_hi(conv_in(x), temb);
  auto h = res_lo(down(h0), temb);
  h = attend(h, attn_norm_lo, attn_lo, 0, ctx, keys, c_p, adapter);
  h = res_mid(h, temb);
  h = up(torch::upsample_nearest2d(h, {h0.size(2), h0.size(3)}));
  h = res_up(torch::cat({h, h0}, 1), temb);
  h = attend(h, attn_norm_hi, attn_hi, 1, ctx, keys, c_p, adapter);
  return conv_out(torch::silu(out_norm(h)));
}

torch::Tensor predict_noise(Denoiser& model, const NoiseSchedule& schedule, const torch::Tensor& x_t,
                            const torch::Tensor& t, const torch::Tensor& text, const torch::Tensor& c_p,
                            AdapterImpl* adapter) {
  if (t.numel() == 0 || t.min().item<int64_t>() < 1 || t.max().item<int64_t>() > schedule.timesteps()) {
    throw ArgumentError("timestep outside [1, T]");
  }
  if (t.numel() != x_t.size(0)) throw ArgumentError("one timestep per batch row required");
  return model->forward(x_t, t, text, c_p, adapter);
}

torch::Tensor null_prompt(int64_t batch) {
  return torch::full({batch, 1}, world::Vocabulary::kNull, torch::kInt64);
}

Adapter make_adapter(const Denoiser& model, const context::FusionConfig& fusion, uint64_t seed) {
  if (fusion.token_dim != model->config.personal_dim) throw ConfigError("fusion token_dim must equal personal_dim");
  torch::manual_seed(derive_seed(seed, "adapter-init"));
  return Adapter(model->attention_dims(), fusion);
}

void BaseModel::freeze() {
  model->eval();
  for (auto& p : model->parameters()) p.set_requires_grad(false);
}

std::string BaseModel::digest() const { return digest_module(*model); }

void BaseModel::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json hyper = {{"denoiser", model->config.to_json()}, {"schedule", schedule.to_json()}};
  if (!extra.is_null()) hyper["training"] = extra;
  write_checkpoint(path, collect_tensors(*model), hyper);
}

BaseModel BaseModel::load(const std::filesystem::path& path) {
  const auto hyper = read_sidecar(path).at("hyperparameters");
  BaseModel m{Denoiser(DenoiserConfig::from_json(hyper.at("denoiser"))), NoiseSchedule::from_json(hyper.at("schedule")),
              {}};
  assign_tensors(*m.model, read_checkpoint(path));
  m.freeze();
  return m;
}

BaseModel pretrain_base(const std::vector<world::ItemRecord>& items, const NoiseSchedule& schedule,
                        const DenoiserConfig& config, const PretrainOptions& options) {
  if (items.empty()) throw ArgumentError("pretrain_base needs a non-empty catalog");
  torch::manual_seed(derive_seed(options.seed, "denoiser-init"));
  BaseModel base{Denoiser(config), schedule, {}};
  base.model->train();
  torch::optim::AdamW opt(base.model->parameters(), torch::optim::AdamWOptions(options.lr).weight_decay(0.0));

  std::vector<world::TokenSeq> prompts;
  for (const auto& it : items) prompts.push_back(context::generate_explicit_prompt(it));
  const auto images = to_model_space(world::stack_images(items));
  auto rng = make_engine(options.seed, "denoiser-batches");
  auto gen = make_generator(derive_seed(options.seed, "denoiser-noise"));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int64_t> pick(0, static_cast<int64_t>(items.size()) - 1);
  std::uniform_int_distribution<int64_t> tdist(1, schedule.timesteps());

  for (int64_t step = 0; step < options.steps; ++step) {
    // Cosine decay to 10% of the base rate.
    const double progress = static_cast<double>(step) / static_cast<double>(std::max<int64_t>(options.steps, 1));
    for (auto& g : opt.param_groups()) {
      static_cast<torch::optim::AdamWOptions&>(g.options()).lr(options.lr * (0.55 + 0.45 * std::cos(M_PI * progress)));
    }
    std::vector<int64_t> idx(options.batch), ts(options.batch);
    std::vector<world::TokenSeq> text(options.batch);
    for (int64_t b = 0; b < options.batch; ++b) {
      idx[b] = pick(rng);
      ts[b] = tdist(rng);
      text[b] = unif(rng) < options.cond_dropout ? world::TokenSeq{world::Vocabulary::kNull} : prompts[idx[b]];
    }
    auto x0 = images.index_select(0, torch::tensor(idx, torch::kInt64));
    auto t = torch::tensor(ts, torch::kInt64);
    auto noise = torch::randn(x0.sizes(), gen);
    auto xt = schedule.q_sample(x0, t, noise);
    auto loss = (base.model->forward(xt, t, world::pad_batch(text)) - noise).pow(2).mean();
    if (!std::isfinite(loss.item<double>())) {
      throw NumericalFailure("denoiser pretraining diverged at step " + std::to_string(step));
    }
    opt.zero_grad();
    loss.backward();
    opt.step();
    base.loss_curve.push_back(loss.item<double>());
  }
  base.freeze();
  return base;
}

void save_adapter(const Adapter& adapter, const std::filesystem::path& path, const nlohmann::json& extra) {
  nlohmann::json hyper = {{"layer_dims", adapter->layer_dims}, {"fusion", adapter->fusion->config.to_json()}};
  if (!extra.is_null()) hyper["training"] = extra;
  write_checkpoint(path, collect_tensors(*adapter), hyper);
}

Adapter load_adapter(const std::filesystem::path& path) {
  const auto hyper = read_sidecar(path).at("hyperparameters");
  Adapter a(hyper.at("layer_dims").get<std::vector<int64_t>>(), context::FusionConfig::from_json(hyper.at("fusion")));
  assign_tensors(*a, read_checkpoint(path));
  return a;
}

}  // namespace covergen::diffusion
