// SPDX-License-Identifier: Apache-2.0
#include "covergen/rewards/reward_model.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/rng.hpp"
#include "covergen/common/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace covergen::rewards {

namespace F = torch::nn::functional;

double bt_loss(double p_m, double p_n) {
  const double d = p_m - p_n;
  // softplus(−d) = max(−d, 0) + log1p(exp(−|d|))
  return std::max(-d, 0.0) + std::log1p(std::exp(-std::abs(d)));
}

torch::Tensor bt_loss(const torch::Tensor& p_m, const torch::Tensor& p_n) { return F::softplus(p_n - p_m).mean(); }

RewardVariant parse_reward_variant(const std::string& name) {
  for (auto v : all_reward_variants())
    if (to_string(v) == name) return v;
  throw ArgumentError("unknown reward variant: " + name);
}

std::string to_string(RewardVariant v) {
  switch (v) {
    case RewardVariant::Full: return "full";
    case RewardVariant::ImageOnly: return "image_only";
    case RewardVariant::ImageTitle: return "image_title";
    case RewardVariant::ImageUser: return "image_user";
    case RewardVariant::NoTransformer: return "no_transformer";
  }
  return "full";
}

const std::vector<RewardVariant>& all_reward_variants() {
  static const std::vector<RewardVariant> v = {RewardVariant::Full, RewardVariant::ImageOnly, RewardVariant::ImageTitle,
                                               RewardVariant::ImageUser, RewardVariant::NoTransformer};
  return v;
}

nlohmann::json RewardModelConfig::to_json() const {
  return {{"embed_dim", embed_dim}, {"width", width}, {"layers", layers}, {"heads", heads}, {"variant", to_string(variant)}};
}

RewardModelConfig RewardModelConfig::from_json(const nlohmann::json& j) {
  RewardModelConfig c;
  c.embed_dim = j.at("embed_dim");
  c.width = j.at("width");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.variant = parse_reward_variant(j.at("variant"));
  return c;
}

namespace {

bool uses_text(RewardVariant v) { return v != RewardVariant::ImageOnly && v != RewardVariant::ImageUser; }
bool uses_user(RewardVariant v) { return v != RewardVariant::ImageOnly && v != RewardVariant::ImageTitle; }
int64_t token_count(RewardVariant v) { return 1 + (uses_text(v) ? 1 : 0) + (uses_user(v) ? 1 : 0); }

}  // namespace

PersonalizedRewardImpl::PersonalizedRewardImpl(const RewardModelConfig& cfg) : config(cfg) {
  if (cfg.width % 2 != 0) throw ConfigError("reward width must be even");
  const auto d = cfg.embed_dim, w = cfg.width;
  fc_t = register_module("fc_t", torch::nn::Linear(d, w / 2));
  fc_c = register_module("fc_c", torch::nn::Linear(d, w / 2));
  fc_i = register_module("fc_i", torch::nn::Linear(d, w));
  fc_u = register_module("fc_u", torch::nn::Linear(d, w));
  type_embed = register_parameter("type_embed", torch::randn({3, w}) * 0.02);
  blocks = register_module("blocks", torch::nn::ModuleList());
  if (cfg.variant != RewardVariant::NoTransformer) {
    for (int64_t l = 0; l < cfg.layers; ++l) blocks->push_back(TransformerBlock(w, cfg.heads, 2 * w));
  }
  fc_per = register_module("fc_per", torch::nn::Sequential(torch::nn::Linear(w * token_count(cfg.variant), w),
                                                           torch::nn::GELU(), torch::nn::Linear(w, 1)));
}

torch::Tensor PersonalizedRewardImpl::forward(const torch::Tensor& title, const torch::Tensor& caption,
                                              const torch::Tensor& image, const torch::Tensor& user) {
  std::vector<torch::Tensor> tokens;
  if (uses_text(config.variant)) tokens.push_back(torch::cat({fc_t(title), fc_c(caption)}, -1) + type_embed[0]);
  tokens.push_back(fc_i(image) + type_embed[1]);
  if (uses_user(config.variant)) tokens.push_back(fc_u(user) + type_embed[2]);
  auto h = torch::stack(tokens, 1);
  for (const auto& blk : *blocks) h = blk->as<TransformerBlock>()->forward(h);
  return fc_per->forward(h.flatten(1)).squeeze(-1);
}

int64_t PersonalizedRewardImpl::trainable_parameters() const {
  int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

RewardFeatures compute_reward_features(const embedder::FrozenEmbedder& embedder,
                                       const std::vector<world::ItemRecord>& items,
                                       const std::vector<world::UserProfile>& users) {
  torch::NoGradGuard guard;
  RewardFeatures f;
  std::vector<world::TokenSeq> titles, captions, profiles;
  for (size_t i = 0; i < items.size(); ++i) {
    f.item_row[items[i].item_id] = static_cast<int64_t>(i);
    titles.push_back(items[i].title);
    captions.push_back(world::caption_tokens(items[i].style));
  }
  for (size_t u = 0; u < users.size(); ++u) {
    f.user_row[users[u].user_id] = static_cast<int64_t>(u);
    profiles.push_back(world::profile_tokens(users[u]));
  }
  f.title = embedder.embed_texts(world::pad_batch(titles));
  f.caption = embedder.embed_texts(world::pad_batch(captions));
  std::vector<torch::Tensor> chunks;
  for (size_t s = 0; s < items.size(); s += 256) {
    std::vector<world::ItemRecord> part(items.begin() + s, items.begin() + std::min(items.size(), s + 256));
    chunks.push_back(embedder.embed_images(world::stack_images(part)));
  }
  f.image = torch::cat(chunks);
  f.user = embedder.embed_texts(world::pad_batch(profiles));
  return f;
}

namespace {

torch::Tensor rows(const std::map<int64_t, int64_t>& index, const std::vector<int64_t>& ids, const char* what) {
  std::vector<int64_t> r;
  r.reserve(ids.size());
  for (auto id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw ArgumentError(std::string("unknown ") + what + " id " + std::to_string(id));
    r.push_back(it->second);
  }
  return torch::tensor(r, torch::kInt64);
}

torch::Tensor score_rows(PersonalizedReward& net, const RewardFeatures& f, const std::vector<int64_t>& users,
                         const std::vector<int64_t>& items) {
  auto ir = rows(f.item_row, items, "item");
  auto ur = rows(f.user_row, users, "user");
  return net->forward(f.title.index_select(0, ir), f.caption.index_select(0, ir), f.image.index_select(0, ir),
                      f.user.index_select(0, ur));
}

void unpack(const std::vector<PreferencePair>& pairs, std::vector<int64_t>& u, std::vector<int64_t>& m,
            std::vector<int64_t>& n) {
  for (const auto& p : pairs) {
    u.push_back(p.user_id);
    m.push_back(p.item_m);
    n.push_back(p.item_n);
  }
}

}  // namespace

torch::Tensor RewardModel::score_pairs(const RewardFeatures& f, const std::vector<int64_t>& users,
                                       const std::vector<int64_t>& items) const {
  torch::NoGradGuard guard;
  auto net_copy = net;
  return score_rows(net_copy, f, users, items);
}

torch::Tensor RewardModel::score_images(const embedder::FrozenEmbedder& embedder, const torch::Tensor& images,
                                        const torch::Tensor& title_emb, const torch::Tensor& caption_emb,
                                        const torch::Tensor& user_emb) const {
  return net.ptr()->forward(title_emb, caption_emb, embedder.embed_images(images), user_emb);
}

void RewardModel::freeze() {
  net->eval();
  for (auto& p : net->parameters()) p.set_requires_grad(false);
}

std::string RewardModel::digest() const { return digest_module(*net); }

void RewardModel::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  auto hyper = net->config.to_json();
  hyper["trainable_parameters"] = net->trainable_parameters();
  hyper["best_epoch"] = best_epoch;
  if (!extra.is_null()) hyper["training"] = extra;
  write_checkpoint(path, collect_tensors(*net), hyper);
}

RewardModel RewardModel::load(const std::filesystem::path& path) {
  RewardModel m;
  const auto hyper = read_sidecar(path).at("hyperparameters");
  m.net = PersonalizedReward(RewardModelConfig::from_json(hyper));
  assign_tensors(*m.net, read_checkpoint(path));
  m.best_epoch = hyper.value("best_epoch", -1);
  m.freeze();
  return m;
}

double personalized_score(const RewardModel& model, const embedder::FrozenEmbedder& embedder,
                          const world::TokenSeq& title, const world::TokenSeq& caption, const torch::Tensor& image,
                          const world::TokenSeq& user_text) {
  torch::NoGradGuard guard;
  auto t = embedder.embed_text(title).unsqueeze(0);
  auto c = embedder.embed_text(caption).unsqueeze(0);
  auto u = embedder.embed_text(user_text).unsqueeze(0);
  return model.score_images(embedder, image.unsqueeze(0), t, c, u).item<double>();
}

double preference_accuracy(const std::vector<double>& p_m, const std::vector<double>& p_n) {
  if (p_m.empty()) throw ArgumentError("preference accuracy of an empty pair set");
  if (p_m.size() != p_n.size()) throw ArgumentError("score lists differ in length");
  double wins = 0.0;
  for (size_t i = 0; i < p_m.size(); ++i) wins += p_m[i] > p_n[i] ? 1.0 : (p_m[i] == p_n[i] ? 0.5 : 0.0);
  return wins / static_cast<double>(p_m.size());
}

double preference_accuracy(const RewardModel& model, const RewardFeatures& features,
                           const std::vector<PreferencePair>& pairs) {
  if (pairs.empty()) throw ArgumentError("preference accuracy of an empty pair set");
  std::vector<int64_t> u, m, n;
  unpack(pairs, u, m, n);
  auto pm = model.score_pairs(features, u, m).contiguous();
  auto pn = model.score_pairs(features, u, n).contiguous();
  return preference_accuracy(std::vector<double>(pm.data_ptr<float>(), pm.data_ptr<float>() + pm.numel()),
                             std::vector<double>(pn.data_ptr<float>(), pn.data_ptr<float>() + pn.numel()));
}

RewardModel train_personalized_reward(const RewardFeatures& features, const std::vector<PreferencePair>& train,
                                      const std::vector<PreferencePair>& val, const RewardModelConfig& config,
                                      const RewardTrainOptions& options) {
  if (train.empty() || val.empty()) throw ConfigError("reward model needs non-empty train and validation splits");
  torch::manual_seed(derive_seed(options.seed, "reward-init"));
  RewardModel model;
  model.net = PersonalizedReward(config);
  torch::optim::Adam opt(model.net->parameters(), torch::optim::AdamOptions(options.lr));
  auto rng = make_engine(options.seed, "reward-batches");

  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  double best = -1.0;
  NamedTensors best_state = collect_tensors(*model.net);
  int64_t stale = 0;
  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    model.net->train();
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int64_t steps = 0;
    for (size_t s = 0; s < order.size(); s += static_cast<size_t>(options.batch)) {
      std::vector<int64_t> u, m, n;
      for (size_t k = s; k < std::min(order.size(), s + static_cast<size_t>(options.batch)); ++k) {
        u.push_back(train[order[k]].user_id);
        m.push_back(train[order[k]].item_m);
        n.push_back(train[order[k]].item_n);
      }
      auto loss = bt_loss(score_rows(model.net, features, u, m), score_rows(model.net, features, u, n));
      opt.zero_grad();
      loss.backward();
      opt.step();
      total += loss.item<double>();
      ++steps;
    }
    model.train_loss.push_back(total / static_cast<double>(steps));
    model.net->eval();
    const double acc = preference_accuracy(model, features, val);
    model.val_accuracy.push_back(acc);
    if (acc > best) {
      best = acc;
      model.best_epoch = epoch;
      best_state.clear();
      for (auto& [name, t] : collect_tensors(*model.net)) best_state.emplace_back(name, t.detach().clone());
      stale = 0;
    } else if (++stale >= options.patience) {
      break;
    }
  }
  assign_tensors(*model.net, best_state);
  model.freeze();
  return model;
}

}  // namespace covergen::rewards
