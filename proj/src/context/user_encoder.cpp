// SPDX-License-Identifier: Apache-2.0
#include "covergen/context/user_encoder.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/rng.hpp"
#include "covergen/common/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

namespace covergen::context {

namespace F = torch::nn::functional;

nlohmann::json UserEncoderConfig::to_json() const { return {{"dim", dim}, {"hidden", hidden}}; }

UserEncoderConfig UserEncoderConfig::from_json(const nlohmann::json& j) {
  UserEncoderConfig c;
  c.dim = j.at("dim");
  c.hidden = j.at("hidden");
  return c;
}

UserEncoderImpl::UserEncoderImpl(const UserEncoderConfig& cfg) : config(cfg) {
  attribute_tables = register_module("attribute_tables", torch::nn::ModuleList());
  for (const auto& [name, count] : world::attribute_schema()) {
    torch::nn::Embedding table(count, cfg.hidden);
    torch::nn::init::normal_(table->weight, 0.0, 0.1);
    attribute_tables->push_back(table);
  }
  item_tower = register_module(
      "item_tower", torch::nn::Sequential(torch::nn::Linear(world::kFeatureDim, cfg.hidden), torch::nn::GELU(),
                                          torch::nn::Linear(cfg.hidden, cfg.dim)));
  user_tower = register_module(
      "user_tower", torch::nn::Sequential(torch::nn::Linear(cfg.hidden + cfg.dim, cfg.hidden), torch::nn::GELU(),
                                          torch::nn::Linear(cfg.hidden, cfg.dim)));
}

torch::Tensor UserEncoderImpl::item_embed(const torch::Tensor& features) {
  return F::normalize(item_tower->forward(features), F::NormalizeFuncOptions().dim(-1));
}

torch::Tensor UserEncoderImpl::user_embed(const torch::Tensor& attributes, const torch::Tensor& history_mean,
                                          const torch::Tensor& has_history) {
  if (attributes.size(1) != static_cast<int64_t>(attribute_tables->size())) {
    throw ConfigError("user attribute count does not match the schema");
  }
  torch::Tensor a;
  for (size_t i = 0; i < attribute_tables->size(); ++i) {
    auto e = attribute_tables[i]->as<torch::nn::Embedding>()->forward(attributes.select(1, static_cast<int64_t>(i)));
    a = a.defined() ? a + e : e;
  }
  // Rescaled so the history mean (norm <= 1) is on par with the attribute sum.
  const double scale = std::sqrt(static_cast<double>(config.dim));
  auto h = history_mean * has_history.to(history_mean.dtype()).unsqueeze(-1) * scale;
  return F::normalize(user_tower->forward(torch::cat({a, h}, -1)), F::NormalizeFuncOptions().dim(-1));
}

torch::Tensor attribute_tensor(const std::vector<world::UserProfile>& users) {
  const auto& schema = world::attribute_schema();
  auto out = torch::zeros({static_cast<int64_t>(users.size()), static_cast<int64_t>(schema.size())}, torch::kInt64);
  auto acc = out.accessor<int64_t, 2>();
  for (size_t u = 0; u < users.size(); ++u) {
    for (size_t a = 0; a < schema.size(); ++a) {
      const auto it = users[u].attributes.find(schema[a].first);
      if (it == users[u].attributes.end()) throw ConfigError("user is missing attribute " + schema[a].first);
      if (it->second < 0 || it->second >= schema[a].second) throw ConfigError("attribute out of range: " + it->first);
      acc[u][a] = it->second;
    }
  }
  return out;
}

torch::Tensor style_features(const std::vector<world::ItemRecord>& items) {
  auto out = torch::zeros({static_cast<int64_t>(items.size()), world::kFeatureDim});
  auto acc = out.accessor<float, 2>();
  for (size_t i = 0; i < items.size(); ++i) {
    const auto f = world::featurize_style(items[i].style);
    for (int k = 0; k < world::kFeatureDim; ++k) acc[i][k] = static_cast<float>(f[k]);
  }
  return out;
}

torch::Tensor UserModel::embed_items(const std::vector<world::ItemRecord>& items) const {
  return encoder.ptr()->item_embed(style_features(items));
}

torch::Tensor UserModel::encode(const world::UserProfile& user, const std::vector<world::ItemRecord>& history) const {
  const auto d = encoder->config.dim;
  auto mean = history.empty() ? torch::zeros({1, d}) : embed_items(history).mean(0, true);
  auto has = torch::full({1}, !history.empty(), torch::kBool);
  return encoder.ptr()->user_embed(attribute_tensor({user}), mean, has).squeeze(0);
}

torch::Tensor UserModel::encode_all(const std::vector<world::UserProfile>& users,
                                    const std::map<int64_t, std::vector<world::Interaction>>& history,
                                    const std::vector<world::ItemRecord>& catalog) const {
  std::vector<torch::Tensor> out;
  for (const auto& u : users) {
    std::vector<world::ItemRecord> items;
    if (auto it = history.find(u.user_id); it != history.end()) {
      for (const auto& x : it->second) items.push_back(world::find_item(catalog, x.item_id));
    }
    out.push_back(encode(u, items));
  }
  return torch::stack(out);
}

void UserModel::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  auto hyper = encoder->config.to_json();
  if (!extra.is_null()) hyper["training"] = extra;
  write_checkpoint(path, collect_tensors(*encoder), hyper);
}

UserModel UserModel::load(const std::filesystem::path& path) {
  UserModel m;
  m.encoder = UserEncoder(UserEncoderConfig::from_json(read_sidecar(path).at("hyperparameters")));
  assign_tensors(*m.encoder, read_checkpoint(path));
  m.freeze();
  return m;
}

std::string UserModel::digest() const { return digest_module(*encoder); }

void UserModel::freeze() {
  encoder->eval();
  for (auto& p : encoder->parameters()) p.set_requires_grad(false);
}

UserModel train_user_encoder(const std::vector<world::UserProfile>& users, const std::vector<world::ItemRecord>& items,
                             const std::vector<world::Interaction>& history, const UserEncoderConfig& config,
                             const UserTrainOptions& options) {
  if (history.empty()) throw ArgumentError("train_user_encoder needs at least one interaction");
  torch::manual_seed(derive_seed(options.seed, "user-init"));
  UserModel model;
  model.encoder = UserEncoder(config);
  model.encoder->train();

  std::unordered_map<int64_t, int64_t> item_row, user_row;
  for (size_t i = 0; i < items.size(); ++i) item_row[items[i].item_id] = static_cast<int64_t>(i);
  for (size_t u = 0; u < users.size(); ++u) user_row[users[u].user_id] = static_cast<int64_t>(u);

  // Pair tables: (user row, item row); per-user history as a sparse sum matrix.
  std::vector<int64_t> pair_user, pair_item, counts(users.size(), 0);
  for (const auto& x : history) {
    auto ui = user_row.find(x.user_id);
    auto ii = item_row.find(x.item_id);
    if (ui == user_row.end() || ii == item_row.end()) throw ArgumentError("interaction references an unknown id");
    pair_user.push_back(ui->second);
    pair_item.push_back(ii->second);
    ++counts[ui->second];
  }
  const auto n_users = static_cast<int64_t>(users.size());
  const auto n_items = static_cast<int64_t>(items.size());
  auto membership = torch::zeros({n_users, n_items});
  for (size_t p = 0; p < pair_user.size(); ++p) membership[pair_user[p]][pair_item[p]] += 1.0;
  auto count_t = torch::tensor(counts, torch::kInt64).to(torch::kFloat);

  const auto features = style_features(items);
  const auto attrs = attribute_tensor(users);
  torch::optim::Adam opt(model.encoder->parameters(), torch::optim::AdamOptions(options.lr));
  auto rng = make_engine(options.seed, "user-batches");
  std::vector<size_t> order(pair_user.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = std::min<size_t>(static_cast<size_t>(options.batch), order.size());
  if (batch < 2) throw ArgumentError("in-batch softmax needs at least two pairs");

  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int64_t steps = 0;
    for (size_t s = 0; s + batch <= order.size(); s += batch) {
      std::vector<int64_t> bu, bi;
      for (size_t k = s; k < s + batch; ++k) {
        bu.push_back(pair_user[order[k]]);
        bi.push_back(pair_item[order[k]]);
      }
      auto tu = torch::tensor(bu, torch::kInt64);
      auto ti = torch::tensor(bi, torch::kInt64);
      auto all_items = model.encoder->item_embed(features);  // [I, d]
      auto sums = membership.index_select(0, tu).matmul(all_items);
      auto pos = all_items.index_select(0, ti);
      auto n_rest = count_t.index_select(0, tu) - 1.0;
      auto has = n_rest.gt(0);
      auto loo = (sums - pos) / n_rest.clamp_min(1.0).unsqueeze(-1);
      auto ue = model.encoder->user_embed(attrs.index_select(0, tu), loo, has);
      auto logits = ue.matmul(pos.t()) / options.temperature;
      auto loss = F::cross_entropy(logits, torch::arange(static_cast<int64_t>(batch), torch::kInt64));
      opt.zero_grad();
      loss.backward();
      opt.step();
      total += loss.item<double>();
      ++steps;
    }
    model.epoch_loss.push_back(total / static_cast<double>(std::max<int64_t>(steps, 1)));
  }
  model.freeze();
  return model;
}

}  // namespace covergen::context
