// SPDX-License-Identifier: Apache-2.0
#include "covergen/evalsuite/recsys.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/rng.hpp"
#include "covergen/evalsuite/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace covergen::evalsuite {

namespace {

struct TwoTowerImpl : torch::nn::Module {
  TwoTowerImpl(const RecsysData& data, RecsysMode mode, const RecsysOptions& o) : mode_(mode) {
    const int64_t d = data.item_features.size(1);
    user_ids = register_module("user_ids", torch::nn::Embedding(data.n_users, o.id_dim));
    item_ids = register_module("item_ids", torch::nn::Embedding(data.n_items, o.id_dim));
    torch::NoGradGuard guard;
    user_ids->weight.normal_(0.0, 0.1);
    item_ids->weight.normal_(0.0, 0.1);
    const int64_t item_in = o.id_dim + (mode == RecsysMode::NoImage ? 0 : d);
    int64_t user_in = o.id_dim;
    if (mode == RecsysMode::AveragedUser || mode == RecsysMode::GeneratedUser) user_in += d;
    if (mode == RecsysMode::GeneratedUser) user_in += d;
    item_proj = register_module("item_proj", torch::nn::Linear(item_in, o.out_dim));
    user_proj = register_module("user_proj", torch::nn::Linear(user_in, o.out_dim));
  }

  torch::Tensor items(const RecsysData& data, const torch::Tensor& rows) {
    std::vector<torch::Tensor> parts{item_ids(rows)};
    if (mode_ != RecsysMode::NoImage) parts.push_back(data.item_features.index_select(0, rows));
    return torch::nn::functional::normalize(item_proj(torch::cat(parts, 1)),
                                            torch::nn::functional::NormalizeFuncOptions().dim(1));
  }

  torch::Tensor users(const RecsysData& data, const torch::Tensor& rows) {
    std::vector<torch::Tensor> parts{user_ids(rows)};
    if (mode_ == RecsysMode::AveragedUser || mode_ == RecsysMode::GeneratedUser) {
      parts.push_back(data.history_features.index_select(0, rows));
    }
    if (mode_ == RecsysMode::GeneratedUser) parts.push_back(data.generated_features.index_select(0, rows));
    return torch::nn::functional::normalize(user_proj(torch::cat(parts, 1)),
                                            torch::nn::functional::NormalizeFuncOptions().dim(1));
  }

  RecsysMode mode_;
  torch::nn::Embedding user_ids{nullptr}, item_ids{nullptr};
  torch::nn::Linear item_proj{nullptr}, user_proj{nullptr};
};
TORCH_MODULE(TwoTower);

}  // namespace

std::string recsys_mode_name(RecsysMode mode) {
  switch (mode) {
    case RecsysMode::NoImage: return "no_image";
    case RecsysMode::Item: return "item";
    case RecsysMode::AveragedUser: return "averaged_user";
    case RecsysMode::GeneratedUser: return "generated_user";
  }
  throw ArgumentError("unknown recommendation mode");
}

RecsysMode parse_recsys_mode(const std::string& name) {
  for (auto m : all_recsys_modes()) {
    if (recsys_mode_name(m) == name) return m;
  }
  throw ArgumentError("unknown recommendation mode '" + name + "'");
}

const std::vector<RecsysMode>& all_recsys_modes() {
  static const std::vector<RecsysMode> modes{RecsysMode::NoImage, RecsysMode::Item, RecsysMode::AveragedUser,
                                             RecsysMode::GeneratedUser};
  return modes;
}

RecsysData build_recsys_data(const embedder::FrozenEmbedder& embedder, const std::vector<world::ItemRecord>& items,
                             const std::vector<world::UserProfile>& users, const world::TimeSplit& split) {
  RecsysData data;
  data.n_users = static_cast<int64_t>(users.size());
  data.n_items = static_cast<int64_t>(items.size());
  std::map<int64_t, int64_t> item_row, user_row;
  for (size_t i = 0; i < items.size(); ++i) item_row[items[i].item_id] = static_cast<int64_t>(i);
  for (size_t u = 0; u < users.size(); ++u) user_row[users[u].user_id] = static_cast<int64_t>(u);
  {
    torch::NoGradGuard guard;
    data.item_features = embedder.embed_images(world::stack_images(items));
  }
  for (const auto& x : split.history) {
    const int64_t u = user_row.at(x.user_id), i = item_row.at(x.item_id);
    data.train.emplace_back(u, i);
    data.seen[u].push_back(i);
  }
  for (const auto& x : split.future) data.test[user_row.at(x.user_id)].push_back(item_row.at(x.item_id));
  data.history_features = torch::zeros({data.n_users, data.item_features.size(1)});
  for (const auto& [u, rows] : data.seen) {
    auto idx = torch::tensor(rows, torch::kLong);
    data.history_features[u] = data.item_features.index_select(0, idx).mean(0);
  }
  return data;
}

RecsysResult recsys_eval(RecsysMode mode, const RecsysData& data, const RecsysOptions& options, uint64_t seed) {
  if (data.train.empty() || data.test.empty()) throw ArgumentError("recommendation data has no interactions");
  if (mode == RecsysMode::GeneratedUser && !data.generated_features.defined()) {
    throw ArgumentError("generated_user mode needs generated cover features");
  }
  torch::manual_seed(derive_seed(seed, "recsys-init-" + recsys_mode_name(mode)));
  TwoTower model(data, mode, options);
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(options.lr));
  auto rng = make_engine(seed, "recsys-order");
  std::vector<size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(options.batch)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(options.batch));
      std::vector<int64_t> us, is;
      for (size_t j = start; j < end; ++j) {
        us.push_back(data.train[order[j]].first);
        is.push_back(data.train[order[j]].second);
      }
      auto u = model->users(data, torch::tensor(us, torch::kLong));
      auto it = model->items(data, torch::tensor(is, torch::kLong));
      auto logits = u.matmul(it.transpose(0, 1)) / options.temperature;
      // Duplicate items in a batch are masked out of each other's negatives.
      auto it_rows = torch::tensor(is, torch::kLong);
      auto dup = it_rows.unsqueeze(1).eq(it_rows.unsqueeze(0)) &
                 ~torch::eye(static_cast<int64_t>(is.size()), torch::kBool);
      logits = logits.masked_fill(dup, -1e9);
      auto loss = torch::nn::functional::cross_entropy(logits, torch::arange(static_cast<int64_t>(is.size())));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }

  torch::NoGradGuard guard;
  model->eval();
  auto all_items = model->items(data, torch::arange(data.n_items));
  RecsysResult result;
  for (const auto& [u, relevant] : data.test) {
    auto scores = model->users(data, torch::tensor({u}, torch::kLong)).matmul(all_items.transpose(0, 1)).squeeze(0);
    auto it = data.seen.find(u);
    if (it != data.seen.end()) {
      for (int64_t i : it->second) scores[i] = -std::numeric_limits<float>::infinity();
    }
    auto top = std::get<1>(scores.topk(std::min(options.k, data.n_items)));
    std::vector<int64_t> ranked(top.data_ptr<int64_t>(), top.data_ptr<int64_t>() + top.numel());
    result.recall += recall_at_k(ranked, relevant, options.k);
    result.ndcg += ndcg_at_k(ranked, relevant, options.k);
    ++result.n_users;
  }
  result.recall /= static_cast<double>(result.n_users);
  result.ndcg /= static_cast<double>(result.n_users);
  return result;
}

}  // namespace covergen::evalsuite
