// SPDX-License-Identifier: Apache-2.0
#include "covergen/training/pipeline.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/rng.hpp"
#include "covergen/context/prompt.hpp"

namespace covergen::training {

int64_t FrozenStack::item_row(int64_t item_id) const {
  auto it = item_index.find(item_id);
  if (it == item_index.end()) throw ArgumentError("unknown item id " + std::to_string(item_id));
  return it->second;
}

int64_t FrozenStack::user_row(int64_t user_id) const {
  auto it = user_index.find(user_id);
  if (it == user_index.end()) throw ArgumentError("unknown user id " + std::to_string(user_id));
  return it->second;
}

std::map<std::string, std::string> FrozenStack::frozen_digests() const {
  std::map<std::string, std::string> d = {{"embedder", embedder.digest()},
                                          {"context_encoder", context.digest()},
                                          {"user_encoder", users_model.digest()},
                                          {"base_denoiser", base.digest()}};
  if (reward.net) d["reward_model"] = reward.digest();
  return d;
}

FrozenStack build_stack(embedder::FrozenEmbedder embedder, context::ContextModel context,
                        context::UserModel users_model, diffusion::BaseModel base, rewards::RewardModel reward,
                        std::vector<world::ItemRecord> items, std::vector<world::UserProfile> users,
                        const std::vector<world::Interaction>& history) {
  if (items.empty() || users.empty()) throw ArgumentError("stack needs items and users");
  torch::NoGradGuard guard;
  FrozenStack s{std::move(embedder), std::move(context), std::move(users_model), std::move(base), std::move(reward),
                std::move(items), std::move(users), world::group_by_user(history)};
  for (size_t i = 0; i < s.items.size(); ++i) s.item_index[s.items[i].item_id] = static_cast<int64_t>(i);
  for (size_t u = 0; u < s.users.size(); ++u) s.user_index[s.users[u].user_id] = static_cast<int64_t>(u);

  std::vector<world::TokenSeq> prompts, captions, titles, profiles;
  for (const auto& it : s.items) {
    prompts.push_back(context::generate_explicit_prompt(it));
    captions.push_back(world::caption_tokens(it.style));
    titles.push_back(it.title);
  }
  for (const auto& u : s.users) profiles.push_back(world::profile_tokens(u));
  s.prompt_ids = world::pad_batch(prompts);
  s.caption_ids = world::pad_batch(captions);
  s.prompt_emb = s.embedder.embed_texts(s.prompt_ids);
  s.caption_emb = s.embedder.embed_texts(s.caption_ids);
  s.title_emb = s.embedder.embed_texts(world::pad_batch(titles));
  s.profile_emb = s.embedder.embed_texts(world::pad_batch(profiles));

  std::vector<torch::Tensor> ctx;
  auto enc = s.context.encoder;
  for (size_t b = 0; b < s.items.size(); b += 128) {
    std::vector<world::ItemRecord> part(s.items.begin() + b, s.items.begin() + std::min(s.items.size(), b + 128));
    std::vector<world::TokenSeq> t;
    for (const auto& it : part) t.push_back(it.title);
    ctx.push_back(context::encode_context(enc, s.context.meta, world::stack_images(part), world::pad_batch(t)));
  }
  s.context_bank = torch::cat(ctx);
  s.user_bank = s.users_model.encode_all(s.users, s.history, s.items);
  return s;
}

torch::Tensor personalized_condition(const FrozenStack& stack, diffusion::Adapter& adapter,
                                     const std::vector<int64_t>& item_rows, const std::vector<int64_t>& user_rows,
                                     const ConditionOptions& options) {
  if (!options.use_meta && !options.use_user) return {};
  torch::Tensor ctx, usr;
  if (options.use_meta) ctx = stack.context_bank.index_select(0, torch::tensor(item_rows, torch::kInt64));
  if (options.use_user) usr = stack.user_bank.index_select(0, torch::tensor(user_rows, torch::kInt64));
  return adapter->fusion->forward(ctx, usr);
}

torch::Tensor generate_covers(const FrozenStack& stack, diffusion::Adapter* adapter,
                              const std::vector<int64_t>& item_rows, const std::vector<int64_t>& user_rows,
                              const GenerateOptions& options, int64_t chunk) {
  if (item_rows.size() != user_rows.size()) throw ArgumentError("item and user rows differ in length");
  if (options.personalized && !adapter) throw ArgumentError("personalized generation needs an adapter");
  torch::NoGradGuard guard;
  auto model = stack.base.model;
  const auto n = static_cast<int64_t>(item_rows.size());
  auto x_T = diffusion::initial_noise(n, model->config.image_size, options.sample.seed);
  std::vector<torch::Tensor> out;
  for (int64_t s = 0; s < n; s += chunk) {
    const auto e = std::min(n, s + chunk);
    std::vector<int64_t> ir(item_rows.begin() + s, item_rows.begin() + e);
    std::vector<int64_t> ur(user_rows.begin() + s, user_rows.begin() + e);
    diffusion::Condition cond{stack.prompt_ids.index_select(0, torch::tensor(ir, torch::kInt64))};
    if (options.personalized) {
      cond.c_p = personalized_condition(stack, *adapter, ir, ur, options.condition);
      cond.adapter = cond.c_p.defined() ? adapter->get() : nullptr;
    }
    auto x = diffusion::ddim_rollout(model, stack.base.schedule, cond, x_T.slice(0, s, e), options.sample).x;
    out.push_back(diffusion::to_image_space(x));
  }
  return torch::cat(out);
}

}  // namespace covergen::training
