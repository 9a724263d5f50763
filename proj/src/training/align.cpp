// SPDX-License-Identifier: Apache-2.0
#include "covergen/training/align.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/rng.hpp"
#include "covergen/common/tensor_io.hpp"
#include "covergen/rewards/proxies.hpp"

#include <cmath>
#include <sstream>

namespace covergen::training {

void TrainConfig::validate(int64_t timesteps) const {
  for (double l : {lambda_h, lambda_per, lambda_p, lambda_r})
    if (l < 0) throw ConfigError("reward weights must be >= 0");
  if (!(0 < t_lo && t_lo <= t_hi && t_hi <= 1)) throw ConfigError("feedback timestep range must satisfy 0 < t_lo <= t_hi <= 1");
  if (batch < 1) throw ConfigError("alignment batch must be >= 1");
  if (feedback_timesteps(timesteps, sample_steps, t_lo, t_hi).empty()) {
    throw ConfigError("no DDIM timestep falls inside the feedback range");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lambda_h", lambda_h},         {"lambda_per", lambda_per},     {"lambda_p", lambda_p},
          {"lambda_r", lambda_r},         {"stage1_steps", stage1_steps}, {"stage2_steps", stage2_steps},
          {"batch", batch},               {"lr", lr},                     {"t_lo", t_lo},
          {"t_hi", t_hi},                 {"sample_steps", sample_steps}, {"use_meta", condition.use_meta},
          {"use_user", condition.use_user}, {"center_per", center_per}, {"seed", seed}};
}

nlohmann::json RewardBundle::to_json() const {
  return {{"h", h}, {"p", p}, {"per", per}, {"rec", rec}, {"total", total}};
}

nlohmann::json StageLog::to_json() const {
  nlohmann::json r = nlohmann::json::array();
  for (const auto& b : rewards) r.push_back(b.to_json());
  return {{"loss", loss}, {"rewards", r}};
}

torch::Tensor combine_rewards(const torch::Tensor& h, const torch::Tensor& p, const torch::Tensor& per,
                              const torch::Tensor& rec, const RewardWeights& w) {
  torch::Tensor total;
  auto add = [&](double lambda, const torch::Tensor& score) {
    if (lambda == 0.0) return;
    auto term = -lambda * score.mean();
    total = total.defined() ? total + term : term;
  };
  add(w.h, h);
  add(w.per, per);
  add(w.p, p);
  add(w.r, rec);
  return total.defined() ? total : torch::zeros({});
}

std::vector<int64_t> feedback_timesteps(int64_t timesteps, int64_t sample_steps, double t_lo, double t_hi) {
  std::vector<int64_t> out;
  for (auto t : diffusion::ddim_timesteps(timesteps, sample_steps)) {
    const double f = static_cast<double>(t) / static_cast<double>(timesteps);
    if (f >= t_lo - 1e-12 && f <= t_hi + 1e-12) out.push_back(t);
  }
  return out;
}

torch::Tensor truncated_x0(const FrozenStack& stack, diffusion::Adapter& adapter, const std::vector<int64_t>& item_rows,
                           const std::vector<int64_t>& user_rows, const TrainConfig& config, int64_t t_star,
                           uint64_t noise_seed) {
  auto model = stack.base.model;
  const auto& sched = stack.base.schedule;
  const auto grid = diffusion::ddim_timesteps(sched.timesteps(), config.sample_steps);
  int64_t stop = -1;
  for (size_t k = 0; k < grid.size(); ++k)
    if (grid[k] == t_star) stop = static_cast<int64_t>(k);
  if (stop < 0) throw ArgumentError("t* is not on the DDIM grid");

  auto text = stack.prompt_ids.index_select(0, torch::tensor(item_rows, torch::kInt64));
  auto c_p = personalized_condition(stack, adapter, item_rows, user_rows, config.condition);
  diffusion::Condition cond{text, c_p, c_p.defined() ? adapter.get() : nullptr};
  auto x_T = diffusion::initial_noise(static_cast<int64_t>(item_rows.size()), model->config.image_size, noise_seed);
  torch::Tensor x_t;
  {
    torch::NoGradGuard guard;
    diffusion::Condition frozen_cond{text, c_p.defined() ? c_p.detach() : c_p, cond.adapter};
    diffusion::SampleOptions opt{config.sample_steps, 1.0, 0, true};
    x_t = diffusion::ddim_rollout(model, sched, frozen_cond, x_T, opt, stop).x;
  }
  auto tt = torch::full({x_t.size(0)}, t_star, torch::kInt64);
  auto eps = model->forward(x_t, tt, text, cond.c_p, cond.adapter);
  return diffusion::to_image_space(diffusion::predict_x0(x_t, tt, eps, sched));
}

namespace {

struct Batch {
  std::vector<int64_t> items, users;
};

Batch sample_batch(const FrozenStack& stack, int64_t size, std::mt19937_64& rng) {
  std::uniform_int_distribution<int64_t> pi(0, static_cast<int64_t>(stack.items.size()) - 1);
  std::uniform_int_distribution<int64_t> pu(0, static_cast<int64_t>(stack.users.size()) - 1);
  Batch b;
  for (int64_t i = 0; i < size; ++i) {
    b.items.push_back(pi(rng));
    b.users.push_back(pu(rng));
  }
  return b;
}

torch::Tensor rows(const torch::Tensor& bank, const std::vector<int64_t>& r) {
  return bank.index_select(0, torch::tensor(r, torch::kInt64));
}

struct Scores {
  torch::Tensor h, p, per, rec;
};

Scores score_images(const FrozenStack& stack, const torch::Tensor& img, const Batch& b, bool need_per,
                    bool center_per) {
  auto ie = stack.embedder.embed_images(img);
  Scores s;
  s.h = rewards::aesthetic_reward(img);
  s.p = (ie * rows(stack.prompt_emb, b.items)).sum(-1);
  s.rec = (ie * rows(stack.caption_emb, b.items)).sum(-1);
  if (need_per && center_per) {
    // score every image against every user of the batch: [B images, B users]
    const auto n = ie.size(0);
    auto rep = [n](const torch::Tensor& x) { return x.repeat_interleave(n, 0); };
    auto grid = stack.reward.net.ptr()
                    ->forward(rep(rows(stack.title_emb, b.items)), rep(rows(stack.caption_emb, b.items)), rep(ie),
                              rows(stack.profile_emb, b.users).repeat({n, 1}))
                    .view({n, n});
    s.per = grid.diagonal() - grid.mean(1);
  } else if (need_per) {
    s.per = stack.reward.net.ptr()->forward(rows(stack.title_emb, b.items), rows(stack.caption_emb, b.items), ie,
                                            rows(stack.profile_emb, b.users));
  } else {
    s.per = torch::zeros_like(s.h);
  }
  return s;
}

void check_finite(const torch::Tensor& loss, const char* stage, int64_t step) {
  if (!std::isfinite(loss.item<double>())) {
    throw NumericalFailure(std::string(stage) + " loss is not finite at step " + std::to_string(step));
  }
}

torch::optim::Adam make_optimizer(diffusion::Adapter& adapter, double lr) {
  for (auto& p : adapter->parameters()) p.set_requires_grad(true);
  return torch::optim::Adam(adapter->parameters(), torch::optim::AdamOptions(lr));
}

}  // namespace

StageLog stage1_initialize(diffusion::Adapter& adapter, const FrozenStack& stack, const TrainConfig& config) {
  if (!stack.embedder || !stack.base.model) throw ConfigError("stage 1 needs the frozen embedder and base denoiser");
  config.validate(stack.base.schedule.timesteps());
  auto opt = make_optimizer(adapter, config.lr);
  auto rng = make_engine(config.seed, "stage1");
  const auto ts = feedback_timesteps(stack.base.schedule.timesteps(), config.sample_steps, config.t_lo, config.t_hi);
  StageLog log;
  for (int64_t step = 0; step < config.stage1_steps; ++step) {
    auto b = sample_batch(stack, config.batch, rng);
    const auto t_star = ts[std::uniform_int_distribution<size_t>(0, ts.size() - 1)(rng)];
    auto img = truncated_x0(stack, adapter, b.items, b.users, config, t_star, rng());
    auto rec = (stack.embedder.embed_images(img) * rows(stack.caption_emb, b.items)).sum(-1);
    auto misalign = (1.0 - rec).mean();
    check_finite(misalign, "stage 1", step);
    log.loss.push_back(misalign.item<double>());
    if (config.lambda_r == 0.0) continue;
    auto loss = config.lambda_r * misalign;
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  return log;
}

StageLog stage2_reward_feedback(diffusion::Adapter& adapter, const FrozenStack& stack, const TrainConfig& config) {
  config.validate(stack.base.schedule.timesteps());
  if (config.lambda_per > 0 && !stack.reward.net) {
    throw ConfigError("personalized reward model missing (lambda_per > 0); run `train-reward` first");
  }
  if (!stack.embedder) throw ConfigError("embedder missing: the relevance rewards need it");
  auto opt = make_optimizer(adapter, config.lr);
  auto rng = make_engine(config.seed, "stage2");
  const auto ts = feedback_timesteps(stack.base.schedule.timesteps(), config.sample_steps, config.t_lo, config.t_hi);
  const RewardWeights w{config.lambda_h, config.lambda_per, config.lambda_p, config.lambda_r};
  StageLog log;
  for (int64_t step = 0; step < config.stage2_steps; ++step) {
    auto b = sample_batch(stack, config.batch, rng);
    const auto t_star = ts[std::uniform_int_distribution<size_t>(0, ts.size() - 1)(rng)];
    auto img = truncated_x0(stack, adapter, b.items, b.users, config, t_star, rng());
    auto s = score_images(stack, img, b, static_cast<bool>(stack.reward.net), config.center_per);
    auto total = combine_rewards(s.h, s.p, s.per, s.rec, w);
    check_finite(total, "stage 2", step);
    RewardBundle bundle{s.h.mean().item<double>(), s.p.mean().item<double>(), s.per.mean().item<double>(),
                        s.rec.mean().item<double>(), total.item<double>()};
    log.loss.push_back(bundle.total);
    log.rewards.push_back(bundle);
    if (!total.requires_grad()) continue;
    opt.zero_grad();
    total.backward();
    opt.step();
  }
  return log;
}

RewardBundle probe_rewards(const FrozenStack& stack, diffusion::Adapter& adapter, const TrainConfig& config,
                           int64_t n_probe, uint64_t seed) {
  torch::NoGradGuard guard;
  auto rng = make_engine(seed, "probe");
  auto b = sample_batch(stack, n_probe, rng);
  const auto ts = feedback_timesteps(stack.base.schedule.timesteps(), config.sample_steps, config.t_lo, config.t_hi);
  RewardBundle out;
  double n = 0;
  for (auto t_star : ts) {
    auto img = truncated_x0(stack, adapter, b.items, b.users, config, t_star, derive_seed(seed, "probe-noise"));
    auto s = score_images(stack, img, b, static_cast<bool>(stack.reward.net), config.center_per);
    out.h += s.h.mean().item<double>();
    out.p += s.p.mean().item<double>();
    out.per += s.per.mean().item<double>();
    out.rec += s.rec.mean().item<double>();
    n += 1;
  }
  out.h /= n;
  out.p /= n;
  out.per /= n;
  out.rec /= n;
  out.total = -(config.lambda_h * out.h + config.lambda_per * out.per + config.lambda_p * out.p +
                config.lambda_r * out.rec);
  return out;
}

bool AuditReport::passed() const {
  for (const auto& e : entries)
    if (e.frozen && e.changed()) return false;
  return true;
}

nlohmann::json AuditReport::to_json() const {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& e : entries) {
    groups.push_back({{"group", e.group}, {"frozen", e.frozen}, {"before", e.before}, {"after", e.after},
                      {"status", e.changed() ? "changed" : "unchanged"}});
  }
  return {{"groups", groups}, {"adapter_max_delta", adapter_max_delta}, {"passed", passed()}};
}

std::string AuditReport::to_text() const {
  std::ostringstream os;
  for (const auto& e : entries) {
    os << e.group << (e.frozen ? " (frozen) " : " (trainable) ") << (e.changed() ? "changed" : "unchanged") << '\n';
  }
  os << "adapter max |delta| " << adapter_max_delta << '\n';
  return os.str();
}

AuditReport freeze_audit(const std::map<std::string, std::string>& before, const FrozenStack& stack,
                         const NamedTensors& adapter_before, const diffusion::Adapter& adapter_after) {
  AuditReport report;
  const auto now = stack.frozen_digests();
  for (const auto& [group, digest] : before) {
    auto it = now.find(group);
    report.entries.push_back({group, true, digest, it == now.end() ? std::string("<missing>") : it->second});
  }
  const auto after = collect_tensors(*adapter_after);
  report.entries.push_back({"adapter", false, digest_tensors(adapter_before), digest_tensors(after)});
  for (size_t i = 0; i < after.size() && i < adapter_before.size(); ++i) {
    report.adapter_max_delta = std::max(
        report.adapter_max_delta, (after[i].second - adapter_before[i].second).abs().max().item<double>());
  }
  if (!report.passed()) {
    std::string names;
    for (const auto& e : report.entries)
      if (e.frozen && e.changed()) names += " " + e.group;
    throw FrozenParameterChanged("frozen parameters changed:" + names);
  }
  return report;
}

}  // namespace covergen::training
