// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "covergen/common/errors.hpp"
#include "covergen/common/tensor_io.hpp"
#include "covergen/training/align.hpp"

#include <cmath>

using namespace covergen;
using namespace covergen::training;

namespace {

// Small stack with barely trained components; enough to exercise the plumbing.
const FrozenStack& tiny_stack() {
  static const FrozenStack stack = [] {
    const auto items = world::sample_catalog(40, 1);
    const auto users = world::sample_users(30, 2);
    const auto inter = world::simulate_interactions(users, items, {10, 0.1, 0.15}, 3);
    torch::manual_seed(4);
    embedder::FrozenEmbedder emb(embedder::JointEmbedder(embedder::EmbedderConfig{}));
    context::ContextEncoderConfig cc;
    cc.hidden = 32;
    cc.layers = 1;
    cc.heads = 2;
    context::MetaTrainOptions mo;
    mo.steps = 2;
    auto ctx = context::train_meta_tokens(items, emb, cc, mo);
    context::UserTrainOptions uo;
    uo.epochs = 1;
    uo.batch = 16;
    auto um = context::train_user_encoder(users, items, inter, {}, uo);
    diffusion::DenoiserConfig dc;
    dc.channels = 8;
    diffusion::PretrainOptions po;
    po.steps = 5;
    po.batch = 4;
    auto base = diffusion::pretrain_base(items, diffusion::NoiseSchedule(), dc, po);
    rewards::RewardModel rm;
    rm.net = rewards::PersonalizedReward(rewards::RewardModelConfig{});
    rm.freeze();
    return build_stack(emb, ctx, um, base, rm, items, users, inter);
  }();
  return stack;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.stage1_steps = 3;
  c.stage2_steps = 3;
  c.batch = 2;
  c.lr = 1e-3;
  c.seed = 11;
  return c;
}

diffusion::Adapter fresh_adapter(const FrozenStack& s) {
  context::FusionConfig f;
  f.meta_tokens = s.context.meta->count();
  return diffusion::make_adapter(s.base.model, f, 5);
}

}  // namespace

TEST_CASE("reward combination arithmetic") {
  auto h = torch::tensor({0.4}, torch::kDouble), p = torch::tensor({0.6}, torch::kDouble);
  auto per = torch::tensor({1.2}, torch::kDouble), rec = torch::tensor({0.8}, torch::kDouble);
  CHECK(combine_rewards(h, p, per, rec, {}).item<double>() == doctest::Approx(-0.75).epsilon(1e-15));
  CHECK(std::abs(combine_rewards(h, p, per, rec, {}).item<double>() + 0.75) < 1e-12);
  CHECK(combine_rewards(h, p, per, rec, {0, 0, 0, 0}).item<double>() == 0.0);

  // Gradients with one λ zeroed equal the gradient of the manually reduced sum.
  torch::manual_seed(1);
  auto x = torch::randn({5}, torch::kDouble);
  const RewardWeights full{0.25, 0.25, 0.25, 0.25};
  for (int drop = 0; drop < 4; ++drop) {
    auto w = full;
    (drop == 0 ? w.h : drop == 1 ? w.per : drop == 2 ? w.p : w.r) = 0.0;
    auto a = x.clone().requires_grad_();
    auto terms = std::vector<torch::Tensor>{a.sin(), a.cos(), a.pow(2), a.tanh()};  // h, p, per, rec
    combine_rewards(terms[0], terms[1], terms[2], terms[3], w).backward();
    auto b = x.clone().requires_grad_();
    auto t2 = std::vector<torch::Tensor>{b.sin(), b.cos(), b.pow(2), b.tanh()};
    torch::Tensor manual = torch::zeros({}, torch::kDouble);
    const double lam[4] = {0.25, 0.25, 0.25, 0.25};
    const int order[4] = {0, 2, 1, 3};  // weight order h, per, p, r -> term index
    for (int k = 0; k < 4; ++k)
      if (k != drop) manual = manual - lam[k] * t2[order[k]].mean();
    manual.backward();
    CHECK((a.grad() - b.grad()).abs().max().item<double>() < 1e-9);
  }
}

TEST_CASE("feedback timesteps lie on the DDIM grid") {
  CHECK(feedback_timesteps(1000, 15, 0.1, 0.4) == std::vector<int64_t>{400, 333, 266, 200, 133});
  TrainConfig c;
  c.t_lo = 0.5;
  c.t_hi = 0.3;
  CHECK_THROWS_AS(c.validate(1000), ConfigError);
  c = TrainConfig{};
  c.lambda_per = -1;
  CHECK_THROWS_AS(c.validate(1000), ConfigError);
}

TEST_CASE("alignment stages touch only the adapter") {
  const auto& stack = tiny_stack();
  const auto before = stack.frozen_digests();
  CHECK(before.size() == 5);

  SUBCASE("no reward source leaves parameters bit-identical") {
    auto adapter = fresh_adapter(stack);
    const auto start = collect_tensors(*adapter);
    auto cfg = quick_config();
    cfg.lambda_r = 0.0;
    stage1_initialize(adapter, stack, cfg);
    CHECK(digest_module(*adapter) == digest_tensors(start));
    cfg.lambda_h = cfg.lambda_per = cfg.lambda_p = 0.0;
    stage2_reward_feedback(adapter, stack, cfg);
    CHECK(digest_module(*adapter) == digest_tensors(start));
  }

  SUBCASE("stages update the adapter and pass the audit") {
    auto adapter = fresh_adapter(stack);
    NamedTensors start;
    for (auto& [n, t] : collect_tensors(*adapter)) start.emplace_back(n, t.clone());
    auto cfg = quick_config();
    auto s1 = stage1_initialize(adapter, stack, cfg);
    auto s2 = stage2_reward_feedback(adapter, stack, cfg);
    CHECK(s1.loss.size() == 3);
    CHECK(s2.rewards.size() == 3);
    auto report = freeze_audit(before, stack, start, adapter);
    CHECK(report.passed());
    CHECK(report.adapter_max_delta > 0.0);
    CHECK(report.to_json() == freeze_audit(before, stack, start, adapter).to_json());
    // The personalized key projection moves once values are non-zero.
    CHECK(adapter->layer(0).to_k->weight.abs().max().item<double>() > 0.0);

    auto again = fresh_adapter(stack);
    stage1_initialize(again, stack, cfg);
    stage2_reward_feedback(again, stack, cfg);
    CHECK(digest_module(*again) == digest_module(*adapter));

    auto tampered = before;
    tampered["base_denoiser"] = "0000";
    CHECK_THROWS_AS(freeze_audit(tampered, stack, start, adapter), FrozenParameterChanged);
  }

  SUBCASE("missing reward model is reported") {
    auto copy = stack;
    copy.reward = rewards::RewardModel{};
    auto adapter = fresh_adapter(copy);
    try {
      stage2_reward_feedback(adapter, copy, quick_config());
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("personalized reward") != std::string::npos);
    }
  }
}

TEST_CASE("generation plumbing") {
  const auto& stack = tiny_stack();
  auto adapter = fresh_adapter(stack);
  GenerateOptions opt;
  opt.sample = {5, 7.0, 3, true};
  auto a = generate_covers(stack, &adapter, {0, 1, 2}, {0, 1, 2}, opt, 2);
  CHECK(a.sizes() == torch::IntArrayRef({3, 3, 32, 32}));
  CHECK(torch::equal(a, generate_covers(stack, &adapter, {0, 1, 2}, {0, 1, 2}, opt, 2)));
  CHECK((a - generate_covers(stack, &adapter, {0, 1, 2}, {0, 1, 2}, opt)).abs().max().item<double>() < 1e-5);
  opt.personalized = false;
  // With a zero-initialised adapter the personalized branch has no effect.
  CHECK((a - generate_covers(stack, nullptr, {0, 1, 2}, {0, 1, 2}, opt)).abs().max().item<double>() < 1e-5);
  CHECK_THROWS_AS(generate_covers(stack, nullptr, {0}, {0, 1}, opt), ArgumentError);
  auto cp = personalized_condition(stack, adapter, {0, 1}, {0, 1}, {true, true});
  CHECK(cp.sizes() == torch::IntArrayRef({2, 4, 64}));
  CHECK(personalized_condition(stack, adapter, {0}, {0}, {false, true}).size(1) == 2);
  CHECK(!personalized_condition(stack, adapter, {0}, {0}, {false, false}).defined());
}
