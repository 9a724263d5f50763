// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "covergen/common/errors.hpp"
#include "covergen/common/layers.hpp"
#include "covergen/common/tensor_io.hpp"
#include "covergen/context/prompt.hpp"
#include "covergen/diffusion/sampler.hpp"

#include <cmath>
#include <filesystem>
#include <numeric>

using namespace covergen;
using namespace covergen::diffusion;

namespace {

DenoiserConfig tiny() {
  DenoiserConfig c;
  c.channels = 8;
  return c;
}

torch::Tensor prompts_for(const std::vector<world::ItemRecord>& items) {
  std::vector<world::TokenSeq> p;
  for (const auto& it : items) p.push_back(context::generate_explicit_prompt(it));
  return world::pad_batch(p);
}

// Text-only attention written out directly, single head.
torch::Tensor reference_attention(const torch::Tensor& z, const torch::Tensor& c, CrossAttentionImpl& a) {
  auto q = a.to_q(z), k = a.to_k(c), v = a.to_v(c);
  auto w = torch::softmax(q.matmul(k.transpose(1, 2)) / std::sqrt(static_cast<double>(q.size(-1))), -1);
  return w.matmul(v);
}

// Step-by-step η = 0 rollout over every timestep, no guidance, no clipping.
torch::Tensor naive_rollout(Denoiser& model, const NoiseSchedule& s, const torch::Tensor& text, torch::Tensor x) {
  for (int64_t t = s.timesteps(); t >= 1; --t) {
    auto eps = model->forward(x, torch::full({x.size(0)}, t, torch::kInt64), text);
    const double ab = s.alpha_bar(t);
    const double ab_prev = t > 1 ? s.alpha_bar(t - 1) : 1.0;
    auto x0 = (x - std::sqrt(1 - ab) * eps) / std::sqrt(ab);
    x = std::sqrt(ab_prev) * x0 + std::sqrt(1 - ab_prev) * eps;
  }
  return x;
}

void randomize(torch::nn::Module& m, uint64_t seed) {
  torch::manual_seed(seed);
  torch::NoGradGuard guard;
  for (auto& p : m.parameters()) p.normal_(0.0, 0.3);
}

}  // namespace

TEST_CASE("noise schedule") {
  NoiseSchedule s;
  CHECK(s.timesteps() == 1000);
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(1) == doctest::Approx(1 - 1e-4).epsilon(1e-12));
  for (int64_t t = 1; t <= s.timesteps(); ++t) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  CHECK(s.alpha_bar(1000) < 1e-4);
  CHECK(s.beta(1000) == doctest::Approx(0.02));
  CHECK_THROWS_AS(s.beta(0), ArgumentError);
  CHECK_THROWS_AS(NoiseSchedule(0), ConfigError);
  const auto back = NoiseSchedule::from_json(NoiseSchedule(200).to_json());
  CHECK(back.timesteps() == 200);
}

TEST_CASE("predict_x0 inverts the forward process") {
  NoiseSchedule s;
  torch::manual_seed(1);
  auto x0 = torch::rand({2, 3, 8, 8}, torch::kDouble) * 2 - 1;
  auto eps = torch::randn_like(x0);
  for (int64_t t : {1, 50, 500, 999}) {
    auto xt = s.q_sample(x0, torch::full({2}, t, torch::kInt64), eps);
    CHECK((predict_x0(xt, t, eps, s) - x0).abs().max().item<double>() < 1e-5);
    CHECK((predict_x0(xt, torch::full({2}, t, torch::kInt64), eps, s) - x0).abs().max().item<double>() < 1e-5);
  }
  auto xt = torch::randn({1, 3, 4, 4}, torch::kDouble);
  CHECK((predict_x0(xt, 1, torch::randn_like(xt), s) - xt).abs().max().item<double>() < 0.05);

  SUBCASE("gradient with respect to eps is a scaled identity") {
    const int64_t t = 300;
    const double expected = -std::sqrt(1 - s.alpha_bar(t)) / std::sqrt(s.alpha_bar(t));
    auto e = torch::randn({6}, torch::kDouble);
    auto x = torch::randn({6}, torch::kDouble);
    const double h = 1e-6;
    for (int64_t i = 0; i < 6; ++i) {
      for (int64_t j = 0; j < 6; ++j) {
        auto up = e.clone(), dn = e.clone();
        up[j] += h;
        dn[j] -= h;
        const double d =
            (predict_x0(x, t, up, s)[i].item<double>() - predict_x0(x, t, dn, s)[i].item<double>()) / (2 * h);
        CHECK(d == doctest::Approx(i == j ? expected : 0.0).epsilon(1e-6).scale(1.0));
      }
    }
  }
}

TEST_CASE("classifier-free guidance arithmetic") {
  auto c = torch::randn({4});
  auto u = torch::randn({4});
  CHECK(torch::equal(cfg_combine(c, u, 1.0), c));
  CHECK(torch::equal(cfg_combine(c, u, 0.0), u));
  CHECK(cfg_combine(torch::ones({1}), torch::zeros({1}), 7.0).item<double>() == 7.0);
  CHECK_THROWS_AS(cfg_combine(torch::ones({2}), torch::ones({3}), 2.0), ArgumentError);
}

TEST_CASE("dual-path attention") {
  SUBCASE("zero personal projections reproduce text-only attention") {
    CrossAttention base(16, 24, 2);
    PersonalKV personal(20, 16);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      torch::manual_seed(trial);
      auto z = torch::randn({2, 7, 16});
      auto ct = torch::randn({2, 5, 24});
      auto cp = torch::randn({2, 4, 20});
      auto a = dual_path_attention(z, ct, {}, cp, *base, personal.get());
      auto b = dual_path_attention(z, ct, {}, {}, *base, nullptr);
      worst = std::max(worst, (a - b).abs().max().item<double>());
    }
    CHECK(worst < 1e-6);
  }

  SUBCASE("identical paths double the output") {
    torch::manual_seed(2);
    CrossAttention base(16, 16, 1);
    PersonalKV personal(16, 16);
    {
      torch::NoGradGuard guard;
      personal->to_k->weight.copy_(base->to_k->weight);
      personal->to_v->weight.copy_(base->to_v->weight);
    }
    auto z = torch::randn({3, 5, 16});
    auto c = torch::randn({3, 6, 16});
    auto both = dual_path_attention(z, c, {}, c, *base, personal.get());
    auto text = dual_path_attention(z, c, {}, {}, *base, nullptr);
    CHECK((both - 2 * text).abs().max().item<double>() < 1e-6);
    CHECK((text - reference_attention(z, c, *base)).abs().max().item<double>() < 1e-6);
  }

  SUBCASE("a single key returns its value row") {
    torch::manual_seed(3);
    CrossAttention base(8, 8, 1);
    auto z = torch::randn({1, 1, 8});
    auto c = torch::randn({1, 1, 8});
    auto out = dual_path_attention(z, c, {}, {}, *base, nullptr);
    CHECK(torch::allclose(out, base->to_v(c), 1e-6, 1e-6));
  }

  SUBCASE("attention weights sum to one on both paths") {
    torch::manual_seed(4);
    auto q = torch::randn({2, 1, 5, 8});
    auto k = torch::randn({2, 1, 6, 8});
    auto v = torch::eye(6).view({1, 1, 6, 6}).expand({2, 1, 6, 6});
    auto w = scaled_dot_attention(q, k, v);
    CHECK((w.sum(-1) - 1).abs().max().item<double>() < 1e-6);
    auto mask = torch::tensor({1, 1, 0, 1, 0, 0}, torch::kBool).view({1, 1, 1, 6});
    auto wm = scaled_dot_attention(q, k, v, mask);
    CHECK((wm.sum(-1) - 1).abs().max().item<double>() < 1e-6);
    CHECK(wm.select(-1, 2).abs().max().item<double>() == 0.0);
  }

  SUBCASE("personal context without adapter is rejected") {
    CrossAttention base(8, 8, 1);
    CHECK_THROWS_AS(dual_path_attention(torch::randn({1, 2, 8}), torch::randn({1, 2, 8}), {}, torch::randn({1, 2, 8}),
                                        *base, nullptr),
                    ArgumentError);
  }
}

TEST_CASE("denoiser contract") {
  torch::manual_seed(5);
  NoiseSchedule s;
  Denoiser model(tiny());
  randomize(*model, 5);
  auto adapter = make_adapter(model, context::FusionConfig{}, 1);
  const auto items = world::sample_catalog(3, 2);
  auto x = torch::randn({3, 3, 32, 32});
  auto t = torch::tensor({1, 500, 1000}, torch::kInt64);
  auto text = prompts_for(items);
  torch::NoGradGuard guard;
  auto a = predict_noise(model, s, x, t, text);
  CHECK(a.sizes() == x.sizes());
  CHECK(torch::equal(a, predict_noise(model, s, x, t, text)));
  CHECK_THROWS_AS(predict_noise(model, s, x, torch::tensor({0, 1, 2}, torch::kInt64), text), ArgumentError);
  CHECK_THROWS_AS(predict_noise(model, s, x, torch::tensor({1, 2, 1001}, torch::kInt64), text), ArgumentError);

  auto cp1 = torch::randn({3, 4, 64});
  auto cp2 = torch::randn({3, 4, 64}) * 5;
  auto with1 = predict_noise(model, s, x, t, text, cp1, adapter.get());
  auto with2 = predict_noise(model, s, x, t, text, cp2, adapter.get());
  CHECK((with1 - a).abs().max().item<double>() < 1e-6);
  CHECK((with1 - with2).abs().max().item<double>() < 1e-6);

  {
    for (auto& p : adapter->parameters()) p.normal_(0.0, 0.5);
  }
  auto moved = predict_noise(model, s, x, t, text, cp1, adapter.get());
  CHECK((moved - a).abs().max().item<double>() > 1e-4);
  CHECK_THROWS_AS(predict_noise(model, s, x, t, text, cp1, nullptr), ArgumentError);
}

TEST_CASE("DDIM sampling") {
  torch::manual_seed(6);
  NoiseSchedule s(50);
  Denoiser model(tiny());
  randomize(*model, 6);
  {
    torch::NoGradGuard guard;
    model->conv_out->weight.mul_(0.05);
  }
  const auto items = world::sample_catalog(2, 3);
  Condition cond{prompts_for(items)};
  torch::NoGradGuard guard;

  CHECK_THROWS_AS(ddim_sample(model, s, cond, {51, 1.0, 1, false}), ArgumentError);
  CHECK(ddim_timesteps(1000, 15).front() == 1000);
  CHECK(ddim_timesteps(1000, 15).back() == 66);
  CHECK(ddim_timesteps(1000, 15).size() == 15);

  SUBCASE("full-length DDIM matches a naive step-by-step loop") {
    auto xT = initial_noise(2, 32, 1);
    auto fast = ddim_rollout(model, s, cond, xT, {50, 1.0, 1, false});
    auto slow = naive_rollout(model, s, cond.text, xT.clone());
    CHECK(fast.t == 0);
    CHECK((fast.x - slow).abs().max().item<double>() < 1e-5);
  }

  SUBCASE("guidance 1 is the conditional rollout") {
    SampleOptions opt{10, 1.0, 4, false};
    auto xT = initial_noise(2, 32, 4);
    auto sampled = ddim_sample(model, s, cond, opt);
    auto x = xT;
    const auto ts = ddim_timesteps(50, 10);
    for (size_t k = 0; k < ts.size(); ++k) {
      const int64_t tp = k + 1 < ts.size() ? ts[k + 1] : 0;
      auto eps = model->forward(x, torch::full({2}, ts[k], torch::kInt64), cond.text);
      auto x0 = (x - std::sqrt(1 - s.alpha_bar(ts[k])) * eps) / std::sqrt(s.alpha_bar(ts[k]));
      x = std::sqrt(s.alpha_bar(tp)) * x0 + std::sqrt(1 - s.alpha_bar(tp)) * eps;
    }
    CHECK((sampled - to_image_space(x)).abs().max().item<double>() < 1e-6);
  }

  SUBCASE("sampling is deterministic and bounded") {
    SampleOptions opt{15, 7.0, 9, true};
    auto a = ddim_sample(model, s, cond, opt);
    auto b = ddim_sample(model, s, cond, opt);
    CHECK(torch::equal(a, b));
    CHECK(a.min().item<double>() >= 0.0);
    CHECK(a.max().item<double>() <= 1.0);
    opt.seed = 10;
    CHECK(!torch::equal(a, ddim_sample(model, s, cond, opt)));
    // Row noise depends only on (seed, row).
    CHECK(torch::equal(initial_noise(3, 32, 5).slice(0, 0, 2), initial_noise(2, 32, 5)));
  }
}

TEST_CASE("base pretraining learns and freezes") {
  const auto items = world::sample_catalog(200, 41);
  PretrainOptions opt;
  opt.steps = 300;
  opt.batch = 16;
  opt.seed = 2;
  auto base = pretrain_base(items, NoiseSchedule(), tiny(), opt);
  const auto& c = base.loss_curve;
  const size_t w = 30;
  const double head = std::accumulate(c.begin(), c.begin() + w, 0.0) / w;
  const double tail = std::accumulate(c.end() - w, c.end(), 0.0) / w;
  MESSAGE("pretraining loss " << head << " -> " << tail);
  CHECK(tail < 0.6 * head);
  for (const auto& p : base.model->parameters()) CHECK(!p.requires_grad());

  const auto digest = base.digest();
  auto adapter = make_adapter(base.model, context::FusionConfig{}, 3);
  torch::optim::Adam adam(adapter->parameters(), torch::optim::AdamOptions(1e-2));
  Condition cond{prompts_for({items[0], items[1]})};
  for (int step = 0; step < 3; ++step) {
    auto cp = adapter->fusion(torch::randn({2, 2, 64}), torch::randn({2, 32}));
    cond.c_p = cp;
    cond.adapter = adapter.get();
    auto xT = initial_noise(2, 32, step);
    auto eps = guided_noise(base.model, xT, 700, cond, 1.0);
    auto loss = eps.pow(2).mean();
    adam.zero_grad();
    loss.backward();
    adam.step();
  }
  CHECK(base.digest() == digest);

  torch::NoGradGuard guard;
  auto uncond = ddim_sample(base.model, base.schedule, {null_prompt(2)}, {15, 1.0, 3, true});
  CHECK(uncond.min().item<double>() >= 0.0);
  CHECK(uncond.max().item<double>() <= 1.0);

  const auto path = std::filesystem::temp_directory_path() / "covergen_base_test.ckpt";
  base.save(path);
  auto back = BaseModel::load(path);
  CHECK(back.digest() == digest);
  CHECK(back.schedule.timesteps() == 1000);
  const auto apath = std::filesystem::temp_directory_path() / "covergen_adapter_test.ckpt";
  save_adapter(adapter, apath);
  CHECK(digest_module(*load_adapter(apath)) == digest_module(*adapter));
}
