// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "covergen/common/errors.hpp"
#include "covergen/rewards/pairs.hpp"
#include "covergen/rewards/proxies.hpp"
#include "covergen/rewards/reward_model.hpp"

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

using namespace covergen;
using namespace covergen::rewards;

namespace {

std::vector<world::Interaction> user_rows(int64_t user, const std::vector<double>& relevance) {
  std::vector<world::Interaction> out;
  for (size_t i = 0; i < relevance.size(); ++i) {
    out.push_back({user, static_cast<int64_t>(100 + i), relevance[i], static_cast<int64_t>(i)});
  }
  return out;
}

const embedder::FrozenEmbedder& quick_embedder() {
  static const embedder::FrozenEmbedder e = [] {
    std::vector<embedder::TrainingPair> pairs;
    for (const auto& it : world::sample_catalog(1000, 71)) {
      pairs.push_back({it.ref_image, world::caption_tokens(it.style)});
      pairs.push_back({it.ref_image, it.title});
    }
    embedder::TrainOptions opt;
    opt.epochs = 4;
    opt.seed = 3;
    return embedder::train_joint_embedder(pairs, embedder::EmbedderConfig{}, opt).embedder;
  }();
  return e;
}

struct SmallWorld {
  std::vector<world::ItemRecord> items = world::sample_catalog(300, 81);
  std::vector<world::UserProfile> users = world::sample_users(300, 82);
  std::vector<world::Interaction> inter = world::simulate_interactions(users, items, world::InteractionConfig{}, 83);
};

const SmallWorld& small_world() {
  static const SmallWorld w;
  return w;
}

}  // namespace

TEST_CASE("preference pairs") {
  SUBCASE("fewer than six interactions are dropped") {
    CHECK(build_preference_pairs(user_rows(1, {0.1, 0.2, 0.3, 0.4, 0.5}), 1, 1).empty());
    CHECK(build_preference_pairs(user_rows(1, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}), 1, 1).size() == 1);
  }
  SUBCASE("ten interactions with k1 = k2 = 3 give nine pairs") {
    const auto pairs = build_preference_pairs(user_rows(7, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}), 3, 3);
    REQUIRE(pairs.size() == 9);
    CHECK(pairs.front() == PreferencePair{7, 109, 102});
    for (const auto& p : pairs) {
      CHECK(p.item_m >= 107);
      CHECK(p.item_n <= 102);
    }
  }
  SUBCASE("ties break by item id") {
    const auto pairs = build_preference_pairs(user_rows(2, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5}), 1, 1);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].item_m == 100);
    CHECK(pairs[0].item_n == 105);
  }
  SUBCASE("overlapping top and bottom sets skip the user") {
    CHECK(build_preference_pairs(user_rows(3, {1, 2, 3, 4, 5, 6}), 4, 3).empty());
    CHECK_THROWS_AS(build_preference_pairs(user_rows(3, {1, 2, 3, 4, 5, 6}), 0, 3), ArgumentError);
  }
  SUBCASE("noise-free pairs agree with the oracle") {
    const auto& w = small_world();
    auto cfg = world::InteractionConfig{};
    cfg.noise_sigma = 0.0;
    const auto inter = world::simulate_interactions(w.users, w.items, cfg, 5);
    const auto pairs = build_preference_pairs(inter, 3, 3);
    CHECK(pairs.size() == w.users.size() * 9);
    std::map<int64_t, const world::UserProfile*> by_id;
    for (const auto& u : w.users) by_id[u.user_id] = &u;
    for (const auto& p : pairs) {
      CHECK(world::oracle_utility(*by_id[p.user_id], world::find_item(w.items, p.item_m).style) >
            world::oracle_utility(*by_id[p.user_id], world::find_item(w.items, p.item_n).style));
    }
    CHECK(build_preference_pairs(inter, 3, 3) == pairs);
  }
  SUBCASE("persistence and split") {
    const auto pairs = build_preference_pairs(small_world().inter, 3, 3);
    const auto path = std::filesystem::temp_directory_path() / "covergen_pairs_test.jsonl";
    write_pairs(path, pairs);
    CHECK(read_pairs(path) == pairs);
    const auto split = split_pairs_by_user(pairs, 1);
    CHECK(split.train.size() + split.val.size() + split.test.size() == pairs.size());
    std::set<int64_t> tr, te;
    for (const auto& p : split.train) tr.insert(p.user_id);
    for (const auto& p : split.test) te.insert(p.user_id);
    for (auto u : te) CHECK(tr.count(u) == 0);
    CHECK(te.size() == 30);
  }
}

TEST_CASE("Bradley-Terry loss") {
  CHECK(std::abs(bt_loss(0.0, 0.0) - std::log(2.0)) < 1e-9);
  CHECK(bt_loss(1.0, 0.0) == doctest::Approx(0.313262).epsilon(1e-6));
  CHECK(bt_loss(1000.0, 0.0) == doctest::Approx(0.0));
  CHECK(bt_loss(0.0, 1000.0) == doctest::Approx(1000.0));
  CHECK(std::isfinite(bt_loss(-1e6, 1e6)));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 3.0);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double a = g(rng), b = g(rng);
    CHECK(bt_loss(a, b) + bt_loss(b, a) >= 2 * std::log(2.0) - 1e-12);
    auto pm = torch::tensor({a}, torch::kDouble).requires_grad_();
    auto pn = torch::tensor({b}, torch::kDouble).requires_grad_();
    bt_loss(pm, pn).backward();
    const double h = 1e-5;
    const double dm = (bt_loss(a + h, b) - bt_loss(a - h, b)) / (2 * h);
    const double dn = (bt_loss(a, b + h) - bt_loss(a, b - h)) / (2 * h);
    const double sig = 1.0 / (1.0 + std::exp(-(a - b)));
    CHECK(dm == doctest::Approx(-(1 - sig)).epsilon(1e-6).scale(1.0));
    worst = std::max(worst, std::abs(pm.grad().item<double>() - dm) / std::max(std::abs(dm), 1e-12));
    worst = std::max(worst, std::abs(pn.grad().item<double>() - dn) / std::max(std::abs(dn), 1e-12));
  }
  CHECK(worst < 1e-4);
  CHECK(bt_loss(1.0, 1.0) + bt_loss(1.0, 1.0) == doctest::Approx(2 * std::log(2.0)));
}

TEST_CASE("aesthetic proxy") {
  auto gray = torch::full({3, 32, 32}, 0.5);
  CHECK(aesthetic_reward(gray).item<double>() == 0.0);
  auto idx = torch::arange(32);
  auto checker = ((idx.view({32, 1}) + idx.view({1, 32})) % 2).to(torch::kFloat).unsqueeze(0).expand({3, 32, 32});
  CHECK(aesthetic_reward(checker).item<double>() > aesthetic_reward(gray).item<double>());
  const auto cover = world::sample_catalog(1, 3)[0].ref_image;
  const double r = aesthetic_reward(cover).item<double>();
  CHECK(r > 0.0);
  CHECK(r < 1.0);
  CHECK(aesthetic_reward(torch::stack({cover, gray})).size(0) == 2);

  auto x = (cover.to(torch::kDouble) * 0.8 + 0.1).clone().requires_grad_();
  aesthetic_reward(x).backward();
  auto analytic = x.grad().clone();
  torch::NoGradGuard guard;
  std::mt19937_64 rng(2);
  double num = 0.0, den = 0.0;
  for (int k = 0; k < 40; ++k) {
    const auto i = static_cast<int64_t>(rng() % x.numel());
    auto up = x.clone(), dn = x.clone();
    const double h = 1e-6;
    up.view({-1})[i] += h;
    dn.view({-1})[i] -= h;
    const double fd = (aesthetic_reward(up).item<double>() - aesthetic_reward(dn).item<double>()) / (2 * h);
    num += std::pow(analytic.view({-1})[i].item<double>() - fd, 2);
    den += fd * fd;
  }
  CHECK(std::sqrt(num / den) < 1e-3);
}

TEST_CASE("relevance proxy") {
  const auto& emb = quick_embedder();
  const auto held = world::sample_catalog(100, 72, 5000);
  std::vector<world::TokenSeq> captions, shuffled;
  for (const auto& it : held) captions.push_back(world::caption_tokens(it.style));
  shuffled = captions;
  std::rotate(shuffled.begin(), shuffled.begin() + 37, shuffled.end());
  torch::NoGradGuard guard;
  auto imgs = world::stack_images(held);
  auto matched = relevance_reward(emb, imgs, world::pad_batch(captions));
  auto mismatched = relevance_reward(emb, imgs, world::pad_batch(shuffled));
  CHECK(matched.mean().item<double>() > mismatched.mean().item<double>() + 0.1);
  CHECK(matched.abs().max().item<double>() <= 1.0 + 1e-6);
  auto twice = relevance_reward(emb, torch::stack({held[0].ref_image, held[0].ref_image}),
                                world::pad_batch({captions[0], captions[0]}));
  CHECK(twice[0].item<double>() == twice[1].item<double>());
  auto direct = (emb.embed_image(held[0].ref_image) * emb.embed_text(captions[0])).sum().item<double>();
  CHECK(twice[0].item<double>() == doctest::Approx(direct).epsilon(1e-6));
}

TEST_CASE("preference accuracy") {
  CHECK(preference_accuracy({1, 1, 1}, {1, 1, 1}) == 0.5);
  CHECK(preference_accuracy({2, 0}, {1, 1}) == 0.5);
  CHECK_THROWS_AS(preference_accuracy(std::vector<double>{}, std::vector<double>{}), ArgumentError);

  const auto& w = small_world();
  auto cfg = world::InteractionConfig{};
  cfg.noise_sigma = 0.0;
  const auto pairs = build_preference_pairs(world::simulate_interactions(w.users, w.items, cfg, 9), 3, 3);
  std::vector<double> pm, pn, am, an;
  for (const auto& p : pairs) {
    const auto& u = w.users[static_cast<size_t>(p.user_id)];
    pm.push_back(world::oracle_utility(u, world::find_item(w.items, p.item_m).style));
    pn.push_back(world::oracle_utility(u, world::find_item(w.items, p.item_n).style));
    am.push_back(-pm.back());
    an.push_back(-pn.back());
  }
  CHECK(preference_accuracy(pm, pn) == 1.0);
  CHECK(preference_accuracy(am, an) == 0.0);
}

TEST_CASE("personalized reward model") {
  const auto& w = small_world();
  const auto& emb = quick_embedder();
  const auto features = compute_reward_features(emb, w.items, w.users);
  const auto split = split_pairs_by_user(build_preference_pairs(w.inter, 3, 3), 4);

  SUBCASE("untrained model is deterministic, finite and at chance") {
    torch::manual_seed(1);
    RewardModel m;
    m.net = PersonalizedReward(RewardModelConfig{});
    m.freeze();
    const auto& it = w.items[3];
    const auto prof = world::profile_tokens(w.users[5]);
    const double a = personalized_score(m, emb, it.title, world::caption_tokens(it.style), it.ref_image, prof);
    CHECK(a == personalized_score(m, emb, it.title, world::caption_tokens(it.style), it.ref_image, prof));
    std::mt19937_64 rng(3);
    std::vector<int64_t> us, is;
    for (int k = 0; k < 1000; ++k) {
      us.push_back(static_cast<int64_t>(rng() % w.users.size()));
      is.push_back(static_cast<int64_t>(rng() % w.items.size()));
    }
    CHECK(torch::isfinite(m.score_pairs(features, us, is)).all().item<bool>());
    // Random pairs (not the structured top/bottom ones) to avoid item reuse.
    std::vector<PreferencePair> random_pairs;
    for (int k = 0; k < 2000; ++k) {
      const auto u = static_cast<int64_t>(rng() % w.users.size());
      const auto a1 = static_cast<int64_t>(rng() % w.items.size());
      auto b1 = static_cast<int64_t>(rng() % w.items.size());
      if (b1 == a1) b1 = (b1 + 1) % static_cast<int64_t>(w.items.size());
      const bool a_better = world::oracle_utility(w.users[u], w.items[a1].style) >
                            world::oracle_utility(w.users[u], w.items[b1].style);
      random_pairs.push_back({u, a_better ? a1 : b1, a_better ? b1 : a1});
    }
    const double acc = preference_accuracy(m, features, random_pairs);
    MESSAGE("untrained accuracy " << acc);
    CHECK(std::abs(acc - 0.5) < 0.05);
    CHECK(m.net->trainable_parameters() > 0);
  }

  SUBCASE("training separates held-out preferred items") {
    RewardTrainOptions opt;
    opt.epochs = 15;
    opt.lr = 1e-3;
    opt.seed = 2;
    auto m = train_personalized_reward(features, split.train, split.val, RewardModelConfig{}, opt);
    const double acc = preference_accuracy(m, features, split.test);
    MESSAGE("held-out accuracy " << acc << " best epoch " << m.best_epoch);
    CHECK(acc > 0.6);
    CHECK(m.train_loss.back() < m.train_loss.front());

    const auto path = std::filesystem::temp_directory_path() / "covergen_reward_test.ckpt";
    m.save(path);
    auto back = RewardModel::load(path);
    CHECK(back.digest() == m.digest());
    CHECK(preference_accuracy(back, features, split.test) == acc);
  }

  SUBCASE("variants and errors") {
    for (auto v : all_reward_variants()) {
      RewardModelConfig c;
      c.variant = v;
      PersonalizedReward net(c);
      auto p = net->forward(torch::randn({4, 64}), torch::randn({4, 64}), torch::randn({4, 64}), torch::randn({4, 64}));
      CHECK(p.sizes() == torch::IntArrayRef({4}));
      CHECK(parse_reward_variant(to_string(v)) == v);
    }
    CHECK_THROWS_AS(parse_reward_variant("text_only"), ArgumentError);
    CHECK_THROWS_AS(train_personalized_reward(features, {}, split.val, RewardModelConfig{}, {}), ConfigError);
  }
}
