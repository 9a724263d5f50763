// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "covergen/common/errors.hpp"
#include "covergen/evalsuite/metrics.hpp"
#include "covergen/evalsuite/recsys.hpp"
#include "covergen/evalsuite/report.hpp"
#include "covergen/evalsuite/winrate.hpp"
#include "covergen/rewards/proxies.hpp"
#include "covergen/world/render.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace covergen;
using namespace covergen::evalsuite;

namespace {

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

// Direct double loop over every 8x8 window.
double naive_ssim(const torch::Tensor& a, const torch::Tensor& b) {
  auto x = a.to(torch::kDouble).contiguous();
  auto y = b.to(torch::kDouble).contiguous();
  const int64_t C = x.size(0), H = x.size(1), W = x.size(2);
  auto X = x.accessor<double, 3>();
  auto Y = y.accessor<double, 3>();
  double total = 0.0;
  int64_t count = 0;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i + 8 <= H; ++i) {
      for (int64_t j = 0; j + 8 <= W; ++j) {
        double mx = 0, my = 0;
        for (int di = 0; di < 8; ++di)
          for (int dj = 0; dj < 8; ++dj) {
            mx += X[c][i + di][j + dj];
            my += Y[c][i + di][j + dj];
          }
        mx /= 64;
        my /= 64;
        double vx = 0, vy = 0, cxy = 0;
        for (int di = 0; di < 8; ++di)
          for (int dj = 0; dj < 8; ++dj) {
            const double p = X[c][i + di][j + dj] - mx, q = Y[c][i + di][j + dj] - my;
            vx += p * p;
            vy += q * q;
            cxy += p * q;
          }
        vx /= 64;
        vy /= 64;
        cxy /= 64;
        const double c1 = 1e-4, c2 = 9e-4;
        total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

// Four points with zero mean and unbiased sample covariance exactly I₂.
torch::Tensor unit_cloud(double scale, double mx, double my) {
  const double a = std::sqrt(1.5) * scale;
  return torch::tensor({mx + a, my, mx - a, my, mx, my + a, mx, my - a}, torch::kDouble).view({4, 2});
}

torch::Tensor gaussian_blur(const torch::Tensor& images, double sigma) {
  const int radius = 4;
  std::vector<float> k;
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k.push_back(static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma))));
    sum += k.back();
  }
  for (auto& v : k) v = static_cast<float>(v / sum);
  auto kern = torch::tensor(k);
  auto kx = kern.view({1, 1, 1, -1}).repeat({3, 1, 1, 1});
  auto ky = kern.view({1, 1, -1, 1}).repeat({3, 1, 1, 1});
  namespace F = torch::nn::functional;
  auto x = F::pad(images, F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReplicate));
  x = F::conv2d(x, kx, F::Conv2dFuncOptions().groups(3));
  return F::conv2d(x, ky, F::Conv2dFuncOptions().groups(3));
}

}  // namespace

TEST_CASE("ssim") {
  torch::manual_seed(5);
  auto a = torch::rand({3, 16, 16});
  auto b = torch::rand({3, 16, 16});
  CHECK(std::abs(ssim(a, a) - 1.0) < 1e-9);
  CHECK(std::abs(ssim(a, b) - ssim(b, a)) < 1e-9);
  CHECK(std::abs(ssim(a, b) - naive_ssim(a, b)) < 1e-9);
  auto blurred = (a * 0.7 + 0.15);
  CHECK(std::abs(ssim(a, blurred) - naive_ssim(a, blurred)) < 1e-9);

  const double c1 = 1e-4;
  CHECK(std::abs(ssim(torch::zeros({3, 32, 32}), torch::ones({3, 32, 32})) - c1 / (1 + c1)) < 1e-7);
  CHECK(std::abs(ssim(torch::zeros({3, 32, 32}), torch::ones({3, 32, 32})) - 9.999e-5) < 1e-7);
  CHECK_THROWS_AS(ssim(a, torch::rand({3, 16, 12})), ArgumentError);
}

TEST_CASE("Fréchet distance") {
  auto eye = torch::eye(2, torch::kDouble);
  CHECK(std::abs(frechet_distance(torch::zeros({2}), eye, torch::tensor({3.0, 4.0}), eye) - 25.0) < 1e-6);
  CHECK(std::abs(frechet_distance(torch::zeros({2}), 4 * eye, torch::zeros({2}), eye) - 2.0) < 1e-6);

  SUBCASE("non-commuting covariances match the 2x2 closed form") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0, 1);
    for (int trial = 0; trial < 20; ++trial) {
      auto a = torch::tensor({n(rng), n(rng), n(rng), n(rng)}, torch::kDouble).view({2, 2});
      auto b = torch::tensor({n(rng), n(rng), n(rng), n(rng)}, torch::kDouble).view({2, 2});
      auto s1 = a.matmul(a.t()) + 0.1 * eye;
      auto s2 = b.matmul(b.t()) + 0.1 * eye;
      auto m1 = torch::tensor({n(rng), n(rng)}, torch::kDouble);
      auto m2 = torch::tensor({n(rng), n(rng)}, torch::kDouble);
      // For 2x2, tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)) and S1 S2 shares its spectrum with S1^½ S2 S1^½.
      const double tr_sqrt = std::sqrt(s1.matmul(s2).trace().item<double>() +
                                       2 * std::sqrt(s1.det().item<double>() * s2.det().item<double>()));
      const double expected = (m1 - m2).pow(2).sum().item<double>() + s1.trace().item<double>() +
                              s2.trace().item<double>() - 2 * tr_sqrt;
      CHECK(std::abs(frechet_distance(m1, s1, m2, s2) - expected) < 1e-8);
    }
  }

  SUBCASE("feature-level sets") {
    CHECK(std::abs(fid_features(unit_cloud(1, 0, 0), unit_cloud(1, 3, 4)) - 25.0) < 1e-6);
    CHECK(std::abs(fid_features(unit_cloud(2, 0, 0), unit_cloud(1, 0, 0)) - 2.0) < 1e-6);
    torch::manual_seed(2);
    auto x = torch::randn({50, 6}, torch::kDouble);
    CHECK(fid_features(x, x) < 1e-6);
    auto perm = torch::randperm(50);
    auto y = torch::randn({40, 6}, torch::kDouble) + 0.5;
    CHECK(std::abs(fid_features(x, y) - fid_features(x.index_select(0, perm), y)) < 1e-9);
    CHECK(std::abs(fid_features(x, y) - fid_features(y, x)) < 1e-8);
  }

  SUBCASE("shrinkage keeps small sets finite") {
    torch::manual_seed(4);
    auto a = torch::randn({5, 16}, torch::kDouble);
    auto b = torch::randn({5, 16}, torch::kDouble) + 1.0;
    const double d = fid_features(a, b);
    CHECK(std::isfinite(d));
    CHECK(d > 0);
    CHECK_THROWS_AS(fid_features(a.slice(0, 0, 0), b), ArgumentError);
  }

  SUBCASE("image-level FID") {
    const auto& e = quick_embedder();
    auto imgs = world::stack_images(world::sample_catalog(80, 12));
    CHECK(fid(e, imgs, imgs) < 1e-6);
    auto other = world::stack_images(world::sample_catalog(80, 13));
    CHECK(fid(e, imgs, other) < fid(e, imgs, torch::rand_like(imgs)));
    CHECK_THROWS_AS(fid(e, imgs.slice(0, 0, 0), imgs), ArgumentError);
  }
}

TEST_CASE("perceptual distance") {
  const auto& e = quick_embedder();
  auto items = world::sample_catalog(100, 21);
  auto x = world::stack_images(items);
  auto y = world::stack_images(world::sample_catalog(100, 22));
  CHECK(perceptual_distance(e, x, x).abs().max().item<double>() == 0.0);
  CHECK((perceptual_distance(e, x, y) - perceptual_distance(e, y, x)).abs().max().item<double>() < 1e-6);
  CHECK((perceptual_distance(e, x, y) >= 0).all().item<bool>());
  CHECK_THROWS_AS(perceptual_distance(e, x, y.slice(2, 0, 16)), ArgumentError);

  double previous = 0.0;
  for (double sigma : {0.5, 1.0, 2.0}) {
    const double d = perceptual_distance(e, x, gaussian_blur(x, sigma)).mean().item<double>();
    MESSAGE("blur sigma " << sigma << " distance " << d);
    CHECK(d >= previous);
    previous = d;
  }
}

TEST_CASE("aesthetic evaluation") {
  CHECK(std::abs(aesthetic_eval(torch::full({4, 3, 32, 32}, 0.5))) < 1e-6);
  CHECK_THROWS_AS(aesthetic_eval(torch::zeros({0, 3, 32, 32})), ArgumentError);
  auto imgs = world::stack_images(world::sample_catalog(10, 3));
  CHECK(std::abs(aesthetic_eval(imgs) - rewards::aesthetic_reward(imgs).mean().item<double>()) < 1e-6);
}

TEST_CASE("ranking metrics") {
  std::vector<int64_t> ranked{10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20};
  CHECK(recall_at_k(ranked, {10}, 10) == 1.0);
  CHECK(ndcg_at_k(ranked, {10}, 10) == 1.0);
  CHECK(recall_at_k(ranked, {19}, 10) == 1.0);
  CHECK(std::abs(ndcg_at_k(ranked, {19}, 10) - 1.0 / std::log2(11.0)) < 1e-9);
  CHECK(std::abs(ndcg_at_k(ranked, {19}, 10) - 0.28906) < 1e-5);
  CHECK(recall_at_k(ranked, {20}, 10) == 0.0);
  CHECK(ndcg_at_k(ranked, {99}, 10) == 0.0);
  double prev = 2.0;
  for (int64_t r = 0; r < 11; ++r) {
    const double v = ndcg_at_k(ranked, {ranked[static_cast<size_t>(r)]}, 10);
    CHECK(v <= prev);
    CHECK(v >= 0.0);
    prev = v;
  }
  // Two relevant items at ranks 1 and 3: DCG = 1 + 1/2, IDCG = 1 + 1/log2(3).
  CHECK(std::abs(ndcg_at_k(ranked, {10, 12}, 10) - 1.5 / (1 + 1 / std::log2(3.0))) < 1e-12);
  CHECK(recall_at_k(ranked, {10, 99}, 10) == 0.5);
  CHECK_THROWS_AS(ndcg_at_k(ranked, {}, 10), ArgumentError);
}

TEST_CASE("binomial test") {
  // Exhaustive enumeration with exact integer coefficients.
  auto brute = [](int64_t k, int64_t n) {
    std::vector<double> pmf(static_cast<size_t>(n + 1));
    double c = 1.0;
    for (int64_t i = 0; i <= n; ++i) {
      pmf[static_cast<size_t>(i)] = c / std::pow(2.0, static_cast<double>(n));
      c = c * static_cast<double>(n - i) / static_cast<double>(i + 1);
    }
    double p = 0;
    for (double q : pmf) {
      if (q <= pmf[static_cast<size_t>(k)] * (1 + 1e-12)) p += q;
    }
    return std::min(1.0, p);
  };
  for (int64_t n : {1, 5, 10, 30}) {
    for (int64_t k = 0; k <= n; ++k) CHECK(std::abs(binomial_two_sided(k, n) - brute(k, n)) < 1e-9);
  }
  CHECK(std::abs(binomial_two_sided(0, 10) - 2.0 / 1024.0) < 1e-12);
  CHECK(binomial_two_sided(250, 500) == doctest::Approx(1.0));
  CHECK(binomial_two_sided(280, 500) < 0.01);
  CHECK(binomial_two_sided(270, 500) > 0.05);
  CHECK_THROWS_AS(binomial_two_sided(3, 2), ArgumentError);
}

TEST_CASE("win-rate harness calibration") {
  const auto& e = quick_embedder();
  const StyleCodebook codebook(e);
  CHECK(codebook.styles().size() == 40u * 12u * 5u);
  auto users = world::sample_users(200, 31);
  auto items = world::sample_catalog(100, 32);

  SUBCASE("codebook decodes its own renders") {
    std::vector<torch::Tensor> imgs;
    std::vector<world::StyleVector> truth;
    for (size_t i = 0; i < codebook.styles().size(); i += 37) {
      truth.push_back(codebook.styles()[i]);
      imgs.push_back(world::render_cover(truth.back(), 0));
    }
    auto decoded = codebook.decode(torch::stack(imgs));
    int exact = 0;
    for (size_t i = 0; i < truth.size(); ++i) exact += decoded[i] == truth[i];
    MESSAGE("codebook self-decoding " << exact << "/" << truth.size());
    CHECK(exact >= static_cast<int>(truth.size()) * 8 / 10);
  }

  const auto oracle = personalization_win_rate(oracle_generator(users), codebook, users, items, 500, 7);
  const auto anti = personalization_win_rate(anti_oracle_generator(users), codebook, users, items, 500, 7);
  const auto free = personalization_win_rate(user_free_generator(items), codebook, users, items, 500, 7);
  MESSAGE("oracle " << oracle.rate << " anti " << anti.rate << " user-free " << free.rate << " [" << free.ci_lo
                    << ", " << free.ci_hi << "]");
  CHECK(oracle.n == 500);
  CHECK(oracle.rate > 0.9);
  CHECK(oracle.p_value < 1e-6);
  CHECK(anti.rate < 0.1);
  CHECK(free.ci_lo <= 0.5);
  CHECK(free.ci_hi >= 0.5);
  CHECK(anti.rate < free.rate);
  CHECK(free.rate < oracle.rate);

  const auto again = personalization_win_rate(oracle_generator(users), codebook, users, items, 500, 7);
  CHECK(again.wins == oracle.wins);
  CHECK_THROWS_AS(personalization_win_rate(oracle_generator(users), codebook, {users[0]}, items, 10, 1),
                  ArgumentError);
}

TEST_CASE("recommendation experiment") {
  CHECK(parse_recsys_mode("averaged_user") == RecsysMode::AveragedUser);
  CHECK_THROWS_AS(parse_recsys_mode("mmgcn"), ArgumentError);
  for (auto m : all_recsys_modes()) CHECK(parse_recsys_mode(recsys_mode_name(m)) == m);

  const auto& e = quick_embedder();
  auto items = world::sample_catalog(400, 41);
  auto users = world::sample_users(400, 42);
  auto split = world::split_by_time(world::simulate_interactions(users, items, world::InteractionConfig{}, 43), 0.8);
  auto data = build_recsys_data(e, items, users, split);
  CHECK(data.train.size() == split.history.size());
  CHECK_THROWS_AS(recsys_eval(RecsysMode::GeneratedUser, data, RecsysOptions{}, 1), ArgumentError);

  // Covers rendered from each user's oracle-best style stand in for a
  // generator that personalises perfectly.
  std::vector<torch::Tensor> best;
  for (const auto& u : users) best.push_back(world::render_cover(world::oracle_best_style(u.taste), 0));
  {
    torch::NoGradGuard guard;
    data.generated_features = e.embed_images(torch::stack(best));
  }

  std::map<RecsysMode, double> recall;
  for (auto m : all_recsys_modes()) {
    for (uint64_t seed = 1; seed <= 3; ++seed) {
      const auto r = recsys_eval(m, data, RecsysOptions{}, seed);
      CHECK(r.recall >= 0.0);
      CHECK(r.recall <= 1.0);
      CHECK(r.ndcg >= 0.0);
      CHECK(r.ndcg <= 1.0);
      CHECK(r.n_users == static_cast<int64_t>(data.test.size()));
      recall[m] += r.recall / 3.0;
    }
    MESSAGE(recsys_mode_name(m) << " recall@10 " << recall[m]);
  }
  CHECK(recall[RecsysMode::Item] >= recall[RecsysMode::NoImage]);
  CHECK(recall[RecsysMode::AveragedUser] >= recall[RecsysMode::Item]);
  CHECK(recall[RecsysMode::GeneratedUser] >= recall[RecsysMode::AveragedUser]);
}

TEST_CASE("metric reports") {
  MetricReport m{"fid", 12.5, 64, "abc", "proxy"};
  CHECK_NOTHROW(m.validate());
  CHECK_THROWS_AS((MetricReport{"x", std::nan(""), 1, "", ""}.validate()), ArgumentError);
  CHECK_THROWS_AS((MetricReport{"x", 1.0, 0, "", ""}.validate()), ArgumentError);

  const auto dir = std::filesystem::temp_directory_path() / "covergen_test_reports";
  std::filesystem::create_directories(dir);
  write_metrics_json(dir / "m.json", {m});
  const auto back = read_metrics_json(dir / "m.json");
  REQUIRE(back.size() == 1);
  CHECK(back[0].name == "fid");
  CHECK(back[0].value == 12.5);
  CHECK(back[0].n == 64);
  CHECK(back[0].label == "proxy");
  CHECK_THROWS_AS(write_metrics_json(dir / "bad.json", {MetricReport{"x", INFINITY, 1, "", ""}}), ArgumentError);

  Table t{"Quality", {"FID", "SSIM"}, {{"full", {1.0, 0.5}}, {"base", {2.0, 0.25}}}, 2};
  const auto md = t.to_markdown();
  CHECK(md.find("| full | 1.00 | 0.50 |") != std::string::npos);
  CHECK(t.to_csv().find("base,2,0.25") != std::string::npos);
  std::filesystem::remove_all(dir);
}
