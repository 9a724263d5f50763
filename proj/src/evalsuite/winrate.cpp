// SPDX-License-Identifier: Apache-2.0
#include "covergen/evalsuite/winrate.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/rng.hpp"
#include "covergen/evalsuite/metrics.hpp"
#include "covergen/world/render.hpp"

#include <cmath>
#include <random>

namespace covergen::evalsuite {

StyleCodebook::StyleCodebook(const embedder::FrozenEmbedder& embedder) : embedder_(&embedder) {
  std::vector<torch::Tensor> images;
  for (int g = 0; g < world::kGenres; ++g) {
    for (int s = 0; s < world::kSubjects; ++s) {
      for (int l = 0; l < world::kLayouts; ++l) {
        for (int h = 0; h < kHues; ++h) {
          for (int b = 0; b < kBrightness; ++b) {
            world::StyleVector style;
            style.genre = g;
            style.subject = s;
            style.layout = l;
            style.palette_hue = static_cast<double>(h) / kHues;
            style.brightness = (b + 0.5) / kBrightness;
            styles_.push_back(style);
            images.push_back(world::render_cover(style, 0));
          }
        }
      }
    }
  }
  torch::NoGradGuard guard;
  auto all = torch::stack(images);
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < all.size(0); i += 256) {
    parts.push_back(embedder.embed_images(all.slice(0, i, std::min<int64_t>(i + 256, all.size(0)))));
  }
  auto keys = torch::cat(parts);
  keys_ = keys / keys.norm(2, 1, true).clamp_min(1e-12);
}

std::vector<world::StyleVector> StyleCodebook::decode(const torch::Tensor& images) const {
  torch::NoGradGuard guard;
  auto q = embedder_->embed_images(images);
  q = q / q.norm(2, 1, true).clamp_min(1e-12);
  auto best = q.matmul(keys_.transpose(0, 1)).argmax(1);
  std::vector<world::StyleVector> out;
  out.reserve(static_cast<size_t>(best.size(0)));
  for (int64_t i = 0; i < best.size(0); ++i) out.push_back(styles_[static_cast<size_t>(best[i].item<int64_t>())]);
  return out;
}

WinRate personalization_win_rate(const CoverGenerator& generator, const StyleCodebook& codebook,
                                 const std::vector<world::UserProfile>& users,
                                 const std::vector<world::ItemRecord>& items, int64_t n_trials, uint64_t seed,
                                 int64_t chunk) {
  if (users.size() < 2) throw ArgumentError("win rate needs at least two users");
  if (items.empty()) throw ArgumentError("win rate needs at least one item");
  if (n_trials <= 0) throw ArgumentError("win rate needs a positive trial count");
  for (const auto& u : users) {
    if (u.taste.empty()) throw ArgumentError("win rate needs oracle tastes for every user");
  }
  auto rng = make_engine(seed, "win-rate");
  std::uniform_int_distribution<int64_t> pick_item(0, static_cast<int64_t>(items.size()) - 1);
  std::uniform_int_distribution<int64_t> pick_user(0, static_cast<int64_t>(users.size()) - 1);
  std::vector<int64_t> item_rows, a_rows, b_rows;
  for (int64_t i = 0; i < n_trials; ++i) {
    item_rows.push_back(pick_item(rng));
    const int64_t a = pick_user(rng);
    int64_t b = pick_user(rng);
    while (b == a) b = pick_user(rng);
    a_rows.push_back(a);
    b_rows.push_back(b);
  }

  WinRate result;
  result.n = n_trials;
  for (int64_t start = 0; start < n_trials; start += chunk) {
    const int64_t end = std::min(n_trials, start + chunk);
    std::vector<int64_t> it(item_rows.begin() + start, item_rows.begin() + end);
    std::vector<int64_t> ua(a_rows.begin() + start, a_rows.begin() + end);
    auto covers = generator(it, ua);
    auto styles = codebook.decode(covers);
    for (int64_t i = start; i < end; ++i) {
      const auto& style = styles[static_cast<size_t>(i - start)];
      const double ua_u = world::oracle_utility(users[static_cast<size_t>(a_rows[i])], style);
      const double ub_u = world::oracle_utility(users[static_cast<size_t>(b_rows[i])], style);
      if (ua_u > ub_u) ++result.wins;
    }
  }
  const double n = static_cast<double>(result.n);
  result.rate = static_cast<double>(result.wins) / n;
  result.p_value = binomial_two_sided(result.wins, result.n);
  const double z = 1.959963984540054;
  const double centre = (result.rate + z * z / (2 * n)) / (1 + z * z / n);
  const double half = z / (1 + z * z / n) * std::sqrt(result.rate * (1 - result.rate) / n + z * z / (4 * n * n));
  result.ci_lo = centre - half;
  result.ci_hi = centre + half;
  return result;
}

namespace {

CoverGenerator taste_generator(const std::vector<world::UserProfile>& users, double sign) {
  return [users, sign](const std::vector<int64_t>& item_rows, const std::vector<int64_t>& user_rows) {
    std::vector<torch::Tensor> out;
    for (size_t i = 0; i < user_rows.size(); ++i) {
      auto taste = users[static_cast<size_t>(user_rows[i])].taste;
      for (double& x : taste) x *= sign;
      out.push_back(world::render_cover(world::oracle_best_style(taste), static_cast<uint64_t>(item_rows[i])));
    }
    return torch::stack(out);
  };
}

}  // namespace

CoverGenerator oracle_generator(const std::vector<world::UserProfile>& users) { return taste_generator(users, 1.0); }

CoverGenerator anti_oracle_generator(const std::vector<world::UserProfile>& users) {
  return taste_generator(users, -1.0);
}

CoverGenerator user_free_generator(const std::vector<world::ItemRecord>& items) {
  return [items](const std::vector<int64_t>& item_rows, const std::vector<int64_t>&) {
    std::vector<torch::Tensor> out;
    for (int64_t r : item_rows) out.push_back(items[static_cast<size_t>(r)].ref_image);
    return torch::stack(out);
  };
}

}  // namespace covergen::evalsuite
