// SPDX-License-Identifier: Apache-2.0
#include "covergen/evalsuite/metrics.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/rewards/proxies.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace covergen::evalsuite {

namespace F = torch::nn::functional;

namespace {

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

torch::Tensor psd_sqrt(const torch::Tensor& m) {
  auto sym = (m + m.transpose(0, 1)) * 0.5;
  auto [vals, vecs] = torch::linalg_eigh(sym);
  return vecs.matmul(torch::diag(vals.clamp_min(0.0).sqrt())).matmul(vecs.transpose(0, 1));
}

}  // namespace

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw ArgumentError("ssim needs equal shapes");
  const double c1 = 1e-4, c2 = 9e-4;
  auto x = as_batch(a).to(torch::kDouble);
  auto y = as_batch(b).to(torch::kDouble);
  if (x.size(2) < 8 || x.size(3) < 8) throw ArgumentError("ssim needs images of at least 8x8");
  auto pool = [](const torch::Tensor& t) { return F::avg_pool2d(t, F::AvgPool2dFuncOptions(8).stride(1)); };
  auto mx = pool(x), my = pool(y);
  auto vx = pool(x * x) - mx * mx;
  auto vy = pool(y * y) - my * my;
  auto cxy = pool(x * y) - mx * my;
  auto num = (2 * mx * my + c1) * (2 * cxy + c2);
  auto den = (mx * mx + my * my + c1) * (vx + vy + c2);
  return (num / den).mean().item<double>();
}

double frechet_distance(const torch::Tensor& mu1, const torch::Tensor& sigma1, const torch::Tensor& mu2,
                        const torch::Tensor& sigma2) {
  auto m1 = mu1.to(torch::kDouble), m2 = mu2.to(torch::kDouble);
  auto s1 = sigma1.to(torch::kDouble), s2 = sigma2.to(torch::kDouble);
  if (m1.sizes() != m2.sizes() || s1.sizes() != s2.sizes()) throw ArgumentError("Fréchet distance shape mismatch");
  auto r1 = psd_sqrt(s1);
  auto cross = psd_sqrt(r1.matmul(s2).matmul(r1));
  const double mean_term = (m1 - m2).pow(2).sum().item<double>();
  const double trace = (s1.trace() + s2.trace() - 2.0 * cross.trace()).item<double>();
  return std::max(0.0, mean_term + trace);
}

double fid_features(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.size(0) == 0 || b.size(0) == 0) throw ArgumentError("FID of an empty set");
  auto stats = [](const torch::Tensor& f) {
    auto x = f.to(torch::kDouble);
    const auto n = x.size(0), d = x.size(1);
    auto mu = x.mean(0);
    auto c = x - mu;
    auto cov = n > 1 ? c.transpose(0, 1).matmul(c) / static_cast<double>(n - 1) : torch::zeros({d, d}, torch::kDouble);
    if (n <= d) {
      const double w = static_cast<double>(d) / static_cast<double>(n + d);
      auto target = torch::eye(d, torch::kDouble) * (cov.trace() / static_cast<double>(d));
      cov = (1 - w) * cov + w * target;
    }
    return std::make_pair(mu, cov);
  };
  auto [m1, s1] = stats(a);
  auto [m2, s2] = stats(b);
  return frechet_distance(m1, s1, m2, s2);
}

double fid(const embedder::FrozenEmbedder& embedder, const torch::Tensor& images_a, const torch::Tensor& images_b) {
  torch::NoGradGuard guard;
  if (images_a.size(0) == 0 || images_b.size(0) == 0) throw ArgumentError("FID of an empty set");
  return fid_features(embedder.embed_images(images_a), embedder.embed_images(images_b));
}

torch::Tensor perceptual_distance(const embedder::FrozenEmbedder& embedder, const torch::Tensor& a,
                                  const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw ArgumentError("perceptual distance needs equal shapes");
  auto fa = embedder.image_features(as_batch(a));
  auto fb = embedder.image_features(as_batch(b));
  torch::Tensor total;
  for (size_t l = 0; l < fa.size(); ++l) {
    auto na = fa[l] / (fa[l].pow(2).sum(1, true).sqrt() + 1e-10);
    auto nb = fb[l] / (fb[l].pow(2).sum(1, true).sqrt() + 1e-10);
    auto d = (na - nb).pow(2).sum(1).mean({1, 2});
    total = total.defined() ? total + d : d;
  }
  return total / static_cast<double>(fa.size());
}

double aesthetic_eval(const torch::Tensor& images) {
  if (images.numel() == 0 || (images.dim() == 4 && images.size(0) == 0)) {
    throw ArgumentError("aesthetic_eval of an empty set");
  }
  torch::NoGradGuard guard;
  return rewards::aesthetic_reward(as_batch(images)).mean().item<double>();
}

double recall_at_k(const std::vector<int64_t>& ranked, const std::vector<int64_t>& relevant, int64_t k) {
  if (relevant.empty()) throw ArgumentError("recall needs at least one relevant item");
  const std::set<int64_t> rel(relevant.begin(), relevant.end());
  int64_t hits = 0;
  for (int64_t i = 0; i < std::min<int64_t>(k, ranked.size()); ++i) hits += rel.count(ranked[i]);
  return static_cast<double>(hits) / static_cast<double>(rel.size());
}

double ndcg_at_k(const std::vector<int64_t>& ranked, const std::vector<int64_t>& relevant, int64_t k) {
  if (relevant.empty()) throw ArgumentError("NDCG needs at least one relevant item");
  const std::set<int64_t> rel(relevant.begin(), relevant.end());
  double dcg = 0.0, idcg = 0.0;
  for (int64_t i = 0; i < std::min<int64_t>(k, ranked.size()); ++i) {
    if (rel.count(ranked[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  for (int64_t i = 0; i < std::min<int64_t>(k, rel.size()); ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

double binomial_two_sided(int64_t successes, int64_t trials) {
  if (trials <= 0 || successes < 0 || successes > trials) throw ArgumentError("invalid binomial outcome");
  auto log_pmf = [trials](int64_t k) {
    return std::lgamma(trials + 1.0) - std::lgamma(k + 1.0) - std::lgamma(trials - k + 1.0) -
           static_cast<double>(trials) * std::log(2.0);
  };
  const double observed = log_pmf(successes);
  double p = 0.0;
  for (int64_t k = 0; k <= trials; ++k) {
    const double lp = log_pmf(k);
    if (lp <= observed + 1e-9) p += std::exp(lp);
  }
  return std::min(1.0, p);
}

}  // namespace covergen::evalsuite
