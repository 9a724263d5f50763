// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "covergen/common/errors.hpp"
#include "covergen/embedder/embedder.hpp"
#include "covergen/world/world.hpp"

#include <cmath>
#include <filesystem>

using namespace covergen;
using namespace covergen::embedder;

namespace {

std::vector<TrainingPair> pairs_for(const std::vector<world::ItemRecord>& items) {
  std::vector<TrainingPair> pairs;
  for (const auto& it : items) pairs.push_back({it.ref_image, world::caption_tokens(it.style)});
  return pairs;
}

const TrainResult& trained() {
  static const TrainResult result = [] {
    TrainOptions opt;
    opt.epochs = 20;
    opt.seed = 7;
    return train_joint_embedder(pairs_for(world::sample_catalog(2000, 101)), EmbedderConfig{}, opt);
  }();
  return result;
}

}  // namespace

TEST_CASE("contrastive loss at random init is close to ln B") {
  torch::manual_seed(3);
  JointEmbedder model(EmbedderConfig{});
  const auto items = world::sample_catalog(64, 5);
  std::vector<world::TokenSeq> texts;
  for (const auto& it : items) texts.push_back(world::caption_tokens(it.style));
  torch::NoGradGuard guard;
  const double loss = info_nce_loss(model->image(world::stack_images(items)), model->text(world::pad_batch(texts)), 0.1)
                          .item<double>();
  CHECK(std::abs(loss - std::log(64.0)) < 0.1 * std::log(64.0));
}

TEST_CASE("contrastive training rejects batches without negatives") {
  const auto pairs = pairs_for(world::sample_catalog(8, 1));
  TrainOptions opt;
  opt.batch = 1;
  CHECK_THROWS_AS(train_joint_embedder(pairs, EmbedderConfig{}, opt), ArgumentError);
  CHECK_THROWS_AS(info_nce_loss(torch::ones({1, 4}), torch::ones({1, 4}), 0.1), ArgumentError);
}

TEST_CASE("training halves the contrastive loss") {
  const auto& r = trained();
  MESSAGE("initial " << r.initial_loss << " final " << r.epoch_loss.back());
  CHECK(r.epoch_loss.back() < 0.5 * r.initial_loss);
}

TEST_CASE("embeddings are deterministic and unit norm") {
  const auto& emb = trained().embedder;
  const auto items = world::sample_catalog(10, 77);
  torch::NoGradGuard guard;
  for (const auto& it : items) {
    auto a = emb.embed_image(it.ref_image);
    CHECK(torch::equal(a, emb.embed_image(it.ref_image.clone())));
    CHECK(std::abs(a.norm().item<double>() - 1.0) < 1e-6);
    auto t = emb.embed_text(it.title);
    CHECK(torch::equal(t, emb.embed_text(it.title)));
    CHECK(std::abs(t.norm().item<double>() - 1.0) < 1e-6);
  }
}

TEST_CASE("held-out matched pairs beat mismatched ones") {
  const auto& emb = trained().embedder;
  const auto items = world::sample_catalog(200, 999, 50000);
  torch::NoGradGuard guard;
  const auto img = emb.embed_images(world::stack_images(items));
  std::vector<world::TokenSeq> captions, titles;
  for (const auto& it : items) {
    captions.push_back(world::caption_tokens(it.style));
    titles.push_back(it.title);
  }
  const auto cap = emb.embed_texts(world::pad_batch(captions));
  const auto tit = emb.embed_texts(world::pad_batch(titles));
  const int64_t n = static_cast<int64_t>(items.size());
  int caption_wins = 0, title_wins = 0;
  for (int64_t i = 0; i < n; ++i) {
    const int64_t j = (i * 37 + 11) % n == i ? (i + 1) % n : (i * 37 + 11) % n;
    caption_wins += (img[i].dot(cap[i]) > img[j].dot(cap[i])).item<bool>();
    title_wins += (img[i].dot(tit[i]) > img[j].dot(tit[i])).item<bool>();
  }
  MESSAGE("caption win rate " << caption_wins / double(n) << ", title win rate " << title_wins / double(n));
  CHECK(caption_wins >= 0.9 * n);
  CHECK(title_wins > 0.5 * n);
}

TEST_CASE("frozen embedder passes gradients to inputs but never changes") {
  const auto& emb = trained().embedder;
  const auto digest = emb.digest();
  auto img = world::sample_catalog(1, 3)[0].ref_image.clone().requires_grad_(true);
  auto score = emb.embed_image(img).sum();
  score.backward();
  CHECK(img.grad().abs().sum().item<double>() > 0.0);
  for (const auto& p : emb.model().parameters()) CHECK_FALSE(p.requires_grad());
  CHECK(emb.verify());
  CHECK(emb.digest() == digest);
}

TEST_CASE("checkpoint round-trip preserves the digest") {
  const auto& emb = trained().embedder;
  const auto path = std::filesystem::temp_directory_path() / "covergen_embedder_test.ckpt";
  emb.save(path);
  const auto loaded = FrozenEmbedder::load(path);
  CHECK(loaded.digest() == emb.digest());
  const auto img = world::sample_catalog(1, 8)[0].ref_image;
  torch::NoGradGuard guard;
  CHECK(torch::equal(loaded.embed_image(img), emb.embed_image(img)));
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}
