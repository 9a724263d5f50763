// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/embedder/embedder.hpp"
#include "covergen/world/world.hpp"

#include <torch/torch.h>

#include <functional>
#include <vector>

namespace covergen::evalsuite {

// Nearest-neighbour style decoder in embedder space. The codebook renders
// every discrete (genre, subject, layout) combination at 12 hues and 5
// brightness levels and keeps the unit-norm image embeddings.
class StyleCodebook {
 public:
  static constexpr int kHues = 12;
  static constexpr int kBrightness = 5;

  explicit StyleCodebook(const embedder::FrozenEmbedder& embedder);

  // Decodes each image of [B,3,H,W] to the codebook style with the highest cosine.
  std::vector<world::StyleVector> decode(const torch::Tensor& images) const;

  const std::vector<world::StyleVector>& styles() const { return styles_; }

 private:
  const embedder::FrozenEmbedder* embedder_;
  std::vector<world::StyleVector> styles_;
  torch::Tensor keys_;  // [K, d], unit rows
};

// Produces one cover per (item, user) pair, indexing the vectors handed to
// personalization_win_rate. Returns [B,3,H,W] in [0,1].
using CoverGenerator =
    std::function<torch::Tensor(const std::vector<int64_t>& item_rows, const std::vector<int64_t>& user_rows)>;

struct WinRate {
  int64_t wins = 0;
  int64_t n = 0;
  double rate = 0.0;
  double p_value = 1.0;  // two-sided binomial against 0.5
  double ci_lo = 0.0, ci_hi = 1.0;  // 95% Wilson interval
};

// Trial i draws an item and two distinct users a, b; the cover generated for
// (item, a) is decoded to a style and wins when a's oracle utility for it
// exceeds b's. Users must carry oracle tastes. ArgumentError for < 2 users.
WinRate personalization_win_rate(const CoverGenerator& generator, const StyleCodebook& codebook,
                                 const std::vector<world::UserProfile>& users,
                                 const std::vector<world::ItemRecord>& items, int64_t n_trials, uint64_t seed,
                                 int64_t chunk = 100);

// Harness calibration generators.
CoverGenerator oracle_generator(const std::vector<world::UserProfile>& users);
CoverGenerator anti_oracle_generator(const std::vector<world::UserProfile>& users);
// Returns the item's reference cover regardless of the user.
CoverGenerator user_free_generator(const std::vector<world::ItemRecord>& items);

}  // namespace covergen::evalsuite
