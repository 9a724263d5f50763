// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/world/render.hpp"
#include "covergen/world/style.hpp"
#include "covergen/world/vocab.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace covergen::world {

struct ItemRecord {
  int64_t item_id = 0;
  TokenSeq title;  // title_tokens(style)
  StyleVector style;
  torch::Tensor ref_image;  // render_cover(style, item_id)
};

struct UserProfile {
  int64_t user_id = 0;
  // Categorical attributes visible to models: age_band, genre_affinity,
  // subject_affinity, tone, format.
  std::map<std::string, int> attributes;
  // Hidden unit-norm taste over featurize_style's space. Oracle use only.
  std::vector<double> taste;
};

struct Interaction {
  int64_t user_id = 0;
  int64_t item_id = 0;
  double relevance = 0.0;
  int64_t timestamp = 0;
};

// "genre:<g> subject:<s> hue:<coarse bucket>"
TokenSeq title_tokens(const StyleVector& style);
// Template caption describing the rendered cover in more detail than the
// title: genre, subject, layout, fine tint bucket and tone.
TokenSeq caption_tokens(const StyleVector& style);
// Verbalised visible profile: "user age:<a> likes genre:<g> subject:<s> tone:<t> layout:<l>".
TokenSeq profile_tokens(const UserProfile& user);

// Attribute names in the canonical order used by profile_tokens and encoders,
// with the number of categories of each.
const std::vector<std::pair<std::string, int>>& attribute_schema();

ItemRecord make_item(int64_t item_id, const StyleVector& style);

// Uniform over categorical blocks and continuous ranges. Deterministic in seed.
// Item ids are `first_id .. first_id + n - 1`.
std::vector<ItemRecord> sample_catalog(int64_t n_items, uint64_t seed, int64_t first_id = 0);

// Tastes uniform on the unit sphere; attributes are derived from the taste
// (preferred hue quadrant → age band, argmax genre/subject/layout, preferred
// brightness → tone).
std::vector<UserProfile> sample_users(int64_t n_users, uint64_t seed);
UserProfile make_user(int64_t user_id, std::vector<double> taste);

// taste · featurize_style(style). Throws ConfigError on a dimension mismatch.
double oracle_utility(const UserProfile& user, const StyleVector& style);
double oracle_utility(const std::vector<double>& taste, const StyleVector& style);

// The style maximising taste · φ(style).
StyleVector oracle_best_style(const std::vector<double>& taste);

struct InteractionConfig {
  int64_t per_user = 20;
  double noise_sigma = 0.1;
  // Items are exposed with Gumbel-top-k over utility / selection_temperature,
  // so interacted items lean toward the user's taste. <= 0 means uniform.
  double selection_temperature = 0.15;
};

// For each user: draw per_user distinct items, relevance = utility + N(0, σ²),
// distinct timestamps 0..per_user-1 in random order.
std::vector<Interaction> simulate_interactions(const std::vector<UserProfile>& users,
                                               const std::vector<ItemRecord>& items,
                                               const InteractionConfig& config, uint64_t seed);

// Per user, the earliest floor(fraction * n) interactions by timestamp go to
// `history`, the rest to `future`.
struct TimeSplit {
  std::vector<Interaction> history;
  std::vector<Interaction> future;
};
TimeSplit split_by_time(const std::vector<Interaction>& interactions, double fraction);

// Convenience lookups.
std::map<int64_t, std::vector<Interaction>> group_by_user(const std::vector<Interaction>& interactions);
const ItemRecord& find_item(const std::vector<ItemRecord>& items, int64_t item_id);

// Dataset manifest: JSON Lines files plus PNG covers.
//   items.jsonl         {item_id, title, style, image_path}
//   users.jsonl         {user_id, attributes}
//   interactions.jsonl  {user_id, item_id, relevance, timestamp}
//   oracle.jsonl        {user_id, taste}    (verification only)
void write_dataset(const std::filesystem::path& dir, const std::vector<ItemRecord>& items,
                   const std::vector<UserProfile>& users, const std::vector<Interaction>& interactions);

struct Dataset {
  std::vector<ItemRecord> items;
  std::vector<UserProfile> users;
  std::vector<Interaction> interactions;
};
// Reads the manifest back; images come from the PNG files. Missing oracle.jsonl
// leaves tastes empty (external data has no oracle).
Dataset read_dataset(const std::filesystem::path& dir);

// Stacks ref images into [B, 3, H, W].
torch::Tensor stack_images(const std::vector<ItemRecord>& items);

}  // namespace covergen::world
