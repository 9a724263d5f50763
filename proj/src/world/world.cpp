// SPDX-License-Identifier: Apache-2.0
#include "covergen/world/world.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/png_io.hpp"
#include "covergen/common/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace covergen::world {
namespace {

std::string tok(std::string_view prefix, std::string_view value) { return std::string(prefix) + std::string(value); }

template <size_t N>
int argmax_block(const std::vector<double>& v, int offset) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(N); ++i) {
    if (v[offset + i] > v[offset + best]) best = i;
  }
  return best;
}

nlohmann::json style_to_json(const StyleVector& s) {
  return {{"genre", s.genre},
          {"palette_hue", s.palette_hue},
          {"subject", s.subject},
          {"layout", s.layout},
          {"brightness", s.brightness}};
}

StyleVector style_from_json(const nlohmann::json& j) {
  StyleVector s;
  s.genre = j.at("genre").get<int>();
  s.palette_hue = j.at("palette_hue").get<double>();
  s.subject = j.at("subject").get<int>();
  s.layout = j.at("layout").get<int>();
  s.brightness = j.at("brightness").get<double>();
  s.validate();
  return s;
}

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

}  // namespace

TokenSeq title_tokens(const StyleVector& style) {
  const auto& v = Vocabulary::instance();
  return v.encode({tok("genre:", kGenreNames[style.genre]), tok("subject:", kSubjectNames[style.subject]),
                   "hue:" + std::to_string(style.hue_bucket())});
}

TokenSeq caption_tokens(const StyleVector& style) {
  const auto& v = Vocabulary::instance();
  return v.encode({"cover", tok("genre:", kGenreNames[style.genre]), tok("subject:", kSubjectNames[style.subject]),
                   tok("layout:", kLayoutNames[style.layout]), "tint:" + std::to_string(style.tint_bucket()),
                   tok("tone:", kToneNames[style.tone_bucket()])});
}

const std::vector<std::pair<std::string, int>>& attribute_schema() {
  static const std::vector<std::pair<std::string, int>> schema = {{"age_band", kAgeBands},
                                                                  {"genre_affinity", kGenres},
                                                                  {"subject_affinity", kSubjects},
                                                                  {"tone", kToneBuckets},
                                                                  {"format", kLayouts}};
  return schema;
}

TokenSeq profile_tokens(const UserProfile& user) {
  const auto& v = Vocabulary::instance();
  const auto& a = user.attributes;
  return v.encode({"user", "age:" + std::to_string(a.at("age_band")), "likes",
                   tok("genre:", kGenreNames[a.at("genre_affinity")]),
                   tok("subject:", kSubjectNames[a.at("subject_affinity")]), tok("tone:", kToneNames[a.at("tone")]),
                   tok("layout:", kLayoutNames[a.at("format")])});
}

ItemRecord make_item(int64_t item_id, const StyleVector& style) {
  style.validate();
  return ItemRecord{item_id, title_tokens(style), style, render_cover(style, static_cast<uint64_t>(item_id))};
}

std::vector<ItemRecord> sample_catalog(int64_t n_items, uint64_t seed, int64_t first_id) {
  if (n_items <= 0) throw ArgumentError("sample_catalog: n_items must be positive");
  auto rng = make_engine(seed, "catalog");
  std::uniform_int_distribution<int> genre(0, kGenres - 1), subject(0, kSubjects - 1), layout(0, kLayouts - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<ItemRecord> items;
  items.reserve(static_cast<size_t>(n_items));
  for (int64_t i = 0; i < n_items; ++i) {
    StyleVector s;
    s.genre = genre(rng);
    s.subject = subject(rng);
    s.layout = layout(rng);
    s.palette_hue = unit(rng);
    s.brightness = unit(rng);
    items.push_back(make_item(first_id + i, s));
  }
  return items;
}

UserProfile make_user(int64_t user_id, std::vector<double> taste) {
  if (static_cast<int>(taste.size()) != kFeatureDim) throw ConfigError("taste dimension mismatch");
  UserProfile u;
  u.user_id = user_id;
  const double hue_angle = std::atan2(taste[FeatureLayout::hue + 1], taste[FeatureLayout::hue]);
  const double turn = (hue_angle < 0 ? hue_angle + 2 * std::numbers::pi : hue_angle) / (2 * std::numbers::pi);
  u.attributes["age_band"] = std::min(kAgeBands - 1, static_cast<int>(turn * kAgeBands));
  u.attributes["genre_affinity"] = argmax_block<kGenres>(taste, FeatureLayout::genre);
  u.attributes["subject_affinity"] = argmax_block<kSubjects>(taste, FeatureLayout::subject);
  u.attributes["format"] = argmax_block<kLayouts>(taste, FeatureLayout::layout);
  // Preferred brightness: the angle of the brightness components, clipped to [0, π].
  double light = std::atan2(taste[FeatureLayout::brightness + 1], taste[FeatureLayout::brightness]);
  if (light < 0) light = taste[FeatureLayout::brightness] >= 0 ? 0.0 : std::numbers::pi;
  u.attributes["tone"] = std::min(kToneBuckets - 1, static_cast<int>(light / std::numbers::pi * kToneBuckets));
  u.taste = std::move(taste);
  return u;
}

StyleVector oracle_best_style(const std::vector<double>& taste) {
  if (static_cast<int>(taste.size()) != kFeatureDim) throw ConfigError("taste dimension mismatch");
  StyleVector s;
  s.genre = argmax_block<kGenres>(taste, FeatureLayout::genre);
  s.subject = argmax_block<kSubjects>(taste, FeatureLayout::subject);
  s.layout = argmax_block<kLayouts>(taste, FeatureLayout::layout);
  const double hue_angle = std::atan2(taste[FeatureLayout::hue + 1], taste[FeatureLayout::hue]);
  s.palette_hue = (hue_angle < 0 ? hue_angle + 2 * std::numbers::pi : hue_angle) / (2 * std::numbers::pi);
  if (s.palette_hue >= 1.0) s.palette_hue = 0.0;
  double light = std::atan2(taste[FeatureLayout::brightness + 1], taste[FeatureLayout::brightness]);
  if (light < 0) light = taste[FeatureLayout::brightness] >= 0 ? 0.0 : std::numbers::pi;
  s.brightness = light / std::numbers::pi;
  return s;
}

std::vector<UserProfile> sample_users(int64_t n_users, uint64_t seed) {
  if (n_users <= 0) throw ArgumentError("sample_users: n_users must be positive");
  auto rng = make_engine(seed, "users");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<UserProfile> users;
  users.reserve(static_cast<size_t>(n_users));
  for (int64_t u = 0; u < n_users; ++u) {
    std::vector<double> taste(kFeatureDim);
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& x : taste) {
        x = normal(rng);
        norm += x * x;
      }
    } while (norm < 1e-12);
    norm = std::sqrt(norm);
    for (double& x : taste) x /= norm;
    users.push_back(make_user(u, std::move(taste)));
  }
  return users;
}

double oracle_utility(const std::vector<double>& taste, const StyleVector& style) {
  const auto phi = featurize_style(style);
  if (taste.size() != phi.size()) {
    throw ConfigError("oracle_utility: taste has dimension " + std::to_string(taste.size()) + ", features have " +
                      std::to_string(phi.size()));
  }
  return std::inner_product(taste.begin(), taste.end(), phi.begin(), 0.0);
}

double oracle_utility(const UserProfile& user, const StyleVector& style) { return oracle_utility(user.taste, style); }

std::vector<Interaction> simulate_interactions(const std::vector<UserProfile>& users,
                                               const std::vector<ItemRecord>& items,
                                               const InteractionConfig& config, uint64_t seed) {
  if (config.per_user <= 0) throw ArgumentError("per_user must be positive");
  if (config.per_user > static_cast<int64_t>(items.size())) throw ArgumentError("per_user exceeds catalog size");
  if (config.noise_sigma < 0) throw ArgumentError("noise_sigma must be non-negative");
  auto rng = make_engine(seed, "interactions");
  std::uniform_real_distribution<double> unit(std::numeric_limits<double>::min(), 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<Interaction> out;
  out.reserve(users.size() * static_cast<size_t>(config.per_user));
  std::vector<std::pair<double, size_t>> keys(items.size());
  std::vector<int64_t> order(static_cast<size_t>(config.per_user));
  for (const auto& user : users) {
    for (size_t i = 0; i < items.size(); ++i) {
      const double gumbel = -std::log(-std::log(unit(rng)));
      const double score = config.selection_temperature > 0
                               ? oracle_utility(user, items[i].style) / config.selection_temperature
                               : 0.0;
      keys[i] = {score + gumbel, i};
    }
    std::partial_sort(keys.begin(), keys.begin() + config.per_user, keys.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (int64_t k = 0; k < config.per_user; ++k) {
      const auto& item = items[keys[static_cast<size_t>(k)].second];
      const double eps = config.noise_sigma > 0 ? config.noise_sigma * noise(rng) : 0.0;
      out.push_back({user.user_id, item.item_id, oracle_utility(user, item.style) + eps, order[static_cast<size_t>(k)]});
    }
  }
  return out;
}

std::map<int64_t, std::vector<Interaction>> group_by_user(const std::vector<Interaction>& interactions) {
  std::map<int64_t, std::vector<Interaction>> by_user;
  for (const auto& it : interactions) by_user[it.user_id].push_back(it);
  return by_user;
}

TimeSplit split_by_time(const std::vector<Interaction>& interactions, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ArgumentError("split fraction must lie in (0, 1]");
  TimeSplit split;
  for (auto& [user, list] : group_by_user(interactions)) {
    std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
      return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.item_id < b.item_id;
    });
    const auto cut = static_cast<size_t>(std::floor(fraction * static_cast<double>(list.size())));
    for (size_t i = 0; i < list.size(); ++i) (i < cut ? split.history : split.future).push_back(list[i]);
  }
  return split;
}

const ItemRecord& find_item(const std::vector<ItemRecord>& items, int64_t item_id) {
  if (item_id >= 0 && item_id < static_cast<int64_t>(items.size()) && items[item_id].item_id == item_id) {
    return items[item_id];
  }
  for (const auto& it : items) {
    if (it.item_id == item_id) return it;
  }
  throw ArgumentError("unknown item id " + std::to_string(item_id));
}

void write_dataset(const std::filesystem::path& dir, const std::vector<ItemRecord>& items,
                   const std::vector<UserProfile>& users, const std::vector<Interaction>& interactions) {
  std::filesystem::create_directories(dir / "images");
  const auto& vocab = Vocabulary::instance();
  {
    std::ofstream out(dir / "items.jsonl");
    for (const auto& it : items) {
      const std::string rel = "images/item_" + std::to_string(it.item_id) + ".png";
      write_png(dir / rel, it.ref_image);
      nlohmann::json j = {{"item_id", it.item_id},
                          {"title", vocab.decode(it.title)},
                          {"style", style_to_json(it.style)},
                          {"image_path", rel}};
      out << j.dump() << "\n";
    }
  }
  {
    std::ofstream out(dir / "users.jsonl");
    std::ofstream oracle(dir / "oracle.jsonl");
    for (const auto& u : users) {
      out << nlohmann::json({{"user_id", u.user_id}, {"attributes", u.attributes}}).dump() << "\n";
      oracle << nlohmann::json({{"user_id", u.user_id}, {"taste", u.taste}}).dump() << "\n";
    }
  }
  {
    std::ofstream out(dir / "interactions.jsonl");
    for (const auto& x : interactions) {
      out << nlohmann::json({{"user_id", x.user_id},
                             {"item_id", x.item_id},
                             {"relevance", x.relevance},
                             {"timestamp", x.timestamp}})
                 .dump()
          << "\n";
    }
  }
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  const auto& vocab = Vocabulary::instance();
  for (const auto& j : read_jsonl(dir / "items.jsonl")) {
    ItemRecord it;
    it.item_id = j.at("item_id").get<int64_t>();
    it.title = vocab.encode(j.at("title").get<std::vector<std::string>>());
    it.style = style_from_json(j.at("style"));
    it.ref_image = read_png(dir / j.at("image_path").get<std::string>());
    ds.items.push_back(std::move(it));
  }
  std::map<int64_t, std::vector<double>> tastes;
  if (std::filesystem::exists(dir / "oracle.jsonl")) {
    for (const auto& j : read_jsonl(dir / "oracle.jsonl")) {
      tastes[j.at("user_id").get<int64_t>()] = j.at("taste").get<std::vector<double>>();
    }
  }
  for (const auto& j : read_jsonl(dir / "users.jsonl")) {
    UserProfile u;
    u.user_id = j.at("user_id").get<int64_t>();
    u.attributes = j.at("attributes").get<std::map<std::string, int>>();
    if (auto it = tastes.find(u.user_id); it != tastes.end()) u.taste = it->second;
    ds.users.push_back(std::move(u));
  }
  for (const auto& j : read_jsonl(dir / "interactions.jsonl")) {
    ds.interactions.push_back({j.at("user_id").get<int64_t>(), j.at("item_id").get<int64_t>(),
                               j.at("relevance").get<double>(), j.at("timestamp").get<int64_t>()});
  }
  return ds;
}

torch::Tensor stack_images(const std::vector<ItemRecord>& items) {
  std::vector<torch::Tensor> imgs;
  imgs.reserve(items.size());
  for (const auto& it : items) imgs.push_back(it.ref_image);
  return torch::stack(imgs);
}

}  // namespace covergen::world
