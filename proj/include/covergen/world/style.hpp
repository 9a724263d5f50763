// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string_view>
#include <vector>

namespace covergen::world {

inline constexpr int kGenres = 4;
inline constexpr int kSubjects = 5;
inline constexpr int kLayouts = 2;
inline constexpr int kImageSize = 32;

inline constexpr std::array<std::string_view, kGenres> kGenreNames = {"cartoon", "drama", "action", "documentary"};
inline constexpr std::array<std::string_view, kSubjects> kSubjectNames = {"cat", "robot", "mountain", "person", "star"};
inline constexpr std::array<std::string_view, kLayouts> kLayoutNames = {"center", "corner"};

// Coarse hue buckets appear in titles and prompts; fine buckets in captions.
inline constexpr int kHueBuckets = 4;
inline constexpr int kTintBuckets = 8;
inline constexpr int kToneBuckets = 3;
inline constexpr std::array<std::string_view, kToneBuckets> kToneNames = {"dark", "mid", "light"};
inline constexpr int kAgeBands = 4;

// Content semantics of one cover. Categorical blocks are stored as class
// indices; their one-hot views always sum to exactly one.
struct StyleVector {
  int genre = 0;
  double palette_hue = 0.0;  // [0, 1)
  int subject = 0;
  int layout = 0;
  double brightness = 1.0;  // [0, 1]

  bool operator==(const StyleVector&) const = default;

  // Throws ArgumentError when any field is out of range.
  void validate() const;

  std::array<double, kGenres> genre_one_hot() const;
  std::array<double, kSubjects> subject_one_hot() const;
  std::array<double, kLayouts> layout_one_hot() const;

  int hue_bucket() const;   // in [0, kHueBuckets)
  int tint_bucket() const;  // in [0, kTintBuckets)
  int tone_bucket() const;  // in [0, kToneBuckets)
};

// Oracle feature map: [genre | subject | layout | cos 2πh, sin 2πh | cos πb, sin πb] / sqrt(5).
// Every block has unit norm, so the result is unit-norm for every style.
inline constexpr int kFeatureDim = kGenres + kSubjects + kLayouts + 4;
std::vector<double> featurize_style(const StyleVector& style);

// Offsets of the feature blocks inside featurize_style's output.
struct FeatureLayout {
  static constexpr int genre = 0;
  static constexpr int subject = kGenres;
  static constexpr int layout = kGenres + kSubjects;
  static constexpr int hue = kGenres + kSubjects + kLayouts;
  static constexpr int brightness = hue + 2;
};

}  // namespace covergen::world
