// SPDX-License-Identifier: Apache-2.0
#include "covergen/world/style.hpp"

#include "covergen/common/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace covergen::world {

void StyleVector::validate() const {
  if (genre < 0 || genre >= kGenres) throw ArgumentError("genre index out of range: " + std::to_string(genre));
  if (subject < 0 || subject >= kSubjects) throw ArgumentError("subject index out of range: " + std::to_string(subject));
  if (layout < 0 || layout >= kLayouts) throw ArgumentError("layout index out of range: " + std::to_string(layout));
  if (!(palette_hue >= 0.0 && palette_hue < 1.0)) throw ArgumentError("palette_hue must lie in [0, 1)");
  if (!(brightness >= 0.0 && brightness <= 1.0)) throw ArgumentError("brightness must lie in [0, 1]");
}

std::array<double, kGenres> StyleVector::genre_one_hot() const {
  std::array<double, kGenres> v{};
  v[genre] = 1.0;
  return v;
}

std::array<double, kSubjects> StyleVector::subject_one_hot() const {
  std::array<double, kSubjects> v{};
  v[subject] = 1.0;
  return v;
}

std::array<double, kLayouts> StyleVector::layout_one_hot() const {
  std::array<double, kLayouts> v{};
  v[layout] = 1.0;
  return v;
}

int StyleVector::hue_bucket() const { return std::min(kHueBuckets - 1, static_cast<int>(palette_hue * kHueBuckets)); }
int StyleVector::tint_bucket() const { return std::min(kTintBuckets - 1, static_cast<int>(palette_hue * kTintBuckets)); }
int StyleVector::tone_bucket() const { return std::min(kToneBuckets - 1, static_cast<int>(brightness * kToneBuckets)); }

std::vector<double> featurize_style(const StyleVector& style) {
  style.validate();
  std::vector<double> phi(kFeatureDim, 0.0);
  phi[FeatureLayout::genre + style.genre] = 1.0;
  phi[FeatureLayout::subject + style.subject] = 1.0;
  phi[FeatureLayout::layout + style.layout] = 1.0;
  const double hue_angle = 2.0 * std::numbers::pi * style.palette_hue;
  phi[FeatureLayout::hue] = std::cos(hue_angle);
  phi[FeatureLayout::hue + 1] = std::sin(hue_angle);
  const double light_angle = std::numbers::pi * style.brightness;
  phi[FeatureLayout::brightness] = std::cos(light_angle);
  phi[FeatureLayout::brightness + 1] = std::sin(light_angle);
  double norm = 0.0;
  for (double x : phi) norm += x * x;
  norm = std::sqrt(norm);
  for (double& x : phi) x /= norm;
  return phi;
}

}  // namespace covergen::world
