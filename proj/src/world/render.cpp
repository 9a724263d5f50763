// SPDX-License-Identifier: Apache-2.0
#include "covergen/world/render.hpp"

#include <cmath>

namespace covergen::world {
namespace {

constexpr std::array<std::array<float, 3>, kGenres> kBannerColors = {{
    {1.00f, 0.85f, 0.10f},  // cartoon
    {0.55f, 0.10f, 0.60f},  // drama
    {0.90f, 0.15f, 0.10f},  // action
    {0.10f, 0.60f, 0.30f},  // documentary
}};

struct Placement {
  double cx, cy, r;
};

Placement place(const StyleVector& style, uint64_t seed) {
  uint64_t h = seed * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL;
  h ^= h >> 29;
  const int dx = static_cast<int>(h % 3) - 1;
  const int dy = static_cast<int>((h / 3) % 3) - 1;
  if (style.layout == 0) return {16.0 + dx, 18.0 + dy, 9.0};
  return {10.0 + dx, 23.0 + dy, 6.0};
}

// Shape tests in glyph-normalised coordinates (u right, v down, radius 1).
bool inside(int subject, double u, double v) {
  switch (subject) {
    case 0: {  // cat: round head with two ears
      if (u * u + (v - 0.15) * (v - 0.15) <= 0.6 * 0.6) return true;
      for (double side : {-1.0, 1.0}) {
        const double ex = u - side * 0.38;
        if (v >= -0.95 && v <= -0.2 && std::abs(ex) <= 0.25 * (v + 0.95) / 0.75) return true;
      }
      return false;
    }
    case 1: {  // robot: square body with two eye holes
      if (std::abs(u) > 0.65 || std::abs(v) > 0.65) return false;
      for (double side : {-1.0, 1.0}) {
        if (std::abs(u - side * 0.28) <= 0.13 && std::abs(v + 0.2) <= 0.13) return false;
      }
      return true;
    }
    case 2:  // mountain: triangle with the apex up
      return v <= 0.75 && v >= -0.8 && std::abs(u) <= 0.9 * (v + 0.8) / 1.55;
    case 3:  // person: head and body
      return (u * u + (v + 0.55) * (v + 0.55) <= 0.3 * 0.3) || (std::abs(u) <= 0.32 && v >= -0.2 && v <= 0.9);
    default:  // star: four-pointed astroid
      return std::sqrt(std::abs(u)) + std::sqrt(std::abs(v)) <= 1.0;
  }
}

}  // namespace

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  double r = 0, g = 0, b = 0;
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

torch::Tensor glyph_mask(const StyleVector& style, uint64_t seed) {
  style.validate();
  const Placement pl = place(style, seed);
  auto mask = torch::zeros({kImageSize, kImageSize}, torch::kBool);
  auto acc = mask.accessor<bool, 2>();
  for (int y = kBannerRows; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const double u = (x + 0.5 - pl.cx) / pl.r;
      const double v = (y + 0.5 - pl.cy) / pl.r;
      acc[y][x] = inside(style.subject, u, v);
    }
  }
  return mask;
}

torch::Tensor render_cover(const StyleVector& style, uint64_t seed) {
  style.validate();
  const auto bg = hsv_to_rgb(style.palette_hue, 0.7, style.brightness);
  const auto fg = hsv_to_rgb(style.palette_hue + 0.5, 0.75, 0.95);
  const auto& banner = kBannerColors[style.genre];
  const auto mask = glyph_mask(style, seed);
  const auto macc = mask.accessor<bool, 2>();

  auto img = torch::empty({3, kImageSize, kImageSize}, torch::kFloat32);
  auto acc = img.accessor<float, 3>();
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const auto& color = y < kBannerRows ? banner : (macc[y][x] ? fg : bg);
      for (int c = 0; c < 3; ++c) acc[c][y][x] = color[c];
    }
  }
  return img;
}

}  // namespace covergen::world
