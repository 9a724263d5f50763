// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/world/style.hpp"

#include <torch/torch.h>

#include <cstdint>

namespace covergen::world {

// [3, kImageSize, kImageSize] float32 in [0, 1].
//
// Layout of a cover: a four-row genre banner across the top, a background
// filled with HSV(palette_hue, 0.7, brightness), and a subject glyph in the
// complementary hue placed according to `layout`. The seed only jitters the
// glyph position by at most one pixel, so identical (style, seed) pairs give
// bit-identical images.
torch::Tensor render_cover(const StyleVector& style, uint64_t seed);

inline constexpr int kBannerRows = 4;

// Glyph coverage mask ([H, W] bool) for the given style and seed; exposed for tests.
torch::Tensor glyph_mask(const StyleVector& style, uint64_t seed);

std::array<float, 3> hsv_to_rgb(double h, double s, double v);

}  // namespace covergen::world
