// SPDX-License-Identifier: Apache-2.0
#include "covergen/context/transforms.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/common/rng.hpp"

#include <cmath>

namespace covergen::context {

namespace F = torch::nn::functional;

TransformMode parse_transform_mode(const std::string& name) {
  if (name == "mask") return TransformMode::Mask;
  if (name == "blur") return TransformMode::Blur;
  if (name == "crop") return TransformMode::Crop;
  throw ArgumentError("unknown transform mode '" + name + "' (expected mask, blur or crop)");
}

std::string to_string(TransformMode mode) {
  switch (mode) {
    case TransformMode::Mask: return "mask";
    case TransformMode::Blur: return "blur";
    case TransformMode::Crop: return "crop";
  }
  return "?";
}

torch::Tensor gaussian_blur(const torch::Tensor& image, double sigma) {
  if (sigma <= 0) return image.clone();
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  auto offsets = torch::arange(-radius, radius + 1, image.options());
  auto kernel = torch::exp(-offsets * offsets / (2.0 * sigma * sigma));
  kernel = kernel / kernel.sum();
  const auto channels = image.size(0);
  auto x = image.unsqueeze(0);
  // Horizontal then vertical pass, replicate padding.
  x = F::pad(x, F::PadFuncOptions({radius, radius, 0, 0}).mode(torch::kReplicate));
  x = F::conv2d(x, kernel.view({1, 1, 1, -1}).expand({channels, 1, 1, 2 * radius + 1}),
                F::Conv2dFuncOptions().groups(channels));
  x = F::pad(x, F::PadFuncOptions({0, 0, radius, radius}).mode(torch::kReplicate));
  x = F::conv2d(x, kernel.view({1, 1, -1, 1}).expand({channels, 1, 2 * radius + 1, 1}),
                F::Conv2dFuncOptions().groups(channels));
  return x.squeeze(0);
}

torch::Tensor transform_reference(const torch::Tensor& image, TransformMode mode, double strength, uint64_t seed) {
  if (!(strength > 0.0 && strength <= 1.0)) throw ArgumentError("transform strength must lie in (0, 1]");
  const auto h = image.size(1), w = image.size(2);
  auto rng = make_engine(seed, "transform");
  switch (mode) {
    case TransformMode::Mask: {
      const auto area = static_cast<int64_t>(std::floor(strength * static_cast<double>(h * w)));
      auto out = image.clone();
      if (area == 0) return out;
      const int64_t min_w = std::max<int64_t>(1, (area + h - 1) / h);
      const int64_t rect_w = std::uniform_int_distribution<int64_t>(min_w, w)(rng);
      const int64_t rect_h = std::clamp<int64_t>(std::llround(static_cast<double>(area) / rect_w), 1, h);
      const int64_t y0 = std::uniform_int_distribution<int64_t>(0, h - rect_h)(rng);
      const int64_t x0 = std::uniform_int_distribution<int64_t>(0, w - rect_w)(rng);
      out.slice(1, y0, y0 + rect_h).slice(2, x0, x0 + rect_w).zero_();
      return out;
    }
    case TransformMode::Blur:
      return gaussian_blur(image, 3.0 * strength);
    case TransformMode::Crop: {
      const double scale = 1.0 - strength / 2.0;
      const int64_t ch = std::max<int64_t>(1, std::llround(scale * static_cast<double>(h)));
      const int64_t cw = std::max<int64_t>(1, std::llround(scale * static_cast<double>(w)));
      const int64_t y0 = std::uniform_int_distribution<int64_t>(0, h - ch)(rng);
      const int64_t x0 = std::uniform_int_distribution<int64_t>(0, w - cw)(rng);
      auto window = image.slice(1, y0, y0 + ch).slice(2, x0, x0 + cw).unsqueeze(0);
      return F::interpolate(window, F::InterpolateFuncOptions()
                                        .size(std::vector<int64_t>{h, w})
                                        .mode(torch::kBilinear)
                                        .align_corners(false))
          .squeeze(0);
    }
  }
  throw ArgumentError("unknown transform mode");
}

}  // namespace covergen::context
