// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>

namespace covergen {

// 8-bit RGB PNG encode/decode of a [3, H, W] float image in [0, 1].
// Encoding writes no time or text chunks, so payloads are reproducible.
std::string encode_png(const torch::Tensor& image);
void write_png(const std::filesystem::path& path, const torch::Tensor& image);
torch::Tensor read_png(const std::filesystem::path& path);

}  // namespace covergen
