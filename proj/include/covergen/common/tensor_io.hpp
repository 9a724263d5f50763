// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace covergen {

// Ordered list of named arrays. Order is significant for digests.
using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

// Parameters followed by buffers, names prefixed with `prefix`.
NamedTensors collect_tensors(const torch::nn::Module& module, const std::string& prefix = "");

// Copies values from `source` into the module's parameters/buffers of the same
// (prefixed) name. Every module tensor must be present with a matching shape.
void assign_tensors(torch::nn::Module& module, const NamedTensors& source, const std::string& prefix = "");

// Hex SHA-256 over (name, shape, float32 little-endian payload) of each array.
std::string digest_tensors(const NamedTensors& tensors);
std::string digest_module(const torch::nn::Module& module);
std::string digest_file(const std::filesystem::path& path);
std::string digest_bytes(const std::string& bytes);

// Checkpoint binary layout (all integers little-endian):
//
//   magic   8 bytes  "CVGNCKPT"
//   version u32      = 1
//   count   u32      number of arrays
//   per array:
//     name_len u32, name bytes (UTF-8, no terminator)
//     ndim     u32, dims i64[ndim]
//     payload  f32[prod(dims)]
//
// Alongside `<path>` a JSON sidecar `<path>.json` records the format tag,
// hyperparameters, array names, the tensor digest, and a `source` field
// ("native"; other values are reserved for imported weights).
inline constexpr char kCheckpointMagic[9] = "CVGNCKPT";
inline constexpr uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors,
                      const nlohmann::json& hyperparameters);
NamedTensors read_checkpoint(const std::filesystem::path& path);
nlohmann::json read_sidecar(const std::filesystem::path& path);

}  // namespace covergen
