// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ATen/core/Generator.h>

#include <cstdint>
#include <random>
#include <string_view>

namespace covergen {

// Derives an independent 64-bit seed for a named stream (splitmix64 over an
// FNV-1a hash of the stream name mixed with the base seed).
uint64_t derive_seed(uint64_t base, std::string_view stream);

std::mt19937_64 make_engine(uint64_t base, std::string_view stream);

// Explicit CPU generator so tensor sampling never touches global RNG state.
at::Generator make_generator(uint64_t seed);

}  // namespace covergen
