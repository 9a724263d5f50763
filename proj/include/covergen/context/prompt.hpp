// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "covergen/world/world.hpp"

namespace covergen::context {

// Template prompt: "draw cover <title tokens> with layout:<l>". Deliberately
// coarser than the caption (no fine tint, no tone); those details reach the
// generator only through the context embedding.
world::TokenSeq generate_explicit_prompt(const world::ItemRecord& item);

}  // namespace covergen::context
