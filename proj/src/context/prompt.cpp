// SPDX-License-Identifier: Apache-2.0
#include "covergen/context/prompt.hpp"

namespace covergen::context {

world::TokenSeq generate_explicit_prompt(const world::ItemRecord& item) {
  const auto& v = world::Vocabulary::instance();
  world::TokenSeq out = {v.id("draw"), v.id("cover")};
  out.insert(out.end(), item.title.begin(), item.title.end());
  out.push_back(v.id("with"));
  out.push_back(v.id("layout:" + std::string(world::kLayoutNames[item.style.layout])));
  return out;
}

}  // namespace covergen::context
