// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace covergen::world {

using TokenSeq = std::vector<int64_t>;

// The closed token vocabulary shared by titles, captions, prompts and user
// profiles. Id 0 is padding, id 1 the empty-prompt token.
class Vocabulary {
 public:
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kNull = 1;

  static const Vocabulary& instance();

  int64_t size() const { return static_cast<int64_t>(tokens_.size()); }
  int64_t id(std::string_view token) const;  // throws ArgumentError if unknown
  bool contains(std::string_view token) const;
  const std::string& token(int64_t id) const;

  TokenSeq encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const TokenSeq& ids) const;
  std::string join(const TokenSeq& ids) const;

  // One token per line, in id order.
  void save(const std::filesystem::path& path) const;

 private:
  Vocabulary();
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int64_t> index_;
};

// Right-pads sequences with kPad into an int64 [B, L] tensor. L defaults to the
// longest sequence; longer sequences are rejected.
torch::Tensor pad_batch(const std::vector<TokenSeq>& seqs, int64_t length = -1);

// Boolean [B, L] mask of non-padding positions.
inline torch::Tensor token_mask(const torch::Tensor& ids) { return ids.ne(Vocabulary::kPad); }

}  // namespace covergen::world
