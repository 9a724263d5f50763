// SPDX-License-Identifier: Apache-2.0
#include "covergen/world/vocab.hpp"

#include "covergen/common/errors.hpp"
#include "covergen/world/style.hpp"

#include <fstream>

namespace covergen::world {

Vocabulary::Vocabulary() {
  tokens_ = {"<pad>", "<null>", "draw", "cover", "with", "user", "likes", "age"};
  for (auto g : kGenreNames) tokens_.push_back("genre:" + std::string(g));
  for (auto s : kSubjectNames) tokens_.push_back("subject:" + std::string(s));
  for (auto l : kLayoutNames) tokens_.push_back("layout:" + std::string(l));
  for (int i = 0; i < kHueBuckets; ++i) tokens_.push_back("hue:" + std::to_string(i));
  for (int i = 0; i < kTintBuckets; ++i) tokens_.push_back("tint:" + std::to_string(i));
  for (auto t : kToneNames) tokens_.push_back("tone:" + std::string(t));
  for (int i = 0; i < kAgeBands; ++i) tokens_.push_back("age:" + std::to_string(i));
  for (int64_t i = 0; i < static_cast<int64_t>(tokens_.size()); ++i) index_.emplace(tokens_[i], i);
}

const Vocabulary& Vocabulary::instance() {
  static const Vocabulary vocab;
  return vocab;
}

int64_t Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw ArgumentError("token not in vocabulary: " + std::string(token));
  return it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

const std::string& Vocabulary::token(int64_t id) const {
  if (id < 0 || id >= size()) throw ArgumentError("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<size_t>(id)];
}

TokenSeq Vocabulary::encode(const std::vector<std::string>& tokens) const {
  TokenSeq out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocabulary::decode(const TokenSeq& ids) const {
  std::vector<std::string> out;
  for (int64_t i : ids) out.push_back(token(i));
  return out;
}

std::string Vocabulary::join(const TokenSeq& ids) const {
  std::string s;
  for (int64_t i : ids) {
    if (!s.empty()) s += ' ';
    s += token(i);
  }
  return s;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (const auto& t : tokens_) out << t << "\n";
}

torch::Tensor pad_batch(const std::vector<TokenSeq>& seqs, int64_t length) {
  int64_t longest = 1;
  for (const auto& s : seqs) longest = std::max<int64_t>(longest, static_cast<int64_t>(s.size()));
  if (length < 0) length = longest;
  if (longest > length) throw ArgumentError("token sequence longer than padded length");
  auto out = torch::full({static_cast<int64_t>(seqs.size()), length}, Vocabulary::kPad, torch::kInt64);
  auto acc = out.accessor<int64_t, 2>();
  for (size_t b = 0; b < seqs.size(); ++b) {
    for (size_t i = 0; i < seqs[b].size(); ++i) acc[static_cast<int64_t>(b)][static_cast<int64_t>(i)] = seqs[b][i];
  }
  return out;
}

}  // namespace covergen::world
