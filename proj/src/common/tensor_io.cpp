// SPDX-License-Identifier: Apache-2.0
#include "covergen/common/tensor_io.hpp"

#include "covergen/common/errors.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace covergen {
namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) { EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr); }
  void update(const void* data, size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
  std::string hex() {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), out, &len);
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (unsigned int i = 0; i < len; ++i) {
      s.push_back(digits[out[i] >> 4]);
      s.push_back(digits[out[i] & 15]);
    }
    return s;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

torch::Tensor as_f32(const torch::Tensor& t) { return t.detach().to(torch::kCPU, torch::kFloat32).contiguous(); }

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ConfigError("truncated checkpoint " + path.string());
  return v;
}

}  // namespace

NamedTensors collect_tensors(const torch::nn::Module& module, const std::string& prefix) {
  NamedTensors out;
  for (const auto& item : module.named_parameters(true)) out.emplace_back(prefix + item.key(), item.value());
  for (const auto& item : module.named_buffers(true)) out.emplace_back(prefix + item.key(), item.value());
  return out;
}

void assign_tensors(torch::nn::Module& module, const NamedTensors& source, const std::string& prefix) {
  torch::NoGradGuard no_grad;
  auto find = [&](const std::string& name) -> const torch::Tensor* {
    for (const auto& [n, t] : source) {
      if (n == name) return &t;
    }
    return nullptr;
  };
  auto copy_into = [&](const std::string& key, torch::Tensor& dst) {
    const torch::Tensor* src = find(prefix + key);
    if (!src) throw ConfigError("checkpoint lacks array '" + prefix + key + "'");
    if (src->sizes() != dst.sizes()) throw ConfigError("shape mismatch for array '" + prefix + key + "'");
    dst.copy_(src->to(dst.dtype()));
  };
  for (auto& item : module.named_parameters(true)) copy_into(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) copy_into(item.key(), item.value());
}

std::string digest_tensors(const NamedTensors& tensors) {
  Sha256 sha;
  for (const auto& [name, t] : tensors) {
    const uint32_t n = static_cast<uint32_t>(name.size());
    sha.update(&n, sizeof n);
    sha.update(name.data(), name.size());
    for (int64_t d : t.sizes()) sha.update(&d, sizeof d);
    const torch::Tensor f = as_f32(t);
    sha.update(f.data_ptr<float>(), static_cast<size_t>(f.numel()) * sizeof(float));
  }
  return sha.hex();
}

std::string digest_module(const torch::nn::Module& module) { return digest_tensors(collect_tensors(module)); }

std::string digest_bytes(const std::string& bytes) {
  Sha256 sha;
  sha.update(bytes.data(), bytes.size());
  return sha.hex();
}

std::string digest_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return digest_bytes(ss.str());
}

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors,
                      const nlohmann::json& hyperparameters) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(kCheckpointMagic, 8);
  put<uint32_t>(out, kCheckpointVersion);
  put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    put<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint32_t>(out, static_cast<uint32_t>(t.dim()));
    for (int64_t d : t.sizes()) put<int64_t>(out, d);
    const torch::Tensor f = as_f32(t);
    out.write(reinterpret_cast<const char*>(f.data_ptr<float>()),
              static_cast<std::streamsize>(f.numel() * sizeof(float)));
    names.push_back(name);
  }
  nlohmann::json sidecar = {{"format", "covergen-checkpoint"},
                            {"version", kCheckpointVersion},
                            {"source", "native"},
                            {"hyperparameters", hyperparameters},
                            {"arrays", names},
                            {"digest", digest_tensors(tensors)}};
  std::ofstream side(path.string() + ".json");
  side << sidecar.dump(2) << "\n";
}

NamedTensors read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw ConfigError("bad checkpoint magic in " + path.string());
  const auto version = get<uint32_t>(in, path);
  if (version != kCheckpointVersion) throw ConfigError("unsupported checkpoint version in " + path.string());
  const auto count = get<uint32_t>(in, path);
  NamedTensors out;
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto ndim = get<uint32_t>(in, path);
    std::vector<int64_t> dims(ndim);
    for (auto& d : dims) d = get<int64_t>(in, path);
    auto t = torch::empty(dims, torch::kFloat32);
    in.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!in) throw ConfigError("truncated checkpoint " + path.string());
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

nlohmann::json read_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path.string() + ".json");
  if (!in) throw ConfigError("missing checkpoint sidecar for " + path.string());
  return nlohmann::json::parse(in);
}

}  // namespace covergen
