#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/types.h>
#include <torch/nn/module.h>

namespace priorseg {

// On-disk layout (little endian):
//
//   bytes 0..7    magic "PRSGCKPT"
//   bytes 8..11   uint32 container version (kContainerVersion)
//   bytes 12..19  uint64 header length N
//   next N bytes  UTF-8 JSON header
//   remainder     raw tensor payloads, concatenated in header order
//
// The header holds {"kind", "format_version", "meta", "tensors"}; each entry of
// "tensors" is {"name", "dtype", "shape", "offset", "nbytes"} with offsets
// relative to the start of the payload section. Keys are emitted sorted, so
// writing the same archive twice yields identical bytes.
inline constexpr std::uint32_t kContainerVersion = 1;

class TensorArchive {
 public:
  TensorArchive() = default;
  explicit TensorArchive(std::string kind, int format_version = 1);

  const std::string& kind() const { return kind_; }
  int format_version() const { return format_version_; }

  // Only float32, float64, int64 and uint8 tensors are stored.
  void put(const std::string& name, const torch::Tensor& t);
  torch::Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const std::map<std::string, torch::Tensor>& tensors() const { return tensors_; }

  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  // Stores every named parameter and buffer under "<prefix><name>".
  void put_module(const std::string& prefix, const torch::nn::Module& m);
  // Copies stored tensors back into the module; missing or mis-shaped entries throw.
  void load_module(const std::string& prefix, torch::nn::Module& m) const;

  void write(const std::filesystem::path& path) const;
  static TensorArchive read(const std::filesystem::path& path);

 private:
  std::string kind_;
  int format_version_ = 1;
  std::map<std::string, torch::Tensor> tensors_;
  nlohmann::json meta_ = nlohmann::json::object();
};

// FNV-1a over the raw bytes of every parameter and buffer, in name order.
std::uint64_t module_checksum(const torch::nn::Module& m);

}  // namespace priorseg
