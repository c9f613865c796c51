#include "priorseg/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace priorseg {
namespace {

constexpr std::array<char, 8> kMagic{'P', 'R', 'S', 'G', 'C', 'K', 'P', 'T'};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kUInt8: return "uint8";
    default: throw std::invalid_argument(std::string("checkpoint: unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from_name(const std::string& n) {
  if (n == "float32") return torch::kFloat32;
  if (n == "float64") return torch::kFloat64;
  if (n == "int64") return torch::kInt64;
  if (n == "uint8") return torch::kUInt8;
  throw std::runtime_error("checkpoint: unknown dtype '" + n + "'");
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

TensorArchive::TensorArchive(std::string kind, int format_version)
    : kind_(std::move(kind)), format_version_(format_version) {}

void TensorArchive::put(const std::string& name, const torch::Tensor& t) {
  dtype_name(t.scalar_type());
  tensors_[name] = t.detach().to(torch::kCPU).contiguous().clone();
}

torch::Tensor TensorArchive::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::runtime_error("checkpoint: missing tensor '" + name + "' in " + kind_ + " archive");
  return it->second;
}

void TensorArchive::put_module(const std::string& prefix, const torch::nn::Module& m) {
  for (const auto& item : m.named_parameters(/*recurse=*/true)) put(prefix + item.key(), item.value());
  for (const auto& item : m.named_buffers(/*recurse=*/true)) put(prefix + item.key(), item.value());
}

void TensorArchive::load_module(const std::string& prefix, torch::nn::Module& m) const {
  torch::NoGradGuard no_grad;
  auto copy_into = [&](const std::string& key, torch::Tensor& dst) {
    auto src = get(prefix + key);
    if (src.sizes() != dst.sizes()) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + prefix + key + "' (stored " +
                               c10::str(src.sizes()) + ", model " + c10::str(dst.sizes()) + ")");
    }
    dst.copy_(src);
  };
  for (auto& item : m.named_parameters(true)) copy_into(item.key(), item.value());
  for (auto& item : m.named_buffers(true)) copy_into(item.key(), item.value());
}

void TensorArchive::write(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["kind"] = kind_;
  header["format_version"] = format_version_;
  header["meta"] = meta();
  auto entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    const auto nbytes = static_cast<std::uint64_t>(t.numel()) * t.element_size();
    entries.push_back({{"name", name},
                       {"dtype", dtype_name(t.scalar_type())},
                       {"shape", t.sizes().vec()},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["tensors"] = entries;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + tmp + "' for writing");
    os.write(kMagic.data(), kMagic.size());
    write_pod<std::uint32_t>(os, kContainerVersion);
    write_pod<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : tensors_) {
      os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for '" + tmp + "'");
  }
  // Rename so an interrupted write never clobbers the previous good file.
  std::filesystem::rename(tmp, path);
}

TensorArchive TensorArchive::read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path.string() + "'");
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw std::runtime_error("checkpoint: '" + path.string() + "' is not a priorseg checkpoint");
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kContainerVersion) {
    throw std::runtime_error("checkpoint: unsupported container version " + std::to_string(version));
  }
  const auto header_len = read_pod<std::uint64_t>(is);
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw std::runtime_error("checkpoint: truncated header in '" + path.string() + "'");
  const auto header = nlohmann::json::parse(text);

  TensorArchive ar(header.at("kind").get<std::string>(), header.at("format_version").get<int>());
  ar.meta() = header.at("meta");
  const auto payload_start = is.tellg();
  for (const auto& e : header.at("tensors")) {
    auto shape = e.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from_name(e.at("dtype").get<std::string>())));
    const auto nbytes = e.at("nbytes").get<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(t.numel()) * t.element_size()) {
      throw std::runtime_error("checkpoint: size mismatch for tensor '" + e.at("name").get<std::string>() + "'");
    }
    is.seekg(payload_start + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!is) throw std::runtime_error("checkpoint: truncated payload in '" + path.string() + "'");
    ar.tensors_[e.at("name").get<std::string>()] = t;
  }
  return ar;
}

std::uint64_t module_checksum(const torch::nn::Module& m) {
  std::map<std::string, torch::Tensor> all;
  for (const auto& item : m.named_parameters(true)) all["p:" + item.key()] = item.value();
  for (const auto& item : m.named_buffers(true)) all["b:" + item.key()] = item.value();
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : all) {
    mix(name.data(), name.size());
    auto c = t.detach().contiguous();
    mix(c.data_ptr(), static_cast<size_t>(c.numel() * c.element_size()));
  }
  return h;
}

}  // namespace priorseg
