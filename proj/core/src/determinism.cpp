#include "priorseg/determinism.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

namespace priorseg {

bool deterministic_mode_from_env() {
  const char* raw = std::getenv(kDeterministicEnv);
  if (raw == nullptr) return true;
  std::string v(raw);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  return !(v == "0" || v == "false" || v == "off" || v == "no");
}

void configure_determinism(bool deterministic) {
  if (deterministic) {
    at::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);
  } else {
    at::globalContext().setDeterministicAlgorithms(false, false);
  }
}

void seed_global(std::uint64_t seed) { torch::manual_seed(seed); }

at::Generator make_generator(std::uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

std::string generator_state(const at::Generator& handle) {
  at::Generator gen = handle;
  std::lock_guard<std::mutex> lock(gen.mutex());
  auto state = gen.get_state();
  return std::string(reinterpret_cast<const char*>(state.data_ptr<uint8_t>()),
                     static_cast<size_t>(state.numel()));
}

void set_generator_state(at::Generator& gen, const std::string& state) {
  auto t = torch::empty({static_cast<int64_t>(state.size())}, torch::kUInt8);
  std::copy(state.begin(), state.end(), reinterpret_cast<char*>(t.data_ptr<uint8_t>()));
  std::lock_guard<std::mutex> lock(gen.mutex());
  gen.set_state(t);
}

}  // namespace priorseg
