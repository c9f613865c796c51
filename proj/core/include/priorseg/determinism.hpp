#pragma once

#include <cstdint>
#include <string>

#include <ATen/core/Generator.h>

namespace priorseg {

// Name of the environment variable that toggles deterministic mode.
inline constexpr const char* kDeterministicEnv = "PRIORSEG_DETERMINISTIC";

// True unless PRIORSEG_DETERMINISTIC is set to 0/false/off.
bool deterministic_mode_from_env();

// Deterministic mode pins libtorch to one intra-op thread and requests
// deterministic kernels. Safe to call repeatedly.
void configure_determinism(bool deterministic);

// Seeds the global libtorch generator used for parameter initialisation.
void seed_global(std::uint64_t seed);

// Explicit CPU generator; every stochastic tensor op in the library takes one.
at::Generator make_generator(std::uint64_t seed);

// Opaque byte-string snapshot of a generator, suitable for checkpoints.
std::string generator_state(const at::Generator& gen);
void set_generator_state(at::Generator& gen, const std::string& state);

}  // namespace priorseg
