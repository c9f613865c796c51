#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <ATen/core/Generator.h>
#include <nlohmann/json.hpp>
#include <torch/nn/module.h>
#include <torch/nn/modules/batchnorm.h>
#include <torch/nn/modules/container/modulelist.h>
#include <torch/nn/modules/conv.h>
#include <torch/nn/pimpl.h>

namespace priorseg {

// Side length of the masks the shape prior operates on.
inline constexpr int64_t kPriorSize = 64;

// Five transposed-convolution stages: latent -> 4 -> 8 -> 16 -> 32 -> 64.
// The first four are followed by batch norm + ReLU and have `widths` output
// channels; the fifth emits one channel squashed to [0,1] by a logistic.
struct GeneratorSpec {
  int64_t latent_dim = 128;
  std::array<int64_t, 4> widths{512, 256, 128, 64};

  void validate() const;
  nlohmann::json to_json() const;
  static GeneratorSpec from_json(const nlohmann::json& j);
  bool operator==(const GeneratorSpec&) const = default;
};

// Five convolution stages: 64 -> 32 -> 16 -> 8 -> 4 (leaky ReLU after each)
// followed by a 4x4 valid convolution to one unsquashed score.
struct DiscriminatorSpec {
  std::array<int64_t, 4> widths{64, 128, 256, 512};
  double leaky_slope = 0.2;

  void validate() const;
  nlohmann::json to_json() const;
  static DiscriminatorSpec from_json(const nlohmann::json& j);
  bool operator==(const DiscriminatorSpec&) const = default;
};

struct GanTrainConfig {
  double learning_rate = 5e-5;
  int64_t batch_size = 16;
  int64_t epochs = 5000;
  double gp_weight = 10.0;
  int64_t critic_steps = 5;
  std::uint64_t seed = 0;
  // Write a last-good discriminator checkpoint every N epochs (0: only at the end).
  int64_t checkpoint_every = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static GanTrainConfig from_json(const nlohmann::json& j);
  bool operator==(const GanTrainConfig&) const = default;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeGeneratorImpl : public torch::nn::Module {
 public:
  explicit ShapeGeneratorImpl(const GeneratorSpec& spec);
  // z: B x latent_dim (or B x latent_dim x 1 x 1) -> B x 1 x 64 x 64 in [0,1].
  torch::Tensor forward(torch::Tensor z);
  const GeneratorSpec& spec() const { return spec_; }

 private:
  GeneratorSpec spec_;
  torch::nn::ModuleList deconvs_;
  torch::nn::ModuleList norms_;
};
TORCH_MODULE(ShapeGenerator);

class ShapeDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit ShapeDiscriminatorImpl(const DiscriminatorSpec& spec);
  // B x 1 x 64 x 64 -> B scores.
  torch::Tensor forward(torch::Tensor x);
  const DiscriminatorSpec& spec() const { return spec_; }

 private:
  DiscriminatorSpec spec_;
  torch::nn::ModuleList convs_;
};
TORCH_MODULE(ShapeDiscriminator);

// Anything mapping B x 1 x 64 x 64 to B scores.
using Scorer = std::function<torch::Tensor(const torch::Tensor&)>;

// x_hat = eps * real + (1 - eps) * fake with one eps ~ U[0,1] per sample.
torch::Tensor interpolate_samples(const torch::Tensor& real, const torch::Tensor& fake, at::Generator& gen);

// E[(||grad_x D(x_hat)||_2 - 1)^2], unweighted. The graph is kept so the
// result can be differentiated with respect to the scorer's parameters.
torch::Tensor gradient_penalty(const Scorer& scorer, const torch::Tensor& real, const torch::Tensor& fake,
                               at::Generator& gen);

struct CriticLoss {
  torch::Tensor total;             // wasserstein + gp_weight * penalty
  torch::Tensor wasserstein;       // E[D(fake)] - E[D(real)]
  torch::Tensor gradient_penalty;  // unweighted
};

CriticLoss critic_loss(const Scorer& scorer, const torch::Tensor& real, const torch::Tensor& fake, double gp_weight,
                       at::Generator& gen);

// -E[D(fake)].
torch::Tensor generator_loss(const Scorer& scorer, const torch::Tensor& fake);

struct DiscriminatorMeta {
  std::uint64_t seed = 0;
  int64_t epochs = 0;
  double gp_weight = 10.0;
};

// Frozen discriminator. Parameters never require grad, the network is in eval
// mode, and copies share the same immutable weights.
class DiscriminatorHandle {
 public:
  DiscriminatorHandle(const ShapeDiscriminator& trained, DiscriminatorMeta meta);

  // Differentiable with respect to `masks`; never touches parameter gradients.
  torch::Tensor score(const torch::Tensor& masks) const;
  Scorer scorer() const;

  const DiscriminatorSpec& spec() const { return net_->spec(); }
  const DiscriminatorMeta& meta() const { return meta_; }
  std::uint64_t checksum() const;
  const torch::nn::Module& module() const { return *net_; }

  void save(const std::filesystem::path& path) const;
  static DiscriminatorHandle load(const std::filesystem::path& path);

 private:
  std::shared_ptr<ShapeDiscriminatorImpl> net_;
  DiscriminatorMeta meta_;
};

// -E[D(predicted)]; predicted is B x 1 x 64 x 64 (or B x 64 x 64) in [0,1].
torch::Tensor dsr_loss(const DiscriminatorHandle& handle, const torch::Tensor& predicted);

struct GanEpochLog {
  int64_t epoch = 0;
  double critic_loss = 0;
  double generator_loss = 0;  // -E[D(fake)] over the epoch's critic batches
  double gp_term = 0;         // unweighted penalty
};

struct GanTrainOutputs {
  std::optional<std::filesystem::path> curve_csv;
  std::optional<std::filesystem::path> checkpoint;
};

struct GanTrainResult {
  DiscriminatorHandle handle;
  std::vector<GanEpochLog> curves;
};

// masks: N x 1 x 64 x 64 (values in [0,1]). One epoch is ceil(N / batch_size)
// critic updates over a fresh permutation; the generator is updated after every
// `critic_steps` critic updates. The generator is discarded on return.
GanTrainResult train_shape_prior(const torch::Tensor& masks, const GeneratorSpec& gen_spec,
                                 const DiscriminatorSpec& disc_spec, const GanTrainConfig& cfg,
                                 const GanTrainOutputs& outputs = {});

void write_gan_curves_csv(const std::filesystem::path& path, const std::vector<GanEpochLog>& curves);

}  // namespace priorseg
