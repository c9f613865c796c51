#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <ATen/core/Generator.h>
#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <torch/nn/module.h>
#include <torch/nn/modules/batchnorm.h>
#include <torch/nn/modules/container/modulelist.h>
#include <torch/nn/modules/container/sequential.h>
#include <torch/nn/modules/conv.h>
#include <torch/nn/pimpl.h>

#include "priorseg/checkpoint.hpp"

namespace priorseg {

// Residual-network encoder. Pyramid levels, for an H x W input:
//   0: stem      widths[0] x H/2  x W/2
//   1: stage 1   widths[1] x H/4  x W/4
//   2: stage 2   widths[2] x H/8  x W/8
//   3: stage 3   widths[3] x H/16 x W/16
//   4: stage 4   widths[4] x H/32 x W/32   (deepest)
struct EncoderSpec {
  int depth = 34;  // 18 or 34 (basic-block variants)
  std::array<int64_t, 5> widths{64, 64, 128, 256, 512};
  // Optional seg_model/encoder checkpoint whose "encoder." tensors seed the encoder.
  std::string pretrained_path;

  void validate() const;
  std::array<int, 4> blocks_per_stage() const;
  nlohmann::json to_json() const;
  static EncoderSpec from_json(const nlohmann::json& j);
  bool operator==(const EncoderSpec&) const = default;
};

// Five upsampling blocks (x2 nearest upsample, concat skip, 2 x Conv-BN-ReLU)
// followed by a 3x3 convolution to two class logits.
struct DecoderSpec {
  std::array<int64_t, 5> widths{256, 128, 64, 32, 16};

  void validate() const;
  nlohmann::json to_json() const;
  static DecoderSpec from_json(const nlohmann::json& j);
  bool operator==(const DecoderSpec&) const = default;
};

struct FeatureDropoutConfig {
  enum class Granularity { channel, element };
  enum class Level { deepest, all };

  double drop_rate = 0.5;
  Granularity granularity = Granularity::channel;
  Level level = Level::deepest;

  void validate() const;
  nlohmann::json to_json() const;
  static FeatureDropoutConfig from_json(const nlohmann::json& j);
  bool operator==(const FeatureDropoutConfig&) const = default;
};

std::string to_string(FeatureDropoutConfig::Granularity g);
std::string to_string(FeatureDropoutConfig::Level l);
FeatureDropoutConfig::Granularity granularity_from_string(const std::string& s);
FeatureDropoutConfig::Level level_from_string(const std::string& s);

using FeaturePyramid = std::vector<torch::Tensor>;

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(BasicBlock);

class ResNetEncoderImpl : public torch::nn::Module {
 public:
  explicit ResNetEncoderImpl(const EncoderSpec& spec);
  FeaturePyramid forward(const torch::Tensor& images);

 private:
  EncoderSpec spec_;
  torch::nn::Conv2d stem_conv_{nullptr};
  torch::nn::BatchNorm2d stem_bn_{nullptr};
  torch::nn::ModuleList stages_;
};
TORCH_MODULE(ResNetEncoder);

class DecoderBlockImpl : public torch::nn::Module {
 public:
  DecoderBlockImpl(int64_t in, int64_t skip, int64_t out);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(DecoderBlock);

class UNetDecoderImpl : public torch::nn::Module {
 public:
  UNetDecoderImpl(const EncoderSpec& encoder, const DecoderSpec& spec);
  torch::Tensor forward(const FeaturePyramid& pyramid);

  // Number of forward passes run through this decoder (for isolation checks).
  int64_t forward_calls() const { return calls_.load(); }

 private:
  torch::nn::ModuleList blocks_;
  torch::nn::Conv2d head_{nullptr};
  std::atomic<int64_t> calls_{0};
};
TORCH_MODULE(UNetDecoder);

// Shared encoder plus twin decoders with independent parameters.
class SegNetImpl : public torch::nn::Module {
 public:
  SegNetImpl(const EncoderSpec& encoder, const DecoderSpec& decoder);

  // images: B x 1 x H x W, H and W multiples of 32.
  FeaturePyramid encode(const torch::Tensor& images);
  torch::Tensor decode_l(const FeaturePyramid& pyramid);
  // With `training`, a fresh dropout mask drawn from `gen` perturbs the
  // configured level(s) before D_p; otherwise dropout is the identity.
  torch::Tensor decode_p(const FeaturePyramid& pyramid, const FeatureDropoutConfig& dropout, at::Generator& gen,
                         bool training);

  ResNetEncoder& encoder() { return encoder_; }
  UNetDecoder& decoder_l() { return decoder_l_; }
  UNetDecoder& decoder_p() { return decoder_p_; }

 private:
  ResNetEncoder encoder_{nullptr};
  UNetDecoder decoder_l_{nullptr};
  UNetDecoder decoder_p_{nullptr};
};
TORCH_MODULE(SegNet);

// m * f with m ~ Bernoulli(1 - p) / (1 - p); channel granularity draws one
// mask value per (sample, channel).
torch::Tensor feature_dropout(const torch::Tensor& features, double drop_rate,
                              FeatureDropoutConfig::Granularity granularity, at::Generator& gen);
FeaturePyramid apply_feature_dropout(const FeaturePyramid& pyramid, const FeatureDropoutConfig& cfg, at::Generator& gen);

// Which decoder answers predict(). Semi-supervised models use D_p; the
// labeled-only baseline never trains D_p and predicts through D_l.
enum class InferenceBranch { prior_guided, labeled };
std::string to_string(InferenceBranch b);
InferenceBranch inference_branch_from_string(const std::string& s);

struct SegModelHandle {
  EncoderSpec encoder_spec;
  DecoderSpec decoder_spec;
  FeatureDropoutConfig dropout;
  int64_t input_size = 256;
  InferenceBranch branch = InferenceBranch::prior_guided;
  SegNet net{nullptr};

  // Builds a fresh network; parameter initialisation uses the global libtorch seed.
  static SegModelHandle create(const EncoderSpec& encoder, const DecoderSpec& decoder, const FeatureDropoutConfig& dropout,
                               int64_t input_size, std::uint64_t init_seed);
  SegModelHandle clone() const;

  nlohmann::json spec_json() const;
  // seg_model archive; `extra` lands under meta["extra"].
  TensorArchive to_archive(const nlohmann::json& extra = nlohmann::json::object()) const;
  static SegModelHandle from_archive(const TensorArchive& ar);
  void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const;
  static SegModelHandle load(const std::filesystem::path& path);
};

// Two-class logits (B x 2 x H x W) -> labels; a pixel is foreground only when
// its foreground logit is strictly larger, so ties go to background.
torch::Tensor logits_to_labels(const torch::Tensor& logits);

// Softmax foreground channel resampled to B x 1 x 64 x 64. Differentiable.
torch::Tensor foreground_prob_64(const torch::Tensor& logits);

// Eval-mode logits of the inference branch for B x 1 x S x S images.
torch::Tensor inference_logits(SegModelHandle& handle, const torch::Tensor& images);

// Binary mask (CV_8UC1, 0/1) at the image's native size. The image is resized
// to input_size for the network and the prediction is upsampled
// nearest-neighbour back.
cv::Mat predict(SegModelHandle& handle, const cv::Mat& image);

}  // namespace priorseg
