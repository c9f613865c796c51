#include "priorseg/segmodel.hpp"

#include <stdexcept>

#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "priorseg/checkpoint.hpp"
#include "priorseg/dataio.hpp"
#include "priorseg/determinism.hpp"
#include "priorseg/tensor_convert.hpp"

namespace priorseg {
namespace {

constexpr int kSegFormatVersion = 1;

torch::nn::Conv2dOptions conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false);
}

}  // namespace

void EncoderSpec::validate() const {
  if (depth != 18 && depth != 34) throw std::invalid_argument("encoder: depth must be 18 or 34");
  for (auto w : widths) {
    if (w <= 0) throw std::invalid_argument("encoder: widths must be positive");
  }
}

std::array<int, 4> EncoderSpec::blocks_per_stage() const {
  return depth == 18 ? std::array<int, 4>{2, 2, 2, 2} : std::array<int, 4>{3, 4, 6, 3};
}

nlohmann::json EncoderSpec::to_json() const {
  return {{"depth", depth}, {"widths", widths}, {"pretrained_path", pretrained_path}};
}

EncoderSpec EncoderSpec::from_json(const nlohmann::json& j) {
  EncoderSpec s;
  s.depth = j.at("depth").get<int>();
  s.widths = j.at("widths").get<std::array<int64_t, 5>>();
  s.pretrained_path = j.value("pretrained_path", std::string());
  return s;
}

void DecoderSpec::validate() const {
  for (auto w : widths) {
    if (w <= 0) throw std::invalid_argument("decoder: widths must be positive");
  }
}

nlohmann::json DecoderSpec::to_json() const { return {{"widths", widths}}; }

DecoderSpec DecoderSpec::from_json(const nlohmann::json& j) {
  DecoderSpec s;
  s.widths = j.at("widths").get<std::array<int64_t, 5>>();
  return s;
}

void FeatureDropoutConfig::validate() const {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw std::invalid_argument("dropout: drop_rate must be in [0,1)");
}

std::string to_string(FeatureDropoutConfig::Granularity g) {
  return g == FeatureDropoutConfig::Granularity::channel ? "channel" : "element";
}

std::string to_string(FeatureDropoutConfig::Level l) { return l == FeatureDropoutConfig::Level::deepest ? "deepest" : "all"; }

FeatureDropoutConfig::Granularity granularity_from_string(const std::string& s) {
  if (s == "channel") return FeatureDropoutConfig::Granularity::channel;
  if (s == "element") return FeatureDropoutConfig::Granularity::element;
  throw std::invalid_argument("unknown dropout granularity '" + s + "' (expected channel or element)");
}

FeatureDropoutConfig::Level level_from_string(const std::string& s) {
  if (s == "deepest") return FeatureDropoutConfig::Level::deepest;
  if (s == "all") return FeatureDropoutConfig::Level::all;
  throw std::invalid_argument("unknown dropout level '" + s + "' (expected deepest or all)");
}

nlohmann::json FeatureDropoutConfig::to_json() const {
  return {{"drop_rate", drop_rate}, {"granularity", to_string(granularity)}, {"level", to_string(level)}};
}

FeatureDropoutConfig FeatureDropoutConfig::from_json(const nlohmann::json& j) {
  FeatureDropoutConfig c;
  c.drop_rate = j.at("drop_rate").get<double>();
  c.granularity = granularity_from_string(j.at("granularity").get<std::string>());
  c.level = level_from_string(j.at("level").get<std::string>());
  return c;
}

BasicBlockImpl::BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
  conv1_ = register_module("conv1", torch::nn::Conv2d(conv3x3(in, out, stride)));
  bn1_ = register_module("bn1", torch::nn::BatchNorm2d(out));
  conv2_ = register_module("conv2", torch::nn::Conv2d(conv3x3(out, out)));
  bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out));
  if (stride != 1 || in != out) {
    shortcut_ = register_module(
        "shortcut", torch::nn::Sequential(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                                          torch::nn::BatchNorm2d(out)));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(bn1_(conv1_(x)));
  y = bn2_(conv2_(y));
  return torch::relu(y + (shortcut_ ? shortcut_->forward(x) : x));
}

ResNetEncoderImpl::ResNetEncoderImpl(const EncoderSpec& spec) : spec_(spec) {
  spec_.validate();
  stem_conv_ = register_module("stem_conv",
                               torch::nn::Conv2d(torch::nn::Conv2dOptions(1, spec_.widths[0], 7).stride(2).padding(3).bias(false)));
  stem_bn_ = register_module("stem_bn", torch::nn::BatchNorm2d(spec_.widths[0]));
  stages_ = register_module("stages", torch::nn::ModuleList());
  const auto blocks = spec_.blocks_per_stage();
  int64_t in = spec_.widths[0];
  for (size_t s = 0; s < 4; ++s) {
    torch::nn::Sequential stage;
    const int64_t out = spec_.widths[s + 1];
    for (int b = 0; b < blocks[s]; ++b) {
      const int64_t stride = (b == 0 && s > 0) ? 2 : 1;
      stage->push_back(BasicBlock(b == 0 ? in : out, out, stride));
    }
    stages_->push_back(stage);
    in = out;
  }
}

FeaturePyramid ResNetEncoderImpl::forward(const torch::Tensor& images) {
  TORCH_CHECK(images.dim() == 4 && images.size(1) == 1, "encoder expects B x 1 x H x W images, got ", images.sizes());
  if (images.size(2) % 32 != 0 || images.size(3) % 32 != 0) {
    throw std::invalid_argument("encoder: input height and width must be multiples of 32, got " +
                                std::to_string(images.size(2)) + " x " + std::to_string(images.size(3)));
  }
  FeaturePyramid pyr;
  pyr.reserve(5);
  auto x = torch::relu(stem_bn_(stem_conv_(images)));
  pyr.push_back(x);
  x = torch::max_pool2d(x, 3, 2, 1);
  for (auto& stage : *stages_) {
    x = stage->as<torch::nn::Sequential>()->forward(x);
    pyr.push_back(x);
  }
  return pyr;
}

DecoderBlockImpl::DecoderBlockImpl(int64_t in, int64_t skip, int64_t out) {
  body_ = register_module("body", torch::nn::Sequential(torch::nn::Conv2d(conv3x3(in + skip, out)), torch::nn::BatchNorm2d(out),
                                                        torch::nn::ReLU(), torch::nn::Conv2d(conv3x3(out, out)),
                                                        torch::nn::BatchNorm2d(out), torch::nn::ReLU()));
}

torch::Tensor DecoderBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& skip) {
  namespace F = torch::nn::functional;
  auto up = F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
  if (skip.defined()) up = torch::cat({up, skip}, 1);
  return body_->forward(up);
}

UNetDecoderImpl::UNetDecoderImpl(const EncoderSpec& encoder, const DecoderSpec& spec) {
  spec.validate();
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  // Skip for block i comes from encoder level 3 - i; the last block has none.
  int64_t in = encoder.widths[4];
  for (int i = 0; i < 5; ++i) {
    const int64_t skip = i < 4 ? encoder.widths[static_cast<size_t>(3 - i)] : 0;
    blocks_->push_back(DecoderBlock(in, skip, spec.widths[static_cast<size_t>(i)]));
    in = spec.widths[static_cast<size_t>(i)];
  }
  head_ = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, 2, 3).padding(1)));
}

torch::Tensor UNetDecoderImpl::forward(const FeaturePyramid& pyramid) {
  TORCH_CHECK(pyramid.size() == 5, "decoder expects a 5-level pyramid, got ", pyramid.size());
  calls_.fetch_add(1);
  auto x = pyramid[4];
  for (size_t i = 0; i < blocks_->size(); ++i) {
    const torch::Tensor skip = i < 4 ? pyramid[3 - i] : torch::Tensor();
    x = blocks_[i]->as<DecoderBlock>()->forward(x, skip);
  }
  return head_(x);
}

SegNetImpl::SegNetImpl(const EncoderSpec& encoder, const DecoderSpec& decoder) {
  encoder_ = register_module("encoder", ResNetEncoder(encoder));
  decoder_l_ = register_module("decoder_l", UNetDecoder(encoder, decoder));
  decoder_p_ = register_module("decoder_p", UNetDecoder(encoder, decoder));
}

FeaturePyramid SegNetImpl::encode(const torch::Tensor& images) { return encoder_->forward(images); }

torch::Tensor SegNetImpl::decode_l(const FeaturePyramid& pyramid) { return decoder_l_->forward(pyramid); }

torch::Tensor SegNetImpl::decode_p(const FeaturePyramid& pyramid, const FeatureDropoutConfig& dropout, at::Generator& gen,
                                   bool training) {
  if (!training || dropout.drop_rate == 0.0) return decoder_p_->forward(pyramid);
  return decoder_p_->forward(apply_feature_dropout(pyramid, dropout, gen));
}

torch::Tensor feature_dropout(const torch::Tensor& features, double drop_rate,
                              FeatureDropoutConfig::Granularity granularity, at::Generator& gen) {
  TORCH_CHECK(drop_rate >= 0.0 && drop_rate < 1.0, "drop_rate must be in [0,1)");
  if (drop_rate == 0.0) return features;
  std::vector<int64_t> shape = features.sizes().vec();
  if (granularity == FeatureDropoutConfig::Granularity::channel) {
    for (size_t d = 2; d < shape.size(); ++d) shape[d] = 1;
  }
  auto keep = torch::empty(shape, features.options().requires_grad(false));
  keep.bernoulli_(1.0 - drop_rate, gen);
  return features * (keep / (1.0 - drop_rate));
}

FeaturePyramid apply_feature_dropout(const FeaturePyramid& pyramid, const FeatureDropoutConfig& cfg, at::Generator& gen) {
  FeaturePyramid out = pyramid;
  if (cfg.level == FeatureDropoutConfig::Level::deepest) {
    out.back() = feature_dropout(out.back(), cfg.drop_rate, cfg.granularity, gen);
  } else {
    for (auto& f : out) f = feature_dropout(f, cfg.drop_rate, cfg.granularity, gen);
  }
  return out;
}

std::string to_string(InferenceBranch b) { return b == InferenceBranch::prior_guided ? "prior_guided" : "labeled"; }

InferenceBranch inference_branch_from_string(const std::string& s) {
  if (s == "prior_guided") return InferenceBranch::prior_guided;
  if (s == "labeled") return InferenceBranch::labeled;
  throw std::invalid_argument("unknown inference branch '" + s + "'");
}

SegModelHandle SegModelHandle::create(const EncoderSpec& encoder, const DecoderSpec& decoder,
                                      const FeatureDropoutConfig& dropout, int64_t input_size, std::uint64_t init_seed) {
  encoder.validate();
  decoder.validate();
  dropout.validate();
  if (input_size <= 0 || input_size % 32 != 0) throw std::invalid_argument("model input_size must be a positive multiple of 32");
  SegModelHandle h;
  h.encoder_spec = encoder;
  h.decoder_spec = decoder;
  h.dropout = dropout;
  h.input_size = input_size;
  seed_global(init_seed);
  h.net = SegNet(encoder, decoder);
  if (!encoder.pretrained_path.empty()) {
    const auto ar = TensorArchive::read(encoder.pretrained_path);
    ar.load_module("encoder.", *h.net->encoder());
  }
  return h;
}

SegModelHandle SegModelHandle::clone() const {
  SegModelHandle h = *this;
  h.net = SegNet(encoder_spec, decoder_spec);
  torch::NoGradGuard ng;
  auto dst_params = h.net->named_parameters(true);
  for (const auto& item : net->named_parameters(true)) dst_params[item.key()].copy_(item.value());
  auto dst_buffers = h.net->named_buffers(true);
  for (const auto& item : net->named_buffers(true)) dst_buffers[item.key()].copy_(item.value());
  h.net->train(net->is_training());
  return h;
}

nlohmann::json SegModelHandle::spec_json() const {
  return {{"encoder", encoder_spec.to_json()},
          {"decoder", decoder_spec.to_json()},
          {"dropout", dropout.to_json()},
          {"input_size", input_size},
          {"inference_branch", to_string(branch)}};
}

TensorArchive SegModelHandle::to_archive(const nlohmann::json& extra) const {
  TensorArchive ar("seg_model", kSegFormatVersion);
  ar.meta()["model"] = spec_json();
  ar.meta()["extra"] = extra;
  ar.put_module("", *net);
  return ar;
}

SegModelHandle SegModelHandle::from_archive(const TensorArchive& ar) {
  if (ar.kind() != "seg_model") throw std::runtime_error("archive holds a " + ar.kind() + " checkpoint, not a segmentation model");
  if (ar.format_version() != kSegFormatVersion) {
    throw std::runtime_error("unsupported segmentation model format version " + std::to_string(ar.format_version()));
  }
  const auto& m = ar.meta().at("model");
  SegModelHandle h;
  h.encoder_spec = EncoderSpec::from_json(m.at("encoder"));
  h.encoder_spec.pretrained_path.clear();
  h.decoder_spec = DecoderSpec::from_json(m.at("decoder"));
  h.dropout = FeatureDropoutConfig::from_json(m.at("dropout"));
  h.input_size = m.at("input_size").get<int64_t>();
  h.branch = inference_branch_from_string(m.at("inference_branch").get<std::string>());
  h.net = SegNet(h.encoder_spec, h.decoder_spec);
  ar.load_module("", *h.net);
  h.net->eval();
  return h;
}

void SegModelHandle::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  to_archive(extra).write(path);
}

SegModelHandle SegModelHandle::load(const std::filesystem::path& path) {
  try {
    return from_archive(TensorArchive::read(path));
  } catch (const std::exception& e) {
    throw std::runtime_error("'" + path.string() + "': " + e.what());
  }
}

torch::Tensor logits_to_labels(const torch::Tensor& logits) {
  TORCH_CHECK(logits.dim() == 4 && logits.size(1) == 2, "expected B x 2 x H x W logits, got ", logits.sizes());
  return (logits.select(1, 1) > logits.select(1, 0)).to(torch::kLong);
}

torch::Tensor foreground_prob_64(const torch::Tensor& logits) {
  TORCH_CHECK(logits.dim() == 4 && logits.size(1) == 2, "expected B x 2 x H x W logits, got ", logits.sizes());
  auto fg = torch::softmax(logits, 1).narrow(1, 1, 1);
  return resize_grid_64(fg);
}

torch::Tensor inference_logits(SegModelHandle& handle, const torch::Tensor& images) {
  torch::NoGradGuard ng;
  const bool was_training = handle.net->is_training();
  handle.net->eval();
  auto pyr = handle.net->encode(images);
  torch::Tensor logits;
  if (handle.branch == InferenceBranch::prior_guided) {
    auto unused = make_generator(0);
    logits = handle.net->decode_p(pyr, handle.dropout, unused, /*training=*/false);
  } else {
    logits = handle.net->decode_l(pyr);
  }
  handle.net->train(was_training);
  return logits;
}

cv::Mat predict(SegModelHandle& handle, const cv::Mat& image) {
  if (image.empty() || image.type() != CV_32FC1) throw std::invalid_argument("predict: image must be a non-empty CV_32FC1 grid");
  const int s = static_cast<int>(handle.input_size);
  cv::Mat resized;
  if (image.rows == s && image.cols == s) {
    resized = image;
  } else {
    cv::resize(image, resized, cv::Size(s, s), 0, 0, cv::INTER_LINEAR);
  }
  std::vector<cv::Mat> batch{resized};
  auto labels = logits_to_labels(inference_logits(handle, images_to_tensor(batch)))[0];
  cv::Mat mask = tensor_to_mask(labels);
  if (mask.rows != image.rows || mask.cols != image.cols) {
    cv::Mat up;
    cv::resize(mask, up, image.size(), 0, 0, cv::INTER_NEAREST);
    mask = up;
  }
  return mask;
}

}  // namespace priorseg
