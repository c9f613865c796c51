#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <ATen/core/Generator.h>
#include <nlohmann/json.hpp>
#include <torch/types.h>

#include "priorseg/dataio.hpp"
#include "priorseg/segmodel.hpp"
#include "priorseg/shape_prior.hpp"

namespace priorseg {

// lambda_dsr weights the shape-prior term inside the unsupervised loss;
// gamma weights the unsupervised loss inside the total. Unrelated to the
// prior's gradient-penalty weight.
struct LossWeights {
  double lambda_dsr = 0.1;
  double gamma = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
  bool operator==(const LossWeights&) const = default;
};

struct OptimConfig {
  double init_lr = 0.001;
  double power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  int64_t epochs = 200;
  int64_t labeled_bs = 8;
  int64_t unlabeled_bs = 8;
  // 0: ceil(max(|labeled| / labeled_bs, |unlabeled| / unlabeled_bs)) from the split.
  int64_t iters_per_epoch = 0;
  // 0: constant gamma; otherwise gamma ramps linearly from 0 over this many epochs.
  int64_t gamma_rampup_epochs = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static OptimConfig from_json(const nlohmann::json& j);
  bool operator==(const OptimConfig&) const = default;
};

struct TrainConfig {
  OptimConfig optim;
  LossWeights weights;
  AugmentationParams augmentation;
  std::uint64_t seed = 0;
  // Supervised loss only; predictions come from D_l.
  bool labeled_only = false;
  // When set, checkpoints and logs are written below this directory.
  std::optional<std::filesystem::path> out_dir;
  // Continue from out_dir/checkpoints/seg_latest.ckpt when it exists.
  bool resume = false;
  // > 0: stop once this many epochs are complete, as if interrupted.
  int64_t stop_after_epoch = 0;
};

// Relative locations inside the output directory.
struct OutputLayout {
  static constexpr const char* kLatest = "checkpoints/seg_latest.ckpt";
  static constexpr const char* kBest = "checkpoints/seg_best.ckpt";
  static constexpr const char* kIterCsv = "logs/train_iter.csv";
  static constexpr const char* kEpochCsv = "logs/val_epoch.csv";
  static constexpr const char* kEvents = "logs/events.jsonl";
};

struct TrainState {
  int64_t iteration = 0;
  int64_t epoch = 0;
  double best_val_dice = -1.0;
  int64_t best_epoch = 0;
  std::string latest_checkpoint = OutputLayout::kLatest;
  std::string best_checkpoint = OutputLayout::kBest;
  nlohmann::json sampler;
  std::string augmentation_rng;
  // Byte lengths of the log files when the latest checkpoint was written.
  nlohmann::json log_offsets = nlohmann::json::object();

  nlohmann::json to_json() const;
  static TrainState from_json(const nlohmann::json& j);
};

struct IterationLog {
  int64_t iteration = 0;
  double lr = 0;
  double supervised = 0;
  double consistency = 0;
  double dsr = 0;  // raw l_dsr, before lambda; 0 when no prior is used
  double total = 0;
};

struct EpochLog {
  int64_t epoch = 0;
  double val_dice = 0;
  double val_iou = 0;
  double best_val_dice = 0;
  double mean_supervised = 0;
  double mean_consistency = 0;
  double mean_dsr = 0;
  double mean_total = 0;
};

struct TrainResult {
  SegModelHandle best;  // best validation Dice (last epoch when there is no validation set)
  std::vector<EpochLog> history;
  std::vector<IterationLog> iterations;
  TrainState state;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// init_lr * (1 - iter / max_iter)^power.
double poly_lr(int64_t iter, int64_t max_iter, double init_lr, double power);

// Mean pixel cross-entropy of two-class logits against B x H x W labels.
torch::Tensor cross_entropy_2d(const torch::Tensor& logits, const torch::Tensor& labels);

// CE(D_l(E(x)), y).
torch::Tensor supervised_loss(SegNet& net, const torch::Tensor& images, const torch::Tensor& masks);

// Detached per-pixel argmax (ties -> background).
torch::Tensor pseudo_label(const torch::Tensor& logits_l);

struct UnsupervisedLoss {
  torch::Tensor total;        // consistency + lambda_dsr * dsr
  torch::Tensor consistency;  // CE(D_p(m * E(u)), pseudo_label(D_l(E(u))))
  torch::Tensor dsr;          // -E[D(foreground_prob_64(D_p output))], zero without a prior
};

// Combines precomputed D_p logits with targets; exposed for tests.
UnsupervisedLoss unsupervised_loss_from_logits(const torch::Tensor& logits_p, const torch::Tensor& targets,
                                               const DiscriminatorHandle* dsr, const LossWeights& weights);

// The D_l branch runs without autograd, so neither D_l nor the encoder receive
// gradient through the pseudo-labels. `dsr` may be null (ablation arm).
UnsupervisedLoss unsupervised_loss(SegNet& net, const DiscriminatorHandle* dsr, const torch::Tensor& images,
                                   const FeatureDropoutConfig& dropout, const LossWeights& weights, at::Generator& gen);

// ls + gamma * lu.
torch::Tensor total_loss(const torch::Tensor& ls, const torch::Tensor& lu, const LossWeights& weights);

// Semi-supervised training. `dsr` null runs the "without prior" ablation.
// `records` must contain every id referenced by the split.
TrainResult train(SegModelHandle& handle, const DiscriminatorHandle* dsr, const std::vector<ImageRecord>& records,
                  const DatasetSplit& split, const TrainConfig& cfg);

// Supervised loss on the labeled pool only, same schedule; gamma is ignored.
TrainResult train_labeled_only_baseline(SegModelHandle& handle, const std::vector<ImageRecord>& records,
                                        const DatasetSplit& split, const TrainConfig& cfg);

}  // namespace priorseg
