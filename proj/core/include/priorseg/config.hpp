#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "priorseg/dataio.hpp"
#include "priorseg/segmodel.hpp"
#include "priorseg/shape_prior.hpp"
#include "priorseg/trainer.hpp"

namespace priorseg {

struct DatasetSection {
  Layout layout = Layout::synthetic;
  std::string root = "data/synthetic";
  Fraction fraction;
  std::uint64_t seed = 0;
  std::size_t val_count = 20;
  std::size_t test_count = 40;
  // Optional id-list files; when set they replace the drawn val/test pools.
  std::string val_list;
  std::string test_list;
  bool operator==(const DatasetSection&) const = default;
};

struct PriorSection {
  GanTrainConfig train;
  GeneratorSpec generator;
  DiscriminatorSpec discriminator;
  // Checkpoint read by train-seg; empty means <output>/checkpoints/prior.ckpt.
  std::string checkpoint;
  bool operator==(const PriorSection&) const = default;
};

struct ModelSection {
  EncoderSpec encoder;
  DecoderSpec decoder;
  FeatureDropoutConfig dropout;
  int64_t input_size = 256;
  std::uint64_t init_seed = 0;
  bool operator==(const ModelSection&) const = default;
};

struct TrainerSection {
  OptimConfig optim;
  LossWeights weights;
  std::uint64_t seed = 0;
  int resize_to = 320;
  double rotation_range = 15.0;
  double scale_min = 0.8;
  double scale_max = 1.25;
  bool operator==(const TrainerSection&) const = default;
};

// Flat sectioned key = value file:
//   [dataset] [prior] [model] [trainer] [output]
// Every key is optional and defaults to the member initialisers above.
// Unknown sections or keys are rejected.
struct ExperimentConfig {
  DatasetSection dataset;
  PriorSection prior;
  ModelSection model;
  TrainerSection trainer;
  std::string output_dir = "runs/default";

  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  void validate() const;

  AugmentationParams augmentation() const;
  std::filesystem::path prior_checkpoint() const;
  bool operator==(const ExperimentConfig&) const = default;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace priorseg
