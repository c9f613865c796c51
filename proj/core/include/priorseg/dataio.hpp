#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <torch/types.h>

namespace priorseg {

using Rng = std::mt19937_64;

enum class Source { tn3k, busi, synthetic };

std::string to_string(Source s);
Source source_from_string(const std::string& s);

// One grayscale image, values in [0,1] (CV_32FC1), with an optional binary
// mask (CV_8UC1, values exactly 0 or 1) of the same size.
struct ImageRecord {
  std::string id;
  cv::Mat image;
  std::optional<cv::Mat> mask;
  Source source = Source::synthetic;

  int rows() const { return image.rows; }
  int cols() const { return image.cols; }
  // Throws if the size/type/binarity invariants do not hold.
  void validate() const;
};

// Labeled fraction of the training pool. Only 1/8, 1/4 and 1/2 are accepted.
struct Fraction {
  int num = 1;
  int den = 8;

  static Fraction parse(const std::string& text);
  std::string str() const;
  double value() const { return static_cast<double>(num) / den; }
  // floor(num / den * pool) in integer arithmetic.
  std::size_t of(std::size_t pool) const { return pool * static_cast<std::size_t>(num) / static_cast<std::size_t>(den); }
  bool operator==(const Fraction&) const = default;
};

struct DatasetSplit {
  std::vector<std::string> labeled_ids;
  std::vector<std::string> unlabeled_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
  Fraction fraction;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static DatasetSplit from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static DatasetSplit load(const std::filesystem::path& path);
};

struct AugmentationParams {
  int resize_to = 320;
  int crop_to = 256;
  double rotation_range = 15.0;  // degrees, symmetric
  double scale_min = 0.8;
  double scale_max = 1.25;

  // Resize only: no rotation, unit scale, crop equal to resize.
  static AugmentationParams identity(int size);
  void validate() const;
};

enum class Layout { tn3k, busi, synthetic };

Layout layout_from_string(const std::string& s);
std::string to_string(Layout l);

// Reads `root/images/*` paired with `root/masks/*` by basename. The busi layout
// also accepts `<name>_mask.<ext>` and ORs any `<name>_mask_<k>` extras into the
// mask. The synthetic layout additionally reads `manifest.json` for ordering.
std::vector<ImageRecord> load_dataset(const std::filesystem::path& root, Layout layout);

// Writes records as `images/<id>.png` (8-bit) and `masks/<id>.png` (0/255).
void save_records(const std::filesystem::path& root, const std::vector<ImageRecord>& records);

struct SyntheticManifest {
  std::uint64_t seed = 0;
  int canvas = 0;
  std::vector<std::string> ids;
  nlohmann::json to_json() const;
};

// Deterministic blob-on-speckle images; image intensities are quantised to
// k/255 so a save/load round trip is exact.
std::vector<ImageRecord> generate_synthetic(int n, int canvas, std::uint64_t seed);
void write_synthetic_dataset(const std::filesystem::path& root, const std::vector<ImageRecord>& records,
                             std::uint64_t seed, int canvas);

struct PartitionOverrides {
  std::optional<std::vector<std::string>> val_ids;
  std::optional<std::vector<std::string>> test_ids;
};

// Ids are sorted before a seeded shuffle, so the result depends only on the
// id set, the fraction, the counts and the seed. Test ids are drawn first, then
// validation; the labeled count is floor(fraction * remaining pool).
DatasetSplit make_partition(const std::vector<ImageRecord>& records, Fraction fraction, std::size_t val_count,
                            std::size_t test_count, std::uint64_t seed, const PartitionOverrides& overrides = {});

// One id per line; blank lines and '#' comments ignored.
std::vector<std::string> read_id_list(const std::filesystem::path& path);

ImageRecord augment(const ImageRecord& record, const AugmentationParams& params, Rng& rng);

// Area downsampling (bilinear when upsampling) of an N x 1 x H x W tensor to
// N x 1 x 64 x 64. Differentiable.
torch::Tensor resize_grid_64(const torch::Tensor& grids);
// Convenience wrapper for a single binary mask; returns CV_32FC1 64 x 64.
cv::Mat resize_mask_64(const cv::Mat& mask);

class RecordIndex {
 public:
  explicit RecordIndex(const std::vector<ImageRecord>& records);
  const ImageRecord& at(const std::string& id) const;
  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::vector<ImageRecord> select(const std::vector<std::string>& ids) const;

 private:
  const std::vector<ImageRecord>* records_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Cycles through a pool in reshuffled epochs. An empty pool yields empty batches.
class PoolSampler {
 public:
  PoolSampler(std::vector<std::string> pool, std::uint64_t seed);

  std::vector<std::string> next(std::size_t batch_size);
  std::size_t size() const { return pool_.size(); }

  nlohmann::json state() const;
  void restore(const nlohmann::json& state);

 private:
  void reshuffle();

  std::vector<std::string> pool_;
  std::vector<std::string> order_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

// Independent samplers over the labeled and unlabeled pools of a split.
class BatchSampler {
 public:
  BatchSampler(const DatasetSplit& split, std::uint64_t seed);

  PoolSampler& labeled() { return labeled_; }
  PoolSampler& unlabeled() { return unlabeled_; }

  nlohmann::json state() const;
  void restore(const nlohmann::json& state);

 private:
  PoolSampler labeled_;
  PoolSampler unlabeled_;
};

std::pair<std::vector<std::string>, std::vector<std::string>> sample_batches(BatchSampler& sampler,
                                                                             std::size_t labeled_bs,
                                                                             std::size_t unlabeled_bs);

}  // namespace priorseg
