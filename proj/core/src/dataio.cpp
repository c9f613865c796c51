#include "priorseg/dataio.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

namespace fs = std::filesystem;

namespace priorseg {
namespace {

const std::set<std::string> kImageExtensions{".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"};

bool is_image_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) return false;
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return kImageExtensions.count(ext) != 0;
}

// Maps stem -> path for every image file directly inside `dir`.
std::map<std::string, fs::path> list_images(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (is_image_file(entry.path())) out.emplace(entry.path().stem().string(), entry.path());
  }
  return out;
}

cv::Mat read_gray(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw std::runtime_error("cannot read image file '" + path.string() + "'");
  return m;
}

cv::Mat binarize(const cv::Mat& gray8) {
  cv::Mat out;
  // 0.5 of full scale: v / 255 >= 0.5  <=>  v >= 128
  cv::threshold(gray8, out, 127, 1, cv::THRESH_BINARY);
  return out;
}

std::string rng_to_string(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(Rng& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw std::runtime_error("sampler state: corrupt generator state");
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  if (v.size() < 2) return;
  for (std::size_t i = v.size() - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(v[i], v[pick(rng)]);
  }
}

}  // namespace

std::string to_string(Source s) {
  switch (s) {
    case Source::tn3k: return "tn3k";
    case Source::busi: return "busi";
    case Source::synthetic: return "synthetic";
  }
  return "unknown";
}

Source source_from_string(const std::string& s) {
  if (s == "tn3k") return Source::tn3k;
  if (s == "busi") return Source::busi;
  if (s == "synthetic") return Source::synthetic;
  throw std::invalid_argument("unknown source '" + s + "'");
}

Layout layout_from_string(const std::string& s) {
  if (s == "tn3k") return Layout::tn3k;
  if (s == "busi") return Layout::busi;
  if (s == "synthetic") return Layout::synthetic;
  throw std::invalid_argument("unknown dataset layout '" + s + "' (expected tn3k, busi or synthetic)");
}

std::string to_string(Layout l) {
  switch (l) {
    case Layout::tn3k: return "tn3k";
    case Layout::busi: return "busi";
    case Layout::synthetic: return "synthetic";
  }
  return "unknown";
}

void ImageRecord::validate() const {
  if (image.empty() || image.type() != CV_32FC1) {
    throw std::invalid_argument("record '" + id + "': image must be a non-empty CV_32FC1 grid");
  }
  if (!mask) return;
  if (mask->type() != CV_8UC1 || mask->size() != image.size()) {
    throw std::invalid_argument("record '" + id + "': mask must be CV_8UC1 with the image's size");
  }
  double lo = 0, hi = 0;
  cv::minMaxLoc(*mask, &lo, &hi);
  if (hi > 1.0) throw std::invalid_argument("record '" + id + "': mask values must be 0 or 1");
}

Fraction Fraction::parse(const std::string& text) {
  const auto slash = text.find('/');
  if (slash == std::string::npos) throw std::invalid_argument("fraction '" + text + "' must look like 1/8");
  Fraction f;
  try {
    f.num = std::stoi(text.substr(0, slash));
    f.den = std::stoi(text.substr(slash + 1));
  } catch (const std::exception&) {
    throw std::invalid_argument("fraction '" + text + "' must look like 1/8");
  }
  if (f.num <= 0 || f.den <= 0) throw std::invalid_argument("fraction '" + text + "' must be positive");
  const int g = std::gcd(f.num, f.den);
  f.num /= g;
  f.den /= g;
  if (f.num != 1 || (f.den != 8 && f.den != 4 && f.den != 2)) {
    throw std::invalid_argument("fraction '" + text + "' is not one of 1/8, 1/4, 1/2");
  }
  return f;
}

std::string Fraction::str() const { return std::to_string(num) + "/" + std::to_string(den); }

nlohmann::json DatasetSplit::to_json() const {
  return {{"labeled_ids", labeled_ids}, {"unlabeled_ids", unlabeled_ids}, {"val_ids", val_ids},
          {"test_ids", test_ids},       {"fraction", fraction.str()},     {"seed", seed}};
}

DatasetSplit DatasetSplit::from_json(const nlohmann::json& j) {
  DatasetSplit s;
  s.labeled_ids = j.at("labeled_ids").get<std::vector<std::string>>();
  s.unlabeled_ids = j.at("unlabeled_ids").get<std::vector<std::string>>();
  s.val_ids = j.at("val_ids").get<std::vector<std::string>>();
  s.test_ids = j.at("test_ids").get<std::vector<std::string>>();
  s.fraction = Fraction::parse(j.at("fraction").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

void DatasetSplit::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write split file '" + path.string() + "'");
  os << to_json().dump(2) << '\n';
}

DatasetSplit DatasetSplit::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read split file '" + path.string() + "'");
  return from_json(nlohmann::json::parse(is));
}

AugmentationParams AugmentationParams::identity(int size) {
  AugmentationParams p;
  p.resize_to = size;
  p.crop_to = size;
  p.rotation_range = 0.0;
  p.scale_min = 1.0;
  p.scale_max = 1.0;
  return p;
}

void AugmentationParams::validate() const {
  if (resize_to <= 0 || crop_to <= 0) throw std::invalid_argument("augmentation: sizes must be positive");
  if (crop_to > resize_to) throw std::invalid_argument("augmentation: crop_to must not exceed resize_to");
  if (rotation_range < 0) throw std::invalid_argument("augmentation: rotation_range must be non-negative");
  if (!(scale_min <= 1.0 && 1.0 <= scale_max) || scale_min <= 0) {
    throw std::invalid_argument("augmentation: scale range must be positive and contain 1.0");
  }
}

std::vector<ImageRecord> load_dataset(const fs::path& root, Layout layout) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root '" + root.string() + "' does not exist");
  const auto image_dir = root / "images";
  const auto mask_dir = root / "masks";
  if (!fs::is_directory(image_dir)) throw std::runtime_error("dataset root '" + root.string() + "' has no images/ directory");

  const auto images = list_images(image_dir);
  const auto masks = list_images(mask_dir);
  const Source source = layout == Layout::tn3k ? Source::tn3k : layout == Layout::busi ? Source::busi : Source::synthetic;

  std::vector<std::string> order;
  if (layout == Layout::synthetic && fs::exists(root / "manifest.json")) {
    std::ifstream is(root / "manifest.json");
    order = nlohmann::json::parse(is).at("ids").get<std::vector<std::string>>();
  } else {
    for (const auto& [stem, path] : images) order.push_back(stem);
  }

  std::vector<ImageRecord> records;
  records.reserve(order.size());
  for (const auto& stem : order) {
    auto img_it = images.find(stem);
    if (img_it == images.end()) throw std::runtime_error("manifest lists '" + stem + "' but no image file exists");
    const fs::path& img_path = img_it->second;

    std::vector<fs::path> mask_paths;
    if (auto it = masks.find(stem); it != masks.end()) mask_paths.push_back(it->second);
    if (layout == Layout::busi) {
      if (auto it = masks.find(stem + "_mask"); it != masks.end()) mask_paths.push_back(it->second);
      for (int k = 1; k < 10; ++k) {
        if (auto it = masks.find(stem + "_mask_" + std::to_string(k)); it != masks.end()) mask_paths.push_back(it->second);
      }
    }
    if (mask_paths.empty()) {
      throw std::runtime_error("image '" + img_path.string() + "' has no mask counterpart in '" + mask_dir.string() + "'");
    }

    const cv::Mat gray = read_gray(img_path);
    ImageRecord rec;
    rec.id = stem;
    rec.source = source;
    gray.convertTo(rec.image, CV_32F, 1.0 / 255.0);
    cv::Mat mask = cv::Mat::zeros(gray.size(), CV_8UC1);
    for (const auto& mp : mask_paths) {
      const cv::Mat m = read_gray(mp);
      if (m.size() != gray.size()) {
        throw std::runtime_error("mask '" + mp.string() + "' size differs from image '" + img_path.string() + "'");
      }
      cv::bitwise_or(mask, binarize(m), mask);
    }
    rec.mask = mask;
    records.push_back(std::move(rec));
  }
  return records;
}

void save_records(const fs::path& root, const std::vector<ImageRecord>& records) {
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "masks", ec);
  if (!fs::is_directory(root / "images") || !fs::is_directory(root / "masks")) {
    throw std::runtime_error("cannot create dataset directories under '" + root.string() + "'");
  }
  const std::vector<int> png_params{cv::IMWRITE_PNG_COMPRESSION, 6};
  for (const auto& r : records) {
    r.validate();
    cv::Mat img8;
    r.image.convertTo(img8, CV_8U, 255.0);
    const auto img_path = root / "images" / (r.id + ".png");
    if (!cv::imwrite(img_path.string(), img8, png_params)) throw std::runtime_error("cannot write '" + img_path.string() + "'");
    if (r.mask) {
      cv::Mat m8 = *r.mask * 255;
      const auto mask_path = root / "masks" / (r.id + ".png");
      if (!cv::imwrite(mask_path.string(), m8, png_params)) throw std::runtime_error("cannot write '" + mask_path.string() + "'");
    }
  }
}

nlohmann::json SyntheticManifest::to_json() const {
  return {{"generator", "priorseg-synthetic-v1"}, {"seed", seed}, {"canvas", canvas}, {"count", ids.size()}, {"ids", ids}};
}

void write_synthetic_dataset(const fs::path& root, const std::vector<ImageRecord>& records, std::uint64_t seed, int canvas) {
  save_records(root, records);
  SyntheticManifest manifest;
  manifest.seed = seed;
  manifest.canvas = canvas;
  for (const auto& r : records) manifest.ids.push_back(r.id);
  std::ofstream os(root / "manifest.json");
  if (!os) throw std::runtime_error("cannot write manifest in '" + root.string() + "'");
  os << manifest.to_json().dump(2) << '\n';
}

DatasetSplit make_partition(const std::vector<ImageRecord>& records, Fraction fraction, std::size_t val_count,
                            std::size_t test_count, std::uint64_t seed, const PartitionOverrides& overrides) {
  Fraction::parse(fraction.str());

  std::vector<std::string> ids;
  ids.reserve(records.size());
  for (const auto& r : records) ids.push_back(r.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw std::invalid_argument("partition: duplicate record ids");

  DatasetSplit split;
  split.fraction = fraction;
  split.seed = seed;

  std::set<std::string> held_out;
  auto take_explicit = [&](const std::vector<std::string>& list, std::vector<std::string>& dst, const char* what) {
    for (const auto& id : list) {
      if (!std::binary_search(ids.begin(), ids.end(), id)) {
        throw std::invalid_argument(std::string("partition: ") + what + " id '" + id + "' not in dataset");
      }
      if (!held_out.insert(id).second) throw std::invalid_argument("partition: id '" + id + "' listed twice");
      dst.push_back(id);
    }
  };
  if (overrides.test_ids) take_explicit(*overrides.test_ids, split.test_ids, "test");
  if (overrides.val_ids) take_explicit(*overrides.val_ids, split.val_ids, "validation");

  std::vector<std::string> remaining;
  for (const auto& id : ids) {
    if (!held_out.count(id)) remaining.push_back(id);
  }
  Rng rng(seed);
  shuffle_in_place(remaining, rng);

  const std::size_t need = (overrides.test_ids ? 0 : test_count) + (overrides.val_ids ? 0 : val_count);
  if (need > remaining.size()) throw std::invalid_argument("partition: not enough records for the requested val/test counts");
  auto cursor = remaining.begin();
  if (!overrides.test_ids) {
    split.test_ids.assign(cursor, cursor + static_cast<std::ptrdiff_t>(test_count));
    cursor += static_cast<std::ptrdiff_t>(test_count);
  }
  if (!overrides.val_ids) {
    split.val_ids.assign(cursor, cursor + static_cast<std::ptrdiff_t>(val_count));
    cursor += static_cast<std::ptrdiff_t>(val_count);
  }
  const std::vector<std::string> pool(cursor, remaining.end());
  const std::size_t n_labeled = fraction.of(pool.size());
  if (n_labeled == 0) {
    throw std::invalid_argument("partition: labeled pool is empty (" + fraction.str() + " of " + std::to_string(pool.size()) + ")");
  }
  split.labeled_ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_labeled));
  split.unlabeled_ids.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_labeled), pool.end());

  for (auto* v : {&split.labeled_ids, &split.unlabeled_ids, &split.val_ids, &split.test_ids}) std::sort(v->begin(), v->end());
  return split;
}

std::vector<std::string> read_id_list(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read id list '" + path.string() + "'");
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    ids.push_back(line.substr(b, e - b + 1));
  }
  return ids;
}

ImageRecord augment(const ImageRecord& record, const AugmentationParams& params, Rng& rng) {
  params.validate();
  if (record.image.empty()) throw std::invalid_argument("augment: record '" + record.id + "' has an empty image");

  // Draw every random quantity up front so rng consumption is independent of params.
  std::uniform_real_distribution<double> angle_dist(-params.rotation_range, params.rotation_range);
  std::uniform_real_distribution<double> scale_dist(params.scale_min, params.scale_max);
  std::uniform_int_distribution<int> off_dist(0, params.resize_to - params.crop_to);
  const double angle = angle_dist(rng);
  const double scale = scale_dist(rng);
  const int x0 = off_dist(rng);
  const int y0 = off_dist(rng);

  const cv::Size size(params.resize_to, params.resize_to);
  cv::Mat img;
  cv::resize(record.image, img, size, 0, 0, cv::INTER_LINEAR);
  cv::Mat mask;
  if (record.mask) cv::resize(*record.mask, mask, size, 0, 0, cv::INTER_NEAREST);

  if (angle != 0.0 || scale != 1.0) {
    const cv::Point2f center(static_cast<float>(params.resize_to) / 2.0f, static_cast<float>(params.resize_to) / 2.0f);
    const cv::Mat m = cv::getRotationMatrix2D(center, angle, scale);
    cv::Mat warped;
    cv::warpAffine(img, warped, m, size, cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
    img = warped;
    if (!mask.empty()) {
      cv::Mat wm;
      cv::warpAffine(mask, wm, m, size, cv::INTER_NEAREST, cv::BORDER_CONSTANT, cv::Scalar(0));
      mask = wm;
    }
  }

  const cv::Rect roi(x0, y0, params.crop_to, params.crop_to);
  ImageRecord out;
  out.id = record.id;
  out.source = record.source;
  out.image = img(roi).clone();
  cv::min(cv::max(out.image, 0.0), 1.0, out.image);
  if (!mask.empty()) out.mask = mask(roi).clone();
  return out;
}

torch::Tensor resize_grid_64(const torch::Tensor& grids) {
  TORCH_CHECK(grids.dim() == 4 && grids.size(1) == 1, "resize_grid_64 expects N x 1 x H x W, got ", grids.sizes());
  const auto h = grids.size(2);
  const auto w = grids.size(3);
  if (h == 64 && w == 64) return grids;
  if (h >= 64 && w >= 64) return torch::adaptive_avg_pool2d(grids, {64, 64});
  namespace F = torch::nn::functional;
  return F::interpolate(grids, F::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{64, 64})
                                   .mode(torch::kBilinear)
                                   .align_corners(false));
}

cv::Mat resize_mask_64(const cv::Mat& mask) {
  if (mask.empty()) throw std::invalid_argument("resize_mask_64: empty mask");
  cv::Mat f;
  mask.convertTo(f, CV_32F);
  auto t = torch::from_blob(f.data, {1, 1, f.rows, f.cols}, torch::kFloat32);
  auto r = resize_grid_64(t).contiguous();
  cv::Mat out(64, 64, CV_32FC1);
  std::memcpy(out.data, r.data_ptr<float>(), 64 * 64 * sizeof(float));
  return out;
}

RecordIndex::RecordIndex(const std::vector<ImageRecord>& records) : records_(&records) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!index_.emplace(records[i].id, i).second) throw std::invalid_argument("duplicate record id '" + records[i].id + "'");
  }
}

const ImageRecord& RecordIndex::at(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw std::out_of_range("no record with id '" + id + "'");
  return (*records_)[it->second];
}

std::vector<ImageRecord> RecordIndex::select(const std::vector<std::string>& ids) const {
  std::vector<ImageRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(at(id));
  return out;
}

PoolSampler::PoolSampler(std::vector<std::string> pool, std::uint64_t seed) : pool_(std::move(pool)), rng_(seed) {
  cursor_ = 0;
  order_.clear();
}

void PoolSampler::reshuffle() {
  order_ = pool_;
  shuffle_in_place(order_, rng_);
  cursor_ = 0;
}

std::vector<std::string> PoolSampler::next(std::size_t batch_size) {
  std::vector<std::string> out;
  if (pool_.empty()) return out;
  out.reserve(batch_size);
  while (out.size() < batch_size) {
    if (cursor_ >= order_.size()) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

nlohmann::json PoolSampler::state() const {
  return {{"order", order_}, {"cursor", cursor_}, {"rng", rng_to_string(rng_)}};
}

void PoolSampler::restore(const nlohmann::json& state) {
  order_ = state.at("order").get<std::vector<std::string>>();
  cursor_ = state.at("cursor").get<std::size_t>();
  rng_from_string(rng_, state.at("rng").get<std::string>());
}

BatchSampler::BatchSampler(const DatasetSplit& split, std::uint64_t seed)
    : labeled_(split.labeled_ids, seed), unlabeled_(split.unlabeled_ids, seed ^ 0x9E3779B97F4A7C15ULL) {}

nlohmann::json BatchSampler::state() const { return {{"labeled", labeled_.state()}, {"unlabeled", unlabeled_.state()}}; }

void BatchSampler::restore(const nlohmann::json& state) {
  labeled_.restore(state.at("labeled"));
  unlabeled_.restore(state.at("unlabeled"));
}

std::pair<std::vector<std::string>, std::vector<std::string>> sample_batches(BatchSampler& sampler, std::size_t labeled_bs,
                                                                             std::size_t unlabeled_bs) {
  auto l = sampler.labeled().next(labeled_bs);
  auto u = sampler.unlabeled().next(unlabeled_bs);
  return {std::move(l), std::move(u)};
}

}  // namespace priorseg
