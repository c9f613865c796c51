#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "priorseg/dataio.hpp"
#include "temp_dir.hpp"

using namespace priorseg;
namespace fs = std::filesystem;

namespace {

bool is_binary(const cv::Mat& m) {
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c)
      if (m.at<uint8_t>(r, c) > 1) return false;
  return true;
}

bool mats_equal(const cv::Mat& a, const cv::Mat& b) {
  return a.size() == b.size() && a.type() == b.type() && cv::norm(a, b, cv::NORM_INF) == 0;
}

std::vector<ImageRecord> plain_records(int n) {
  std::vector<ImageRecord> out;
  for (int i = 0; i < n; ++i) {
    ImageRecord r;
    char id[16];
    std::snprintf(id, sizeof(id), "r%04d", i);
    r.id = id;
    r.image = cv::Mat::zeros(8, 8, CV_32FC1);
    r.mask = cv::Mat::zeros(8, 8, CV_8UC1);
    out.push_back(r);
  }
  return out;
}

void write_pair(const fs::path& root, const std::string& name, const cv::Mat& img, const cv::Mat& mask,
                const std::string& mask_name = "") {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  cv::imwrite((root / "images" / (name + ".png")).string(), img);
  cv::imwrite((root / "masks" / ((mask_name.empty() ? name : mask_name) + ".png")).string(), mask);
}

}  // namespace

TEST(LoadDataset, CountsPairs) {
  TempDir tmp;
  for (int i = 0; i < 3; ++i) {
    write_pair(tmp.path(), "img" + std::to_string(i), cv::Mat(20, 30, CV_8UC1, cv::Scalar(i * 40)),
               cv::Mat::zeros(20, 30, CV_8UC1));
  }
  const auto recs = load_dataset(tmp.path(), Layout::tn3k);
  ASSERT_EQ(recs.size(), 3u);
  for (const auto& r : recs) {
    ASSERT_TRUE(r.mask.has_value());
    EXPECT_EQ(r.image.type(), CV_32FC1);
    EXPECT_EQ(r.mask->size(), r.image.size());
    EXPECT_EQ(r.source, Source::tn3k);
  }
}

TEST(LoadDataset, BinarizesMasks) {
  TempDir tmp;
  cv::Mat mask = cv::Mat::zeros(10, 10, CV_8UC1);
  mask(cv::Rect(0, 0, 5, 10)).setTo(255);
  mask.at<uint8_t>(9, 9) = 127;  // below half scale
  mask.at<uint8_t>(9, 8) = 128;
  write_pair(tmp.path(), "a", cv::Mat(10, 10, CV_8UC1, cv::Scalar(100)), mask);
  const auto recs = load_dataset(tmp.path(), Layout::tn3k);
  ASSERT_EQ(recs.size(), 1u);
  const cv::Mat& m = *recs[0].mask;
  EXPECT_TRUE(is_binary(m));
  EXPECT_EQ(cv::countNonZero(m), 51);
  EXPECT_EQ(m.at<uint8_t>(9, 9), 0);
  EXPECT_EQ(m.at<uint8_t>(9, 8), 1);
  EXPECT_NEAR(recs[0].image.at<float>(0, 0), 100.0 / 255.0, 1e-6);
}

TEST(LoadDataset, GrayscaleByLuminance) {
  TempDir tmp;
  cv::Mat color(4, 4, CV_8UC3, cv::Scalar(0, 0, 255));  // pure red (BGR)
  write_pair(tmp.path(), "c", color, cv::Mat::zeros(4, 4, CV_8UC1));
  const auto recs = load_dataset(tmp.path(), Layout::tn3k);
  EXPECT_NEAR(recs[0].image.at<float>(0, 0), 76.0 / 255.0, 1.0 / 255.0);
}

TEST(LoadDataset, OrphanImageNamed) {
  TempDir tmp;
  write_pair(tmp.path(), "ok", cv::Mat::zeros(4, 4, CV_8UC1), cv::Mat::zeros(4, 4, CV_8UC1));
  cv::imwrite((tmp.path() / "images" / "lonely.png").string(), cv::Mat::zeros(4, 4, CV_8UC1));
  try {
    load_dataset(tmp.path(), Layout::tn3k);
    FAIL() << "expected an error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("lonely"), std::string::npos) << e.what();
  }
}

TEST(LoadDataset, UnreadableFile) {
  TempDir tmp;
  write_pair(tmp.path(), "ok", cv::Mat::zeros(4, 4, CV_8UC1), cv::Mat::zeros(4, 4, CV_8UC1));
  std::ofstream(tmp.path() / "images" / "broken.png") << "not an image";
  std::ofstream(tmp.path() / "masks" / "broken.png") << "not an image";
  try {
    load_dataset(tmp.path(), Layout::tn3k);
    FAIL() << "expected an error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("broken"), std::string::npos) << e.what();
  }
}

TEST(LoadDataset, BusiMaskSuffixes) {
  TempDir tmp;
  cv::Mat m1 = cv::Mat::zeros(6, 6, CV_8UC1), m2 = cv::Mat::zeros(6, 6, CV_8UC1);
  m1(cv::Rect(0, 0, 2, 2)).setTo(255);
  m2(cv::Rect(4, 4, 2, 2)).setTo(255);
  write_pair(tmp.path(), "benign (1)", cv::Mat::zeros(6, 6, CV_8UC1), m1, "benign (1)_mask");
  cv::imwrite((tmp.path() / "masks" / "benign (1)_mask_1.png").string(), m2);
  const auto recs = load_dataset(tmp.path(), Layout::busi);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].id, "benign (1)");
  EXPECT_EQ(cv::countNonZero(*recs[0].mask), 8);
}

TEST(Synthetic, Deterministic) {
  const auto a = generate_synthetic(10, 128, 7);
  const auto b = generate_synthetic(10, 128, 7);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_TRUE(mats_equal(a[i].image, b[i].image));
    EXPECT_TRUE(mats_equal(*a[i].mask, *b[i].mask));
  }
  const auto c = generate_synthetic(10, 128, 8);
  EXPECT_FALSE(mats_equal(a[0].image, c[0].image));
}

TEST(Synthetic, ForegroundFractionAndRange) {
  const auto recs = generate_synthetic(200, 128, 1);
  ASSERT_EQ(recs.size(), 200u);
  for (const auto& r : recs) {
    ASSERT_TRUE(r.mask.has_value());
    ASSERT_NO_THROW(r.validate());
    const double frac = cv::countNonZero(*r.mask) / static_cast<double>(r.mask->total());
    EXPECT_GT(frac, 0.0);
    EXPECT_LT(frac, 0.9);
    double lo, hi;
    cv::minMaxLoc(r.image, &lo, &hi);
    EXPECT_GE(lo, 0.0);
    EXPECT_LE(hi, 1.0);
  }
}

TEST(Synthetic, RejectsBadArguments) {
  EXPECT_THROW(generate_synthetic(0, 128, 1), std::invalid_argument);
  EXPECT_THROW(generate_synthetic(3, 32, 1), std::invalid_argument);
}

TEST(Synthetic, SaveLoadRoundTrip) {
  TempDir tmp;
  const auto recs = generate_synthetic(6, 64, 3);
  write_synthetic_dataset(tmp.path(), recs, 3, 64);
  EXPECT_TRUE(fs::exists(tmp.path() / "manifest.json"));
  const auto back = load_dataset(tmp.path(), Layout::synthetic);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].id, recs[i].id);
    EXPECT_TRUE(mats_equal(*back[i].mask, *recs[i].mask));
    EXPECT_TRUE(mats_equal(back[i].image, recs[i].image));
  }
}

TEST(Fraction, ParseAndFloor) {
  EXPECT_EQ(Fraction::parse("1/8").of(2578), 322u);
  EXPECT_EQ(Fraction::parse("1/2").of(4), 2u);
  EXPECT_EQ(Fraction::parse("2/8"), Fraction::parse("1/4"));
  EXPECT_THROW(Fraction::parse("1/3"), std::invalid_argument);
  EXPECT_THROW(Fraction::parse("half"), std::invalid_argument);
}

TEST(Partition, CountsFromIntegerArithmetic) {
  const auto recs = plain_records(2578 + 30);
  const auto split = make_partition(recs, Fraction::parse("1/8"), 10, 20, 5);
  EXPECT_EQ(split.labeled_ids.size(), 2578u / 8u);
  EXPECT_EQ(split.unlabeled_ids.size(), 2578u - 2578u / 8u);
  EXPECT_EQ(split.val_ids.size(), 10u);
  EXPECT_EQ(split.test_ids.size(), 20u);
}

TEST(Partition, HalfOfFour) {
  const auto split = make_partition(plain_records(4), Fraction::parse("1/2"), 0, 0, 1);
  EXPECT_EQ(split.labeled_ids.size(), 2u);
  EXPECT_EQ(split.unlabeled_ids.size(), 2u);
}

TEST(Partition, DisjointAndCovering) {
  const auto recs = plain_records(100);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto s = make_partition(recs, Fraction::parse("1/4"), 10, 15, seed);
    std::set<std::string> all;
    std::size_t total = 0;
    for (const auto* ids : {&s.labeled_ids, &s.unlabeled_ids, &s.val_ids, &s.test_ids}) {
      all.insert(ids->begin(), ids->end());
      total += ids->size();
    }
    EXPECT_EQ(all.size(), total);
    EXPECT_EQ(total, recs.size());
  }
}

TEST(Partition, SeedContractAndPurity) {
  const auto recs = plain_records(64);
  const auto a = make_partition(recs, Fraction::parse("1/4"), 8, 8, 1);
  const auto b = make_partition(recs, Fraction::parse("1/4"), 8, 8, 2);
  EXPECT_NE(a.labeled_ids, b.labeled_ids);

  auto shuffled = recs;
  std::reverse(shuffled.begin(), shuffled.end());
  const auto c = make_partition(shuffled, Fraction::parse("1/4"), 8, 8, 1);
  EXPECT_EQ(a.to_json().dump(), c.to_json().dump());
}

TEST(Partition, EmptyLabeledPoolIsError) {
  EXPECT_THROW(make_partition(plain_records(5), Fraction::parse("1/8"), 0, 0, 1), std::exception);
}

TEST(Partition, IdListOverride) {
  const auto recs = plain_records(20);
  PartitionOverrides ov;
  ov.test_ids = std::vector<std::string>{"r0000", "r0001"};
  const auto s = make_partition(recs, Fraction::parse("1/2"), 2, 99, 4, ov);
  EXPECT_EQ(s.test_ids, (std::vector<std::string>{"r0000", "r0001"}));
  EXPECT_EQ(s.labeled_ids.size(), 8u);
}

TEST(Partition, JsonRoundTrip) {
  TempDir tmp;
  const auto s = make_partition(plain_records(30), Fraction::parse("1/4"), 3, 3, 9);
  s.save(tmp.path() / "split.json");
  const auto back = DatasetSplit::load(tmp.path() / "split.json");
  EXPECT_EQ(back.to_json(), s.to_json());
}

TEST(Augment, DefaultsProduceCropSize) {
  ImageRecord r;
  r.id = "big";
  r.image = cv::Mat(500, 500, CV_32FC1, cv::Scalar(0.5f));
  r.mask = cv::Mat::zeros(500, 500, CV_8UC1);
  cv::circle(*r.mask, {250, 250}, 120, cv::Scalar(1), -1);
  Rng rng(3);
  const auto out = augment(r, AugmentationParams{}, rng);
  EXPECT_EQ(out.image.rows, 256);
  EXPECT_EQ(out.image.cols, 256);
  EXPECT_EQ(out.mask->rows, 256);
  EXPECT_TRUE(is_binary(*out.mask));
}

TEST(Augment, IdentityIsDeterministicResize) {
  const auto recs = generate_synthetic(2, 128, 4);
  Rng r1(1), r2(999);
  const auto a = augment(recs[0], AugmentationParams::identity(64), r1);
  const auto b = augment(recs[0], AugmentationParams::identity(64), r2);
  EXPECT_TRUE(mats_equal(a.image, b.image));
  EXPECT_TRUE(mats_equal(*a.mask, *b.mask));
  EXPECT_TRUE(is_binary(*a.mask));
  EXPECT_EQ(a.image.rows, 64);
}

TEST(Augment, MaskStaysBinaryProperty) {
  const auto recs = generate_synthetic(10, 96, 11);
  AugmentationParams p;
  p.resize_to = 80;
  p.crop_to = 64;
  p.rotation_range = 45;
  p.scale_min = 0.5;
  p.scale_max = 1.5;
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const auto out = augment(recs[trial % recs.size()], p, rng);
    ASSERT_TRUE(is_binary(*out.mask));
    ASSERT_EQ(out.mask->size(), out.image.size());
  }
}

TEST(Augment, ParamValidation) {
  AugmentationParams p;
  p.crop_to = 400;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = AugmentationParams{};
  p.scale_min = 1.1;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(ResizeMask64, Constants) {
  cv::Mat ones(64, 64, CV_8UC1, cv::Scalar(1));
  const cv::Mat a = resize_mask_64(ones);
  EXPECT_EQ(a.rows, 64);
  EXPECT_EQ(cv::norm(a - 1.0f, cv::NORM_INF), 0.0);
  for (int s : {17, 64, 200}) {
    const cv::Mat z = resize_mask_64(cv::Mat::zeros(s, s + 3, CV_8UC1));
    EXPECT_EQ(cv::norm(z, cv::NORM_INF), 0.0);
  }
}

TEST(ResizeMask64, LeftHalfMass) {
  cv::Mat m = cv::Mat::zeros(128, 128, CV_8UC1);
  m(cv::Rect(0, 0, 64, 128)).setTo(1);
  const cv::Mat out = resize_mask_64(m);
  EXPECT_NEAR(cv::mean(out)[0], 0.5, 1e-6);
}

TEST(ResizeMask64, MeanPreservationProperty) {
  const auto recs = generate_synthetic(40, 160, 5);
  for (const auto& r : recs) {
    const cv::Mat out = resize_mask_64(*r.mask);
    double lo, hi;
    cv::minMaxLoc(out, &lo, &hi);
    EXPECT_GE(lo, 0.0);
    EXPECT_LE(hi, 1.0);
    const double in_mean = cv::countNonZero(*r.mask) / static_cast<double>(r.mask->total());
    EXPECT_LE(std::abs(cv::mean(out)[0] - in_mean), 0.02);
  }
}

TEST(Sampler, CyclesShortPool) {
  DatasetSplit s;
  s.labeled_ids = {"a", "b"};
  s.unlabeled_ids = {"u1", "u2", "u3"};
  BatchSampler sampler(s, 4);
  const auto [l, u] = sample_batches(sampler, 4, 2);
  ASSERT_EQ(l.size(), 4u);
  EXPECT_EQ(std::count(l.begin(), l.end(), "a"), 2);
  EXPECT_EQ(std::count(l.begin(), l.end(), "b"), 2);
  for (const auto& id : u) EXPECT_TRUE(id[0] == 'u');
}

TEST(Sampler, SeedDeterminismAndRestore) {
  DatasetSplit s;
  for (int i = 0; i < 7; ++i) s.labeled_ids.push_back("l" + std::to_string(i));
  for (int i = 0; i < 19; ++i) s.unlabeled_ids.push_back("u" + std::to_string(i));
  BatchSampler a(s, 11), b(s, 11);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(sample_batches(a, 3, 4), sample_batches(b, 3, 4));

  const auto snap = a.state();
  std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>> expected;
  for (int i = 0; i < 5; ++i) expected.push_back(sample_batches(a, 3, 4));
  BatchSampler c(s, 0);
  c.restore(snap);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(sample_batches(c, 3, 4), expected[static_cast<std::size_t>(i)]);
}

TEST(Sampler, EveryIdOncePerCycle) {
  DatasetSplit s;
  for (int i = 0; i < 12; ++i) s.labeled_ids.push_back("l" + std::to_string(i));
  s.unlabeled_ids = {"u"};
  BatchSampler sampler(s, 2);
  std::multiset<std::string> seen;
  for (int i = 0; i < 3; ++i) {
    const auto [l, u] = sample_batches(sampler, 4, 1);
    seen.insert(l.begin(), l.end());
  }
  for (const auto& id : s.labeled_ids) EXPECT_EQ(seen.count(id), 1u);
}
