#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include <opencv2/imgproc.hpp>

#include "priorseg/dataio.hpp"

namespace priorseg {
namespace {

struct Blob {
  double cx, cy, ax, ay, theta;
  double wobble_amp, wobble_phase;
  int wobble_freq;
};

Blob draw_blob(int canvas, Rng& rng) {
  std::uniform_real_distribution<double> center(0.25 * canvas, 0.75 * canvas);
  std::uniform_real_distribution<double> axis(0.08 * canvas, 0.22 * canvas);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.0, 0.12);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_int_distribution<int> freq(2, 4);
  Blob b{};
  b.cx = center(rng);
  b.cy = center(rng);
  b.ax = axis(rng);
  b.ay = axis(rng);
  b.theta = angle(rng);
  b.wobble_amp = amp(rng);
  b.wobble_phase = phase(rng);
  b.wobble_freq = freq(rng);
  return b;
}

// Ellipse whose radius is modulated by a low-order sinusoid; amp 0 gives a plain ellipse.
void paint_blob(cv::Mat& mask, const Blob& b) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  for (int y = 0; y < mask.rows; ++y) {
    auto* row = mask.ptr<uint8_t>(y);
    for (int x = 0; x < mask.cols; ++x) {
      const double dx = x + 0.5 - b.cx, dy = y + 0.5 - b.cy;
      const double u = (c * dx + s * dy) / b.ax;
      const double v = (-s * dx + c * dy) / b.ay;
      const double r = std::sqrt(u * u + v * v);
      const double limit = 1.0 + b.wobble_amp * std::sin(b.wobble_freq * std::atan2(v, u) + b.wobble_phase);
      if (r <= limit) row[x] = 1;
    }
  }
}

// Thin curved streak drawn with a random walk; these look like foreground in
// intensity but are never part of the mask.
void paint_streak(cv::Mat& canvas, int size, Rng& rng) {
  std::uniform_real_distribution<double> pos(0.05 * size, 0.95 * size);
  std::uniform_real_distribution<double> heading(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> turn(-0.35, 0.35);
  std::uniform_int_distribution<int> steps(size / 6, size / 3);
  std::uniform_int_distribution<int> width(1, std::max(1, size / 48));
  double x = pos(rng), y = pos(rng), h = heading(rng);
  const int n = steps(rng);
  const int w = width(rng);
  for (int i = 0; i < n; ++i) {
    const double nx = x + std::cos(h), ny = y + std::sin(h);
    cv::line(canvas, cv::Point(static_cast<int>(x), static_cast<int>(y)), cv::Point(static_cast<int>(nx), static_cast<int>(ny)),
             cv::Scalar(1.0), w);
    x = nx;
    y = ny;
    h += turn(rng);
  }
}

ImageRecord make_record(int index, int canvas, Rng& rng) {
  const cv::Size size(canvas, canvas);
  std::uniform_int_distribution<int> n_blobs_dist(1, 3);

  cv::Mat mask;
  for (int attempt = 0;; ++attempt) {
    mask = cv::Mat::zeros(size, CV_8UC1);
    const int n_blobs = n_blobs_dist(rng);
    for (int i = 0; i < n_blobs; ++i) paint_blob(mask, draw_blob(canvas, rng));
    const double frac = cv::countNonZero(mask) / static_cast<double>(canvas * canvas);
    if (frac > 0.0 && frac < 0.9) break;
    if (attempt > 100) throw std::logic_error("synthetic: could not draw an admissible mask");
  }

  std::uniform_real_distribution<double> bg_dist(0.25, 0.45);
  std::uniform_real_distribution<double> contrast_dist(0.10, 0.22);
  std::bernoulli_distribution darker(0.5);
  std::uniform_int_distribution<int> n_streaks_dist(0, 3);
  std::normal_distribution<float> white(0.0f, 1.0f);
  std::gamma_distribution<float> speckle(4.0f, 0.25f);  // mean 1, variance 0.25

  const double bg = bg_dist(rng);
  const double contrast = contrast_dist(rng) * (darker(rng) ? -1.0 : 1.0);
  const double blur_sigma = std::max(0.8, canvas / 96.0);

  cv::Mat soft;
  mask.convertTo(soft, CV_32F);
  cv::GaussianBlur(soft, soft, cv::Size(0, 0), blur_sigma);

  cv::Mat artifacts = cv::Mat::zeros(size, CV_32F);
  const int n_streaks = n_streaks_dist(rng);
  for (int i = 0; i < n_streaks; ++i) paint_streak(artifacts, canvas, rng);
  cv::GaussianBlur(artifacts, artifacts, cv::Size(0, 0), blur_sigma * 0.7);

  // Low-frequency background texture.
  cv::Mat texture(size, CV_32F);
  for (int y = 0; y < canvas; ++y) {
    auto* row = texture.ptr<float>(y);
    for (int x = 0; x < canvas; ++x) row[x] = white(rng);
  }
  cv::GaussianBlur(texture, texture, cv::Size(0, 0), canvas / 24.0);
  cv::normalize(texture, texture, -0.08, 0.08, cv::NORM_MINMAX);

  cv::Mat noise(size, CV_32F);
  for (int y = 0; y < canvas; ++y) {
    auto* row = noise.ptr<float>(y);
    for (int x = 0; x < canvas; ++x) row[x] = speckle(rng);
  }
  cv::GaussianBlur(noise, noise, cv::Size(0, 0), 0.6);

  cv::Mat base = bg + contrast * soft + 0.9 * contrast * artifacts + texture;
  cv::Mat image = base.mul(noise);
  cv::Mat quantised;
  image.convertTo(quantised, CV_8U, 255.0);

  ImageRecord rec;
  char id[32];
  std::snprintf(id, sizeof(id), "synth_%05d", index);
  rec.id = id;
  rec.source = Source::synthetic;
  quantised.convertTo(rec.image, CV_32F, 1.0 / 255.0);
  rec.mask = mask;
  return rec;
}

}  // namespace

std::vector<ImageRecord> generate_synthetic(int n, int canvas, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate_synthetic: n must be >= 1");
  if (canvas < 64) throw std::invalid_argument("generate_synthetic: canvas must be >= 64");
  Rng master(seed);
  std::vector<ImageRecord> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(master());
    out.push_back(make_record(i, canvas, rng));
  }
  return out;
}

}  // namespace priorseg
