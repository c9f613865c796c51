#include "priorseg/metrics.hpp"

#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace priorseg {
namespace {

struct Overlap {
  double pred = 0, gt = 0, both = 0;
};

Overlap count_overlap(const cv::Mat& pred, const cv::Mat& gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("metric shape mismatch: prediction " + std::to_string(pred.rows) + "x" +
                                std::to_string(pred.cols) + " vs ground truth " + std::to_string(gt.rows) + "x" +
                                std::to_string(gt.cols));
  }
  if (pred.type() != CV_8UC1 || gt.type() != CV_8UC1) throw std::invalid_argument("metrics expect CV_8UC1 masks");
  Overlap o;
  o.pred = cv::countNonZero(pred);
  o.gt = cv::countNonZero(gt);
  cv::Mat inter;
  cv::bitwise_and(pred != 0, gt != 0, inter);
  o.both = cv::countNonZero(inter);
  return o;
}

std::string fmt(double v, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

}  // namespace

double dice(const cv::Mat& pred, const cv::Mat& gt) {
  const auto o = count_overlap(pred, gt);
  if (o.pred + o.gt == 0) return 1.0;
  return 2.0 * o.both / (o.pred + o.gt);
}

double iou(const cv::Mat& pred, const cv::Mat& gt) {
  const auto o = count_overlap(pred, gt);
  const double uni = o.pred + o.gt - o.both;
  if (uni == 0) return 1.0;
  return o.both / uni;
}

nlohmann::json MetricsReport::to_json() const {
  auto images = nlohmann::json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) images.push_back({{"id", ids[i]}, {"dice", dice[i]}, {"iou", iou[i]}});
  return {{"mean_dice", mean_dice}, {"mean_iou", mean_iou}, {"count", count}, {"fingerprint", fingerprint}, {"images", images}};
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "id,dice,iou\n";
  for (std::size_t i = 0; i < ids.size(); ++i) os << ids[i] << ',' << fmt(dice[i], 6) << ',' << fmt(iou[i], 6) << '\n';
  os << "mean," << fmt(mean_dice, 6) << ',' << fmt(mean_iou, 6) << '\n';
  return os.str();
}

std::string MetricsReport::summary() const {
  std::ostringstream os;
  os << "images: " << count << '\n';
  os << "  Dice    IoU\n";
  os << "  " << fmt(mean_dice, 2) << "   " << fmt(mean_iou, 2) << '\n';
  return os.str();
}

MetricsReport evaluate(const MaskPredictor& predictor, const std::vector<ImageRecord>& records, nlohmann::json fingerprint) {
  MetricsReport report;
  report.fingerprint = std::move(fingerprint);
  for (const auto& rec : records) {
    if (!rec.mask) throw std::invalid_argument("evaluate: record '" + rec.id + "' has no ground-truth mask");
    const cv::Mat pred = predictor(rec);
    report.ids.push_back(rec.id);
    report.dice.push_back(100.0 * dice(pred, *rec.mask));
    report.iou.push_back(100.0 * iou(pred, *rec.mask));
  }
  report.count = records.size();
  if (report.count > 0) {
    report.mean_dice = std::accumulate(report.dice.begin(), report.dice.end(), 0.0) / static_cast<double>(report.count);
    report.mean_iou = std::accumulate(report.iou.begin(), report.iou.end(), 0.0) / static_cast<double>(report.count);
  }
  return report;
}

MetricsReport evaluate(SegModelHandle& handle, const std::vector<ImageRecord>& records) {
  nlohmann::json fp = {{"model", handle.spec_json()},
                       {"evaluation_resolution", "native"},
                       {"upsampling", "nearest"},
                       {"both_empty", 1.0}};
  return evaluate([&handle](const ImageRecord& r) { return predict(handle, r.image); }, records, std::move(fp));
}

}  // namespace priorseg
