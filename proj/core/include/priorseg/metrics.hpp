#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "priorseg/dataio.hpp"
#include "priorseg/segmodel.hpp"

namespace priorseg {

// Binary masks (CV_8UC1, nonzero = foreground). Both empty -> 1.0.
double dice(const cv::Mat& pred, const cv::Mat& gt);
double iou(const cv::Mat& pred, const cv::Mat& gt);

struct MetricsReport {
  std::vector<std::string> ids;
  std::vector<double> dice;  // percentages
  std::vector<double> iou;   // percentages
  double mean_dice = 0;
  double mean_iou = 0;
  std::size_t count = 0;
  nlohmann::json fingerprint = nlohmann::json::object();

  nlohmann::json to_json() const;
  // One row per image followed by a "mean" row.
  std::string to_csv() const;
  // Two-column Dice/IoU summary.
  std::string summary() const;
};

using MaskPredictor = std::function<cv::Mat(const ImageRecord&)>;

// Predictions must come back at the record's native resolution.
MetricsReport evaluate(const MaskPredictor& predictor, const std::vector<ImageRecord>& records,
                       nlohmann::json fingerprint = nlohmann::json::object());
MetricsReport evaluate(SegModelHandle& handle, const std::vector<ImageRecord>& records);

}  // namespace priorseg
