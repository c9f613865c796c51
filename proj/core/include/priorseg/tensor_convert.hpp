#pragma once

#include <span>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/types.h>

#include "priorseg/dataio.hpp"

namespace priorseg {

// CV_32FC1 images of equal size -> B x 1 x H x W float32.
torch::Tensor images_to_tensor(std::span<const cv::Mat> images);
torch::Tensor records_to_images(std::span<const ImageRecord> records);
// Binary masks -> B x H x W int64 class indices. Every record must carry a mask.
torch::Tensor records_to_masks(std::span<const ImageRecord> records);

// H x W integer/bool tensor -> CV_8UC1 with the same values.
cv::Mat tensor_to_mask(const torch::Tensor& labels);
cv::Mat tensor_to_float_mat(const torch::Tensor& grid);

}  // namespace priorseg
