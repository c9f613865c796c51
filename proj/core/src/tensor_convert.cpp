#include "priorseg/tensor_convert.hpp"

#include <cstring>
#include <stdexcept>

#include <torch/torch.h>

namespace priorseg {

torch::Tensor images_to_tensor(std::span<const cv::Mat> images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const int h = images[0].rows, w = images[0].cols;
  auto out = torch::empty({static_cast<int64_t>(images.size()), 1, h, w}, torch::kFloat32);
  auto* dst = out.data_ptr<float>();
  for (const auto& img : images) {
    if (img.type() != CV_32FC1 || img.rows != h || img.cols != w) {
      throw std::invalid_argument("images_to_tensor: images must be CV_32FC1 of equal size");
    }
    for (int y = 0; y < h; ++y) {
      std::memcpy(dst, img.ptr<float>(y), static_cast<size_t>(w) * sizeof(float));
      dst += w;
    }
  }
  return out;
}

torch::Tensor records_to_images(std::span<const ImageRecord> records) {
  std::vector<cv::Mat> imgs;
  imgs.reserve(records.size());
  for (const auto& r : records) imgs.push_back(r.image);
  return images_to_tensor(imgs);
}

torch::Tensor records_to_masks(std::span<const ImageRecord> records) {
  if (records.empty()) throw std::invalid_argument("records_to_masks: empty batch");
  const int h = records[0].rows(), w = records[0].cols();
  auto out = torch::empty({static_cast<int64_t>(records.size()), h, w}, torch::kInt64);
  auto* dst = out.data_ptr<int64_t>();
  for (const auto& r : records) {
    if (!r.mask) throw std::invalid_argument("record '" + r.id + "' has no mask");
    if (r.mask->rows != h || r.mask->cols != w) throw std::invalid_argument("records_to_masks: masks must be equal size");
    for (int y = 0; y < h; ++y) {
      const auto* row = r.mask->ptr<uint8_t>(y);
      for (int x = 0; x < w; ++x) *dst++ = row[x];
    }
  }
  return out;
}

cv::Mat tensor_to_mask(const torch::Tensor& labels) {
  TORCH_CHECK(labels.dim() == 2, "tensor_to_mask expects H x W, got ", labels.sizes());
  auto u8 = labels.to(torch::kUInt8).contiguous();
  cv::Mat out(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1);
  std::memcpy(out.data, u8.data_ptr<uint8_t>(), static_cast<size_t>(u8.numel()));
  return out;
}

cv::Mat tensor_to_float_mat(const torch::Tensor& grid) {
  TORCH_CHECK(grid.dim() == 2, "tensor_to_float_mat expects H x W, got ", grid.sizes());
  auto f = grid.detach().to(torch::kFloat32).contiguous();
  cv::Mat out(static_cast<int>(f.size(0)), static_cast<int>(f.size(1)), CV_32FC1);
  std::memcpy(out.data, f.data_ptr<float>(), static_cast<size_t>(f.numel()) * sizeof(float));
  return out;
}

}  // namespace priorseg
