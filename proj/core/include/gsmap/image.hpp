#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "gsmap/common.hpp"

namespace gsmap {

/// Row-major interleaved raster of doubles. Channel count is a runtime
/// property; rendering and losses work on 1- and 3-channel images.
class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels, double fill = 0.0)
      : width_(width), height_(height), channels_(channels),
        data_(static_cast<std::size_t>(width) * height * channels, fill) {
    if (width <= 0 || height <= 0 || channels <= 0)
      throw input_error("Image: non-positive dimensions");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int y, int x, int c = 0) {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  double at(int y, int x, int c = 0) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Image& o) const {
    return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_;
  }

 private:
  int width_ = 0, height_ = 0, channels_ = 1;
  std::vector<double> data_;
};

/// 10*log10(1/MSE) between two images with values in [0,1]. Identical
/// images return +inf.
double psnr(const Image& a, const Image& b);

/// Binary PPM (P6), 8-bit RGB. Values are clamped to [0,1] and quantized
/// with round-half-up on save; load maps 0..255 back to [0,1].
void save_ppm(const Image& rgb, const std::filesystem::path& path);
Image load_ppm(const std::filesystem::path& path);

/// ".depth"/".sem" raster: magic "DPTH", u32 LE width, u32 LE height,
/// then width*height f32 LE, row-major. Used for both depth (meters) and
/// semantic codes.
void save_depth(const Image& gray, const std::filesystem::path& path);
Image load_depth(const std::filesystem::path& path);

}  // namespace gsmap
