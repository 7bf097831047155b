#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "deblur/tensor.hpp"

namespace deblur {

/// Real-valued image, channel-major, intensities nominally in [0,1].
using ImagePlane = Tensor;

/// {0,1}-valued raster at image resolution.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width, std::uint8_t fill = 0);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return values_.size(); }

  std::uint8_t operator()(int y, int x) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  void set(int y, int x, bool on) { values_[static_cast<std::size_t>(y) * width_ + x] = on ? 1 : 0; }
  std::uint8_t operator[](std::size_t i) const { return values_[i]; }
  const std::vector<std::uint8_t>& values() const { return values_; }

  std::size_t count() const;

  /// 1 x H x W tensor holding the mask as 0/1 reals.
  template <typename T = float>
  BasicTensor<T> as_tensor() const {
    BasicTensor<T> t(1, height_, width_);
    for (std::size_t i = 0; i < values_.size(); ++i) t[i] = values_[i] ? T(1) : T(0);
    return t;
  }

  /// Thresholds a single-channel tensor at `threshold` (value >= threshold -> 1).
  static BinaryMask from_tensor(const Tensor& t, float threshold = 0.5f);

  bool operator==(const BinaryMask&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> values_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loads an 8-bit PNG as a 3-channel image in [0,1]. Gray inputs are
/// replicated, alpha is dropped.
ImagePlane load_png(const std::filesystem::path& path);

/// Writes a 1- or 3-channel image as 8-bit PNG, clipping to [0,1].
void save_png(const std::filesystem::path& path, const ImagePlane& image);

void save_mask_png(const std::filesystem::path& path, const BinaryMask& mask);

/// Clip every value to [0,1].
ImagePlane clip01(ImagePlane image);

/// Round-trip through 8-bit quantization, as a PNG save/load would.
ImagePlane quantize8(const ImagePlane& image);

}  // namespace deblur
