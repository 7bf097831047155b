#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deblur/image.hpp"

namespace deblur {

/// Half-open pixel rectangle [x0,x1) x [y0,y1).
struct BoundingBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int area() const { return (x1 > x0 && y1 > y0) ? (x1 - x0) * (y1 - y0) : 0; }
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  /// Intersection with [0,width) x [0,height); may be degenerate.
  BoundingBox clipped(int width, int height) const;
  bool operator==(const BoundingBox&) const = default;
};

struct AnnotatedSample {
  ImagePlane blurred;
  ImagePlane sharp;
  std::vector<BoundingBox> boxes;  // clipped, non-degenerate
  BinaryMask mask;
  std::string source_id;

  bool has_foreground() const { return !boxes.empty(); }
};

enum class Split { kTrain, kTest };
const char* split_name(Split split);

/// Dataset problems (layout, naming, annotation records). The message
/// always names the offending path.
class DataError : public std::runtime_error {
 public:
  DataError(const std::filesystem::path& path, const std::string& what)
      : std::runtime_error(path.string() + ": " + what), path_(path) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Reads root/<split>/{blur,sharp,annotations}. Samples come back sorted
/// by file name; a pair without an annotation file gets no boxes and an
/// all-zero mask.
std::vector<AnnotatedSample> load_dataset(const std::filesystem::path& root, Split split);

struct Annotation {
  std::string image;
  int width = 0;
  int height = 0;
  std::vector<BoundingBox> boxes;
};

Annotation read_annotation(const std::filesystem::path& path);
void write_annotation(const std::filesystem::path& path, const Annotation& annotation);

/// Union of the boxes clipped to the image. Boxes that are empty after
/// clipping are dropped; boxes with negative extent are rejected.
BinaryMask rasterize_mask(std::span<const BoundingBox> boxes, int width, int height);

struct BlurPair {
  ImagePlane blurred;
  ImagePlane sharp;
};

/// Per-pixel mean of an odd-length window of frames; the central frame is
/// the sharp target.
BlurPair synthesize_blur(std::span<const ImagePlane> frames);

/// Block-mean downsampling by an integer factor.
ImagePlane area_downsample(const ImagePlane& image, int factor);
/// Pixel replication by an integer factor (adjoint-like inverse of area_downsample).
ImagePlane area_upsample(const ImagePlane& image, int factor);

/// Coarse-to-fine pyramid; the last element is the input itself.
/// Dimensions must be divisible by 2^(scales-1) * 4.
std::vector<ImagePlane> build_pyramid(const ImagePlane& image, int scales);

/// Block rule: output is 1 iff the block mean is >= 0.5.
BinaryMask downsample_mask(const BinaryMask& mask, int factor);

/// Mask pyramid aligned with build_pyramid (coarse to fine).
std::vector<BinaryMask> build_mask_pyramid(const BinaryMask& mask, int scales);

struct Patch {
  ImagePlane blurred;
  ImagePlane sharp;
  BinaryMask mask;
  int x = 0;
  int y = 0;
};

/// Rejection attempts before falling back to a crop centred on a box.
inline constexpr int kPatchRetries = 32;

Patch crop_patch(const AnnotatedSample& sample, int x, int y, int size);

/// Random square crop taken at the same location from all three rasters.
/// With `require_fg` the mask crop is guaranteed to contain a foreground pixel.
Patch sample_patch(const AnnotatedSample& sample, int size, std::mt19937_64& rng, bool require_fg);

}  // namespace deblur
