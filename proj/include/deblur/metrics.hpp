#pragma once

#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "deblur/image.hpp"

namespace deblur {

/// Returned by psnr() when the two images are identical.
inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

/// 10 log10(peak^2 / MSE) over all pixels and channels.
double psnr(const ImagePlane& a, const ImagePlane& b, double peak = 1.0);

enum class SsimMode {
  kLuma,            // 3-channel inputs are converted with 0.299/0.587/0.114 first
  kChannelAverage,  // SSIM per channel, then averaged
};

/// Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, range 1) over
/// the valid window positions.
double ssim(const ImagePlane& a, const ImagePlane& b, SsimMode mode = SsimMode::kLuma);

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

enum class Region { kGlobal, kForeground, kBackground };
const char* region_name(Region region);

struct MetricReport {
  double psnr_db = 0.0;
  std::optional<double> ssim;  // global rows only
  Region region = Region::kGlobal;
  std::size_t n_pixels = 0;
};

struct RegionReports {
  std::optional<MetricReport> fg;
  std::optional<MetricReport> bg;
  MetricReport global;
};

/// PSNR restricted to mask==1 (fg) and mask==0 (bg) pixels plus the
/// global PSNR/SSIM. An empty region gives no report.
RegionReports region_metrics(const ImagePlane& a, const ImagePlane& b, const BinaryMask& mask,
                             SsimMode mode = SsimMode::kLuma);

struct MetricRow {
  std::string image_id;
  MetricReport report;
};

/// Per-region arithmetic means of the rows, labelled `image_id`.
std::vector<MetricRow> aggregate_rows(const std::vector<MetricRow>& rows, const std::string& image_id = "mean");

/// CSV with header image_id,region,psnr_db,ssim,n_pixels; infinite PSNR is
/// written as "inf" and a missing SSIM as an empty field.
void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows);

std::string format_psnr(double psnr_db);

/// Intersection over union of two masks; 1 when both are empty.
double mask_iou(const BinaryMask& a, const BinaryMask& b);

}  // namespace deblur
