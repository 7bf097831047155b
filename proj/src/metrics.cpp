#include "deblur/metrics.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

namespace deblur {

namespace {

double psnr_from_mse(double mse, double peak) {
  if (mse <= 0.0) return kInfinitePsnr;
  return 10.0 * std::log10(peak * peak / mse);
}

std::vector<double> luma(const ImagePlane& img) {
  const std::size_t plane = img.shape().plane();
  std::vector<double> out(plane);
  if (img.channels() == 1) {
    for (std::size_t i = 0; i < plane; ++i) out[i] = img[i];
    return out;
  }
  if (img.channels() != 3) throw std::invalid_argument("ssim: expected 1 or 3 channels");
  const float* r = img.channel(0);
  const float* g = img.channel(1);
  const float* b = img.channel(2);
  for (std::size_t i = 0; i < plane; ++i) out[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  return out;
}

std::array<double, kSsimWindow> gaussian_window() {
  std::array<double, kSsimWindow> w{};
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    w[i] = std::exp(-(d * d) / (2.0 * kSsimSigma * kSsimSigma));
    sum += w[i];
  }
  for (auto& v : w) v /= sum;
  return w;
}

// Separable 'valid' filtering of a height x width plane.
std::vector<double> filter_valid(const std::vector<double>& src, int height, int width,
                                 const std::array<double, kSsimWindow>& w) {
  const int oh = height - kSsimWindow + 1;
  const int ow = width - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(height) * ow);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kSsimWindow; ++k) acc += w[k] * src[static_cast<std::size_t>(y) * width + x + k];
      tmp[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kSsimWindow; ++k) acc += w[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  return out;
}

double ssim_plane(const std::vector<double>& a, const std::vector<double>& b, int height, int width) {
  const auto w = gaussian_window();
  const std::size_t n = a.size();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = filter_valid(a, height, width, w);
  const auto mu_b = filter_valid(b, height, width, w);
  const auto e_aa = filter_valid(aa, height, width, w);
  const auto e_bb = filter_valid(bb, height, width, w);
  const auto e_ab = filter_valid(ab, height, width, w);

  const double c1 = (kSsimK1 * 1.0) * (kSsimK1 * 1.0);
  const double c2 = (kSsimK2 * 1.0) * (kSsimK2 * 1.0);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i];
    const double mb = mu_b[i];
    const double va = e_aa[i] - ma * ma;
    const double vb = e_bb[i] - mb * mb;
    const double cov = e_ab[i] - ma * mb;
    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

}  // namespace

double psnr(const ImagePlane& a, const ImagePlane& b, double peak) {
  require_same_shape(a.shape(), b.shape(), "psnr");
  if (peak <= 0.0) throw std::invalid_argument("psnr: peak must be positive");
  if (a.empty()) throw std::invalid_argument("psnr: empty image");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return psnr_from_mse(acc / static_cast<double>(a.size()), peak);
}

double ssim(const ImagePlane& a, const ImagePlane& b, SsimMode mode) {
  require_same_shape(a.shape(), b.shape(), "ssim");
  if (a.height() < kSsimWindow || a.width() < kSsimWindow)
    throw std::invalid_argument("ssim: image " + a.shape().str() + " smaller than the 11x11 window");
  if (mode == SsimMode::kLuma) return ssim_plane(luma(a), luma(b), a.height(), a.width());

  const std::size_t plane = a.shape().plane();
  double sum = 0.0;
  for (int c = 0; c < a.channels(); ++c) {
    std::vector<double> pa(a.channel(c), a.channel(c) + plane);
    std::vector<double> pb(b.channel(c), b.channel(c) + plane);
    sum += ssim_plane(pa, pb, a.height(), a.width());
  }
  return sum / a.channels();
}

const char* region_name(Region region) {
  switch (region) {
    case Region::kGlobal:
      return "global";
    case Region::kForeground:
      return "fg";
    case Region::kBackground:
      return "bg";
  }
  return "?";
}

RegionReports region_metrics(const ImagePlane& a, const ImagePlane& b, const BinaryMask& mask, SsimMode mode) {
  require_same_shape(a.shape(), b.shape(), "region_metrics");
  if (mask.height() != a.height() || mask.width() != a.width())
    throw std::invalid_argument("region_metrics: mask size does not match image " + a.shape().str());

  const std::size_t plane = a.shape().plane();
  double err_fg = 0.0;
  double err_bg = 0.0;
  for (int c = 0; c < a.channels(); ++c) {
    const float* pa = a.channel(c);
    const float* pb = b.channel(c);
    for (std::size_t i = 0; i < plane; ++i) {
      const double d = static_cast<double>(pa[i]) - pb[i];
      (mask[i] ? err_fg : err_bg) += d * d;
    }
  }
  const std::size_t n_fg = mask.count();
  const std::size_t n_bg = plane - n_fg;

  RegionReports r;
  r.global.region = Region::kGlobal;
  r.global.n_pixels = plane;
  r.global.psnr_db = psnr_from_mse((err_fg + err_bg) / static_cast<double>(plane * a.channels()), 1.0);
  r.global.ssim = ssim(a, b, mode);
  if (n_fg > 0)
    r.fg = MetricReport{psnr_from_mse(err_fg / static_cast<double>(n_fg * a.channels()), 1.0), std::nullopt,
                        Region::kForeground, n_fg};
  if (n_bg > 0)
    r.bg = MetricReport{psnr_from_mse(err_bg / static_cast<double>(n_bg * a.channels()), 1.0), std::nullopt,
                        Region::kBackground, n_bg};
  return r;
}

std::vector<MetricRow> aggregate_rows(const std::vector<MetricRow>& rows, const std::string& image_id) {
  struct Acc {
    double psnr = 0.0;
    double ssim = 0.0;
    std::size_t n_ssim = 0;
    std::size_t n_rows = 0;
    std::size_t pixels = 0;
  };
  std::map<Region, Acc> acc;
  for (const auto& row : rows) {
    Acc& a = acc[row.report.region];
    a.psnr += row.report.psnr_db;
    if (row.report.ssim) {
      a.ssim += *row.report.ssim;
      ++a.n_ssim;
    }
    ++a.n_rows;
    a.pixels += row.report.n_pixels;
  }
  std::vector<MetricRow> out;
  for (Region region : {Region::kGlobal, Region::kForeground, Region::kBackground}) {
    auto it = acc.find(region);
    if (it == acc.end()) continue;
    const Acc& a = it->second;
    MetricRow row{image_id, {}};
    row.report.region = region;
    row.report.psnr_db = a.psnr / static_cast<double>(a.n_rows);
    if (a.n_ssim > 0) row.report.ssim = a.ssim / static_cast<double>(a.n_ssim);
    row.report.n_pixels = a.pixels;
    out.push_back(row);
  }
  return out;
}

std::string format_psnr(double psnr_db) {
  if (std::isinf(psnr_db) && psnr_db > 0) return "inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", psnr_db);
  return buf;
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) throw std::invalid_argument("mask_iou: size mismatch");
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << "image_id,region,psnr_db,ssim,n_pixels\n";
  char buf[64];
  for (const auto& row : rows) {
    out << row.image_id << ',' << region_name(row.report.region) << ',' << format_psnr(row.report.psnr_db) << ',';
    if (row.report.ssim) {
      std::snprintf(buf, sizeof buf, "%.6f", *row.report.ssim);
      out << buf;
    }
    out << ',' << row.report.n_pixels << '\n';
  }
}

}  // namespace deblur
