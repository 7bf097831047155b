#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "deblur/metrics.hpp"
#include "support/synthetic.hpp"

using namespace deblur;
using deblur::fixtures::random_tensor;

namespace {

// SSIM of two constant images: the variance/covariance terms cancel to 1.
double constant_ssim(double a, double b) {
  const double c1 = 0.01 * 0.01;
  return (2 * a * b + c1) / (a * a + b * b + c1);
}

// Direct (non-separable) windowed SSIM on a single plane, as an oracle.
double naive_ssim(const Tensor& a, const Tensor& b) {
  const int win = 11;
  double w[11][11];
  double total = 0.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
      total += w[i][j];
    }
  const double c1 = 1e-4, c2 = 9e-4;
  double sum = 0.0;
  int n = 0;
  for (int y = 0; y + win <= a.height(); ++y)
    for (int x = 0; x + win <= a.width(); ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double k = w[i][j] / total;
          const double va = a.at(0, y + i, x + j), vb = b.at(0, y + i, x + j);
          ma += k * va;
          mb += k * vb;
          saa += k * va * va;
          sbb += k * vb * vb;
          sab += k * va * vb;
        }
      const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
      sum += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      ++n;
    }
  return sum / n;
}

}  // namespace

TEST(Psnr, ConstantOffsetOracle) {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor(Shape{3, 20, 20}, rng, 0.0, 0.9);
  Tensor b = a;
  for (auto& v : b.vec()) v += 16.0f / 255.0f;
  EXPECT_NEAR(psnr(a, b), 20.0 * std::log10(255.0 / 16.0), 1e-3);
  EXPECT_NEAR(psnr(a, b), 24.0484, 1e-3);
}

TEST(Psnr, IdenticalImagesAreInfinite) {
  const Tensor a(Shape{3, 4, 4}, 0.2f);
  EXPECT_EQ(psnr(a, a), kInfinitePsnr);
  EXPECT_EQ(format_psnr(psnr(a, a)), "inf");
}

TEST(Psnr, MatchesMseDefinitionAndPeak) {
  std::mt19937_64 rng(2);
  const Tensor a = random_tensor(Shape{3, 7, 5}, rng);
  const Tensor b = random_tensor(Shape{3, 7, 5}, rng);
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  mse /= a.size();
  EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(1.0 / mse), 1e-9);
  EXPECT_NEAR(psnr(a, b, 255.0), 10.0 * std::log10(255.0 * 255.0 / mse), 1e-9);
  EXPECT_THROW(psnr(a, Tensor(Shape{3, 7, 4})), std::invalid_argument);
}

TEST(Ssim, SelfSimilarityIsOne) {
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor(Shape{3, 24, 30}, rng);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-6);
  EXPECT_NEAR(ssim(a, a, SsimMode::kChannelAverage), 1.0, 1e-6);
}

TEST(Ssim, ConstantImagesClosedForm) {
  const Tensor a(Shape{3, 16, 16}, 0.5f);
  const Tensor b(Shape{3, 16, 16}, 0.25f);
  EXPECT_NEAR(ssim(a, b), constant_ssim(0.5, 0.25), 1e-9);
  EXPECT_NEAR(ssim(a, b), 0.8001, 1e-3);
}

TEST(Ssim, MatchesDirectWindowedOracle) {
  std::mt19937_64 rng(4);
  const Tensor a = random_tensor(Shape{1, 19, 23}, rng);
  Tensor b = a;
  std::normal_distribution<float> n(0.0f, 0.1f);
  for (auto& v : b.vec()) v += n(rng);
  EXPECT_NEAR(ssim(a, b), naive_ssim(a, b), 1e-9);
}

TEST(Ssim, LumaModeUsesRec601Weights) {
  std::mt19937_64 rng(5);
  const Tensor a = random_tensor(Shape{3, 16, 16}, rng);
  const Tensor b = random_tensor(Shape{3, 16, 16}, rng);
  Tensor la(Shape{1, 16, 16}), lb(Shape{1, 16, 16});
  for (std::size_t i = 0; i < la.size(); ++i) {
    la[i] = 0.299 * a.channel(0)[i] + 0.587 * a.channel(1)[i] + 0.114 * a.channel(2)[i];
    lb[i] = 0.299 * b.channel(0)[i] + 0.587 * b.channel(1)[i] + 0.114 * b.channel(2)[i];
  }
  EXPECT_NEAR(ssim(a, b), naive_ssim(la, lb), 1e-6);
}

TEST(Ssim, RejectsImagesSmallerThanTheWindow) {
  EXPECT_THROW(ssim(Tensor(Shape{3, 10, 40}), Tensor(Shape{3, 10, 40})), std::invalid_argument);
}

TEST(RegionMetrics, SplitsErrorByMask) {
  Tensor a(Shape{3, 16, 16}, 0.5f);
  Tensor b = a;
  BinaryMask m(16, 16);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 8; ++x) m.set(y, x, true);
  // Error of 0.1 inside the mask, 0.01 outside.
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) b.at(c, y, x) += m(y, x) ? 0.1f : 0.01f;
  const RegionReports r = region_metrics(b, a, m);
  ASSERT_TRUE(r.fg && r.bg);
  EXPECT_NEAR(r.fg->psnr_db, 20.0, 1e-4);
  EXPECT_NEAR(r.bg->psnr_db, 40.0, 1e-3);
  EXPECT_EQ(r.fg->n_pixels, 32u);
  EXPECT_EQ(r.bg->n_pixels, 224u);
  EXPECT_FALSE(r.fg->ssim.has_value());
  EXPECT_TRUE(r.global.ssim.has_value());
  const double mse = (32 * 0.01 + 224 * 1e-4) / 256.0;
  EXPECT_NEAR(r.global.psnr_db, -10.0 * std::log10(mse), 1e-3);
}

TEST(RegionMetrics, EmptyRegionsHaveNoReport) {
  const Tensor a(Shape{3, 12, 12}, 0.5f);
  EXPECT_FALSE(region_metrics(a, a, BinaryMask(12, 12)).fg.has_value());
  EXPECT_FALSE(region_metrics(a, a, BinaryMask(12, 12, 1)).bg.has_value());
}

TEST(Csv, FormatsInfinityAndMissingSsim) {
  std::vector<MetricRow> rows;
  rows.push_back({"a", {kInfinitePsnr, 1.0, Region::kGlobal, 4}});
  rows.push_back({"a", {25.5, std::nullopt, Region::kForeground, 1}});
  std::ostringstream out;
  write_metrics_csv(out, rows);
  EXPECT_EQ(out.str(),
            "image_id,region,psnr_db,ssim,n_pixels\n"
            "a,global,inf,1.000000,4\n"
            "a,fg,25.500000,,1\n");
}

TEST(Aggregate, PerRegionMeans) {
  std::vector<MetricRow> rows{{"a", {20.0, 0.5, Region::kGlobal, 10}},
                              {"b", {30.0, 0.7, Region::kGlobal, 20}},
                              {"a", {10.0, std::nullopt, Region::kForeground, 3}}};
  const auto agg = aggregate_rows(rows);
  ASSERT_EQ(agg.size(), 2u);
  EXPECT_EQ(agg[0].image_id, "mean");
  EXPECT_EQ(agg[0].report.region, Region::kGlobal);
  EXPECT_DOUBLE_EQ(agg[0].report.psnr_db, 25.0);
  EXPECT_DOUBLE_EQ(*agg[0].report.ssim, 0.6);
  EXPECT_EQ(agg[0].report.n_pixels, 30u);
  EXPECT_EQ(agg[1].report.region, Region::kForeground);
  EXPECT_FALSE(agg[1].report.ssim.has_value());
}

TEST(Iou, OverlapRatio) {
  BinaryMask a(4, 4), b(4, 4);
  for (int x = 0; x < 4; ++x) {
    a.set(0, x, true);
    a.set(1, x, true);
    b.set(1, x, true);
    b.set(2, x, true);
  }
  EXPECT_DOUBLE_EQ(mask_iou(a, b), 4.0 / 12.0);
  EXPECT_DOUBLE_EQ(mask_iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(mask_iou(BinaryMask(3, 3), BinaryMask(3, 3)), 1.0);
  EXPECT_THROW(mask_iou(a, BinaryMask(3, 4)), std::invalid_argument);
}
