#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deblur/data.hpp"
#include "deblur/losses.hpp"
#include "deblur/metrics.hpp"
#include "deblur/network.hpp"
#include "deblur/optimizer.hpp"

namespace deblur {

struct LossWeights {
  float attention = 1.0f;
  float fg = 1.0f;
  float bg = 1.0f;
  float primary = 1.0f;
};

struct ScaleLoss {
  double attention = 0.0;
  double fg = 0.0;
  double bg = 0.0;
  double primary = 0.0;
};

struct LossBreakdown {
  std::vector<ScaleLoss> per_scale;  // coarse to fine
  double total = 0.0;

  /// Term sums over scales (unweighted).
  ScaleLoss summed() const;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 10;
  int crop = 256;
  int pretrain_iters = 70000;
  int epochs = 500;
  /// When positive, overrides `epochs` as the number of optimizer steps.
  int max_steps = 0;
  LossWeights weights;
  double fg_batch_fraction = 0.5;
  std::uint64_t seed = 0;
  /// Checkpoint period in steps; 0 writes only the final checkpoint.
  int checkpoint_every = 0;
  bool freeze_attention = false;
  MaskNormalization mask_normalization = MaskNormalization::kAllPixels;

  void validate() const;
  /// Optimizer steps for a dataset of `n_samples` images.
  std::int64_t total_steps(std::size_t n_samples) const;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat `key = value` text; '#' starts a comment. Unknown or repeated keys
/// are errors; absent keys keep their defaults.
TrainConfig parse_train_config(std::istream& in);
TrainConfig load_train_config(const std::filesystem::path& path);
std::vector<std::string> train_config_keys();

struct LossTerms {
  Var total = nullptr;
  LossBreakdown breakdown;
};

/// Weighted sum over scales of attention, FG, BG and primary terms. Terms
/// whose head is absent from the outputs are skipped.
LossTerms total_loss(const std::vector<ScaleOutput>& outputs, std::span<const ImagePlane> sharp_pyramid,
                     std::span<const BinaryMask> mask_pyramid, const LossWeights& weights,
                     MaskNormalization norm = MaskNormalization::kAllPixels);

/// Draws balanced mini-batches: round(fg_batch_fraction * batch_size) crops
/// are forced to contain foreground (from samples that have boxes).
class BatchSampler {
 public:
  BatchSampler(std::span<const AnnotatedSample> samples, int batch_size, int crop, double fg_fraction,
               std::uint64_t seed);

  std::vector<Patch> next();

  std::mt19937_64& rng() { return rng_; }
  std::string rng_state() const;
  void set_rng_state(const std::string& state);

 private:
  std::span<const AnnotatedSample> samples_;
  std::vector<std::size_t> with_fg_;
  int batch_size_;
  int crop_;
  int n_fg_;
  std::mt19937_64 rng_;
};

struct StepRecord {
  std::int64_t step = 0;
  LossBreakdown loss;  // mean over the batch
};

/// One log line: step, per-term losses summed over scales, total.
std::string format_step_log(const StepRecord& record);

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  const LoadedCheckpoint* resume = nullptr;
  std::ostream* log = nullptr;
  std::span<const AnnotatedSample> validation;
  /// Train the attention subnet from its current (possibly random) state
  /// instead of requiring pretrained weights.
  bool joint_from_scratch = false;
  bool attention_pretrained = false;
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  std::vector<StepRecord> history;
  std::vector<std::filesystem::path> checkpoints;
};

/// Trains the attention subnet alone against the foreground masks. Only
/// parameters under the attention prefix change; returns them.
struct PretrainResult {
  ParameterSet attention;
  std::vector<double> loss_history;
};
PretrainResult pretrain_attention(Model& model, std::span<const AnnotatedSample> dataset, const TrainConfig& config,
                                  const TrainOptions& options = {});

TrainResult train(Model& model, std::span<const AnnotatedSample> dataset, const TrainConfig& config,
                  const TrainOptions& options = {});

/// Per-image rows (global, plus fg/bg where the sample has boxes) followed by
/// the aggregate rows. Scores the finest-scale output clipped to [0,1].
std::vector<MetricRow> evaluate(const Model& model, std::span<const AnnotatedSample> dataset,
                                SsimMode mode = SsimMode::kLuma);

/// As evaluate(), with precomputed predictions aligned with `dataset`.
std::vector<MetricRow> evaluate_predictions(std::span<const AnnotatedSample> dataset,
                                            std::span<const ImagePlane> predictions, SsimMode mode = SsimMode::kLuma);

/// Crops blurred, sharp and mask of a sample to the top-left region whose
/// sides are multiples of `divisor`.
AnnotatedSample crop_sample(const AnnotatedSample& sample, int divisor);

}  // namespace deblur
