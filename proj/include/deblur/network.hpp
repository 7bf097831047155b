#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deblur/attention.hpp"
#include "deblur/autograd.hpp"
#include "deblur/image.hpp"
#include "deblur/optimizer.hpp"

namespace deblur {

/// Which decoder heads exist. The primary head is always present; the
/// reduced modes are the single-branch ablations.
enum class BranchMode { kAll, kFgOnly, kBgOnly, kPrimaryOnly };

const char* branch_mode_name(BranchMode mode);
BranchMode parse_branch_mode(const std::string& name);

struct NetworkConfig {
  int base_channels = 32;
  /// Three residual units per resolution level, a stride-2 reduction between levels.
  int n_residual_units = 9;
  int decoder_blocks = 3;
  int scales = 3;
  int input_channels = 6;
  int image_channels = 3;
  bool use_attention = true;
  BranchMode branches = BranchMode::kAll;
  /// Add encoder shortcuts to the FG/BG heads as well as the primary head.
  bool domain_shortcuts = true;
  /// Decoders predict a residual that is added to the blurred input.
  bool global_residual = false;
  AttentionConfig attention;

  static constexpr int kUnitsPerLevel = 3;

  int levels() const { return n_residual_units / kUnitsPerLevel; }
  int channels_at(int level) const { return base_channels << level; }
  /// Spatial reduction of the encoder output relative to its input.
  int reduction() const { return 1 << (levels() - 1); }
  /// Input dimensions at the finest scale must be multiples of this.
  int input_divisor() const;
  bool has_fg() const { return branches == BranchMode::kAll || branches == BranchMode::kFgOnly; }
  bool has_bg() const { return branches == BranchMode::kAll || branches == BranchMode::kBgOnly; }

  void validate() const;
  bool operator==(const NetworkConfig&) const = default;
};

enum class InitMode { kRandom, kZero };

struct Model {
  NetworkConfig config;
  ParameterSet params;
};

/// Registers every parameter for `config`. The parameter set does not
/// depend on `config.scales`: one set serves every scale.
Model make_model(const NetworkConfig& config, std::uint64_t seed, InitMode mode = InitMode::kRandom);

/// Fan-in scaled normal initialization (zero biases) of every parameter
/// whose name starts with `prefix`.
void initialize_parameters(ParameterSet& params, std::uint64_t seed, const std::string& prefix = "");

// ---------------------------------------------------------------------------
// differentiable building blocks

struct EncoderOutput {
  Var features;             // H, at 1/reduction() resolution
  std::vector<Var> skips;   // feature at the end of each resolution level; skips.back() == features
};

EncoderOutput encode(ParameterSet& params, const NetworkConfig& config, Var input);

struct DecoderOutput {
  Var image;
  std::vector<Var> intermediates;  // D^0 .. D^L, D^0 is the decoder input
};

/// Decoder branch names used as parameter prefixes.
inline constexpr const char* kFgBranch = "decoder_fg";
inline constexpr const char* kBgBranch = "decoder_bg";
inline constexpr const char* kPrimaryBranch = "decoder_pri";

/// One FG or BG head. `image` is the scale's blurred input, used only with
/// global_residual.
DecoderOutput decode_domain(ParameterSet& params, const NetworkConfig& config, const std::string& branch,
                            Var features, std::span<const Var> skips, Var image);

/// Primary head; block l consumes the 1x1-compressed concatenation of the
/// level l-1 intermediates of every auxiliary head and its own.
DecoderOutput decode_primary(ParameterSet& params, const NetworkConfig& config, Var features,
                             std::span<const std::vector<Var>> aux_intermediates, std::span<const Var> skips,
                             Var image);

struct ScaleOutput {
  Var sharp = nullptr;
  Var fg = nullptr;
  Var bg = nullptr;
  Var attention = nullptr;
  Var gated_fg = nullptr;
  Var gated_bg = nullptr;
  Var features = nullptr;
};

/// Coarse-to-fine forward over `config.scales` levels (coarse first).
std::vector<ScaleOutput> forward_full(ParameterSet& params, const NetworkConfig& config, Tape& tape,
                                      const ImagePlane& blurred);

// ---------------------------------------------------------------------------
// inference

struct ScaleResult {
  ImagePlane sharp;
  std::optional<ImagePlane> fg;
  std::optional<ImagePlane> bg;
  std::optional<Tensor> attention;
};

std::vector<ScaleResult> infer(const Model& model, const ImagePlane& blurred);

/// Largest top-left region whose dimensions satisfy input_divisor().
ImagePlane crop_to_divisor(const ImagePlane& image, int divisor);

// ---------------------------------------------------------------------------
// checkpoints

/// Little-endian float32 blob of every parameter in registration order.
std::vector<std::uint8_t> serialize_parameters(const ParameterSet& params);

struct CheckpointMeta {
  std::int64_t iteration = 0;
  std::optional<double> loss;
  std::string rng_state;
};

inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Model& model, const CheckpointMeta& meta,
                     const OptimizerState* optimizer = nullptr);

struct LoadedCheckpoint {
  Model model;
  CheckpointMeta meta;
  std::optional<OptimizerState> optimizer;
};

/// Reads a checkpoint. With `expected` set, any config difference is an error.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<NetworkConfig>& expected = std::nullopt);

std::string config_to_json(const NetworkConfig& config);
NetworkConfig config_from_json(const std::string& text);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace deblur
