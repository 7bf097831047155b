#pragma once

// Supervised human-aware attention: a small conv/transposed-conv subnet maps
// the blurred image to per-pixel logits Y, A = sigmoid(Y) is trained against
// the binary foreground mask, and A gates encoder features into FG and BG
// streams (A * H and (1 - A) * H).

#include <stdexcept>
#include <string>
#include <utility>

#include "deblur/autograd.hpp"
#include "deblur/image.hpp"

namespace deblur {

struct AttentionConfig {
  /// Widths of the three conv + pool stages; the transposed-conv path
  /// mirrors them back (w3 -> w2 -> w1 -> w1).
  int width1 = 32;
  int width2 = 64;
  int width3 = 128;
  int kernel = 3;
  int image_channels = 3;

  void validate() const;
  bool operator==(const AttentionConfig&) const = default;
};

/// Parameter names all start with this prefix.
inline constexpr const char* kAttentionPrefix = "attention.";

/// Registers the subnet's parameters (zero-valued) in `params`.
void add_attention_parameters(ParameterSet& params, const AttentionConfig& config);

/// Input height and width must be multiples of this (three 2x poolings).
inline constexpr int kAttentionDivisor = 8;

struct AttentionMap {
  Tensor logits;  // 1 x H x W
  Tensor map;     // sigmoid(logits), strictly inside (0,1)
};

/// Differentiable forward; returns A and optionally the logits node.
Var attention_forward(ParameterSet& params, Var image, Var* logits = nullptr);

/// Inference forward on a plain image.
AttentionMap attention_forward(const ParameterSet& params, const ImagePlane& image);

/// Mean over pixels of (G - A)^2. `grad` receives 2 (A - G) / n.
template <typename T>
T attention_loss(const BasicTensor<T>& attention, const BinaryMask& mask, BasicTensor<T>* grad = nullptr) {
  if (attention.channels() != 1 || attention.height() != mask.height() || attention.width() != mask.width())
    throw std::invalid_argument("attention_loss: map " + attention.shape().str() + " vs mask " +
                                std::to_string(mask.height()) + "x" + std::to_string(mask.width()));
  const std::size_t n = attention.size();
  if (n == 0) throw std::invalid_argument("attention_loss: empty map");
  if (grad) *grad = BasicTensor<T>(attention.shape());
  double acc = 0.0;
  const T scale = static_cast<T>(2.0 / static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const T r = attention[i] - (mask[i] ? T(1) : T(0));
    acc += static_cast<double>(r) * static_cast<double>(r);
    if (grad) (*grad)[i] = scale * r;
  }
  return static_cast<T>(acc / static_cast<double>(n));
}

namespace ops {
Var attention_loss(Var attention, const BinaryMask& mask);
}

struct GatedFeatures {
  Tensor fg;
  Tensor bg;
};

/// Resamples A (area average) to the feature resolution, then returns
/// (A * H, (1 - A) * H) channel by channel.
GatedFeatures gate_features(const Tensor& features, const Tensor& attention);

/// Differentiable gating; first is the FG stream, second the BG stream.
std::pair<Var, Var> gate_features(Var features, Var attention);

/// Integer area-resampling factor from an attention map to a feature map.
int attention_resample_factor(const Shape& attention, const Shape& features);

}  // namespace deblur
