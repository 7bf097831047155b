#pragma once

// Reconstruction losses for the three decoder heads. The masked variants
// weight the per-pixel squared error by the ground-truth foreground mask G
// (FG head) or its complement (BG head); the primary loss is the plain
// mean squared error over the whole image.

#include <stdexcept>
#include <type_traits>

#include "deblur/autograd.hpp"
#include "deblur/image.hpp"
#include "deblur/tensor.hpp"

namespace deblur {

/// Denominator for the masked losses. kAllPixels divides by C*H*W so the
/// FG and BG terms sum to the primary MSE; kMaskedPixels divides by the
/// count of weighted pixels (times C) instead.
enum class MaskNormalization { kAllPixels, kMaskedPixels };

/// sum_c sum_p w_p (S - P)^2 / n, where w is a 1xHxW weight plane (or all
/// ones when `weight` is null). If `grad` is given it receives d/dP.
template <typename T>
T weighted_squared_error(const BasicTensor<T>& pred, const BasicTensor<T>& target, const BasicTensor<T>* weight,
                         MaskNormalization norm, BasicTensor<T>* grad = nullptr) {
  require_same_shape(pred.shape(), target.shape(), "weighted_squared_error");
  const Shape s = pred.shape();
  const std::size_t plane = s.plane();
  if (weight && (weight->channels() != 1 || weight->height() != s.height || weight->width() != s.width))
    throw std::invalid_argument("weighted_squared_error: mask " + weight->shape().str() + " vs image " + s.str());
  if (s.numel() == 0) throw std::invalid_argument("weighted_squared_error: empty image");

  double denom = static_cast<double>(s.numel());
  if (weight && norm == MaskNormalization::kMaskedPixels) {
    double wsum = 0.0;
    for (std::size_t p = 0; p < plane; ++p) wsum += static_cast<double>((*weight)[p]);
    denom = wsum * s.channels;
  }
  if (grad) *grad = BasicTensor<T>(s);
  if (denom <= 0.0) return T(0);

  double acc = 0.0;
  const T scale = static_cast<T>(2.0 / denom);
  for (int c = 0; c < s.channels; ++c) {
    const T* p = pred.channel(c);
    const T* t = target.channel(c);
    T* g = grad ? grad->channel(c) : nullptr;
    for (std::size_t i = 0; i < plane; ++i) {
      const T w = weight ? (*weight)[i] : T(1);
      const T r = p[i] - t[i];
      acc += static_cast<double>(w * r * r);
      if (g) g[i] = scale * w * r;
    }
  }
  return static_cast<T>(acc / denom);
}

/// FG head loss: mean of G * (S - S_fg)^2. Zero gradient wherever G = 0.
template <typename T>
T fg_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, const BinaryMask& mask,
          std::type_identity_t<BasicTensor<T>>* grad = nullptr, MaskNormalization norm = MaskNormalization::kAllPixels) {
  const BasicTensor<T> w = mask.as_tensor<T>();
  return weighted_squared_error(pred, target, &w, norm, grad);
}

/// BG head loss: mean of (1 - G) * (S - S_bg)^2. Zero gradient wherever G = 1.
template <typename T>
T bg_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, const BinaryMask& mask,
          std::type_identity_t<BasicTensor<T>>* grad = nullptr, MaskNormalization norm = MaskNormalization::kAllPixels) {
  BasicTensor<T> w = mask.as_tensor<T>();
  for (auto& v : w.vec()) v = T(1) - v;
  return weighted_squared_error(pred, target, &w, norm, grad);
}

/// Primary loss: mean squared error over all pixels and channels.
template <typename T>
T primary_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, std::type_identity_t<BasicTensor<T>>* grad = nullptr) {
  return weighted_squared_error<T>(pred, target, nullptr, MaskNormalization::kAllPixels, grad);
}

namespace ops {

/// Differentiable wrappers producing scalar tape nodes.
Var fg_loss(Var pred, const Tensor& target, const BinaryMask& mask, MaskNormalization norm);
Var bg_loss(Var pred, const Tensor& target, const BinaryMask& mask, MaskNormalization norm);
Var primary_loss(Var pred, const Tensor& target);

}  // namespace ops

}  // namespace deblur
