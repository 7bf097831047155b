#include "deblur/losses.hpp"

#include <memory>

namespace deblur::ops {
namespace {

// Wraps a loss whose analytic gradient is computed eagerly during forward.
Var scalar_loss_node(Var pred, float loss, Tensor grad) {
  Var out = pred->tape->make(Tensor(1, 1, 1, loss), pred->needs_grad, nullptr);
  if (out->needs_grad) {
    auto g = std::make_shared<Tensor>(std::move(grad));
    out->backward = [=]() {
      Tensor& dp = pred->grad_buffer();
      const float seed = out->grad[0];
      for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += seed * (*g)[i];
    };
  }
  return out;
}

}  // namespace

Var fg_loss(Var pred, const Tensor& target, const BinaryMask& mask, MaskNormalization norm) {
  Tensor grad;
  const float loss = deblur::fg_loss(pred->value, target, mask, pred->needs_grad ? &grad : nullptr, norm);
  return scalar_loss_node(pred, loss, std::move(grad));
}

Var bg_loss(Var pred, const Tensor& target, const BinaryMask& mask, MaskNormalization norm) {
  Tensor grad;
  const float loss = deblur::bg_loss(pred->value, target, mask, pred->needs_grad ? &grad : nullptr, norm);
  return scalar_loss_node(pred, loss, std::move(grad));
}

Var primary_loss(Var pred, const Tensor& target) {
  Tensor grad;
  const float loss = deblur::primary_loss(pred->value, target, pred->needs_grad ? &grad : nullptr);
  return scalar_loss_node(pred, loss, std::move(grad));
}

}  // namespace deblur::ops
