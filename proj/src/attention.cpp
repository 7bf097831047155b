#include "deblur/attention.hpp"

#include <cmath>
#include <memory>

namespace deblur {

namespace {

std::string pname(const std::string& layer, const char* what) { return std::string(kAttentionPrefix) + layer + "." + what; }

Parameter& weight(ParameterSet& p, const std::string& layer) { return p.get(pname(layer, "weight")); }
Parameter& bias(ParameterSet& p, const std::string& layer) { return p.get(pname(layer, "bias")); }

}  // namespace

void AttentionConfig::validate() const {
  if (width1 <= 0 || width2 <= 0 || width3 <= 0) throw std::invalid_argument("attention widths must be positive");
  if (kernel <= 0 || kernel % 2 == 0) throw std::invalid_argument("attention kernel must be odd");
  if (image_channels <= 0) throw std::invalid_argument("attention image_channels must be positive");
}

void add_attention_parameters(ParameterSet& params, const AttentionConfig& c) {
  c.validate();
  const int k = c.kernel;
  const int in[3] = {c.image_channels, c.width1, c.width2};
  const int down[3] = {c.width1, c.width2, c.width3};
  for (int i = 0; i < 3; ++i) {
    const std::string layer = "down" + std::to_string(i);
    params.add(pname(layer, "weight"), {down[i], in[i], k, k}, std::sqrt(2.0f / static_cast<float>(in[i] * k * k)));
    params.add(pname(layer, "bias"), {down[i]});
  }
  const int up_in[3] = {c.width3, c.width2, c.width1};
  const int up_out[3] = {c.width2, c.width1, c.width1};
  for (int i = 0; i < 3; ++i) {
    const std::string layer = "up" + std::to_string(i);
    // a stride-2 4x4 transposed conv feeds each output from 2x2 taps per input channel
    params.add(pname(layer, "weight"), {up_in[i], up_out[i], 4, 4}, std::sqrt(2.0f / static_cast<float>(up_in[i] * 4)));
    params.add(pname(layer, "bias"), {up_out[i]});
  }
  params.add(pname("out", "weight"), {1, c.width1, 1, 1}, std::sqrt(1.0f / static_cast<float>(c.width1)));
  params.add(pname("out", "bias"), {1});
}

Var attention_forward(ParameterSet& params, Var image, Var* logits) {
  const Shape s = image->value.shape();
  if (s.height % kAttentionDivisor != 0 || s.width % kAttentionDivisor != 0)
    throw std::invalid_argument("attention input " + s.str() + " must have dimensions divisible by " +
                                std::to_string(kAttentionDivisor));
  Var x = image;
  for (int i = 0; i < 3; ++i) {
    const std::string layer = "down" + std::to_string(i);
    Parameter& w = weight(params, layer);
    x = ops::conv2d(x, w, bias(params, layer), 1, w.dims[2] / 2);
    x = ops::max_pool2(ops::relu(x));
  }
  for (int i = 0; i < 3; ++i) {
    const std::string layer = "up" + std::to_string(i);
    x = ops::relu(ops::conv_transpose2d(x, weight(params, layer), bias(params, layer), 2, 1));
  }
  Var y = ops::conv2d(x, weight(params, "out"), bias(params, "out"), 1, 0);
  if (logits) *logits = y;
  return ops::sigmoid(y);
}

AttentionMap attention_forward(const ParameterSet& params, const ImagePlane& image) {
  Tape tape(false);
  Var logits = nullptr;
  // A non-recording tape never touches parameter gradients.
  Var a = attention_forward(const_cast<ParameterSet&>(params), tape.constant(image), &logits);
  return {logits->value, a->value};
}

namespace ops {

Var attention_loss(Var attention, const BinaryMask& mask) {
  Tensor grad;
  const float loss = deblur::attention_loss(attention->value, mask, attention->needs_grad ? &grad : nullptr);
  Var out = attention->tape->make(Tensor(1, 1, 1, loss), attention->needs_grad, nullptr);
  if (out->needs_grad) {
    auto g = std::make_shared<Tensor>(std::move(grad));
    out->backward = [=]() {
      Tensor& d = attention->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += out->grad[0] * (*g)[i];
    };
  }
  return out;
}

}  // namespace ops

int attention_resample_factor(const Shape& attention, const Shape& features) {
  if (attention.channels != 1) throw std::invalid_argument("attention map must have one channel");
  if (features.height <= 0 || features.width <= 0 || attention.height % features.height != 0 ||
      attention.width % features.width != 0)
    throw std::invalid_argument("attention " + attention.str() + " cannot be area-resampled to features " +
                                features.str());
  const int fy = attention.height / features.height;
  const int fx = attention.width / features.width;
  if (fy != fx)
    throw std::invalid_argument("attention " + attention.str() + " and features " + features.str() +
                                " have incompatible aspect ratios");
  return fy;
}

std::pair<Var, Var> gate_features(Var features, Var attention) {
  const int factor = attention_resample_factor(attention->value.shape(), features->value.shape());
  Var a = ops::avg_pool(attention, factor);
  return {ops::gate(features, a), ops::gate(features, ops::one_minus(a))};
}

GatedFeatures gate_features(const Tensor& features, const Tensor& attention) {
  Tape tape(false);
  auto [fg, bg] = gate_features(tape.constant(features), tape.constant(attention));
  return {fg->value, bg->value};
}

}  // namespace deblur
