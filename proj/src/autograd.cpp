#include "deblur/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace deblur {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// ---------------------------------------------------------------------------
// ParameterSet

Parameter& ParameterSet::add(const std::string& name, std::vector<int> dims, float init_std) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter: " + name);
  std::size_t n = 1;
  for (int d : dims) {
    if (d <= 0) throw std::invalid_argument("non-positive parameter dimension in " + name);
    n *= static_cast<std::size_t>(d);
  }
  index_[name] = params_.size();
  Parameter& p = params_.emplace_back();
  p.name = name;
  p.dims = std::move(dims);
  p.value.assign(n, 0.0f);
  p.grad.assign(n, 0.0f);
  p.init_std = init_std;
  return p;
}

Parameter& ParameterSet::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return params_[it->second];
}

const Parameter& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return params_[it->second];
}

std::size_t ParameterSet::total_numel() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0f);
}

void ParameterSet::set_frozen(const std::string& prefix, bool frozen) {
  for (auto& p : params_)
    if (p.name.rfind(prefix, 0) == 0) p.frozen = frozen;
}

ParameterSet ParameterSet::subset(const std::string& prefix) const {
  ParameterSet out;
  for (const auto& p : params_) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    out.index_[p.name] = out.params_.size();
    out.params_.push_back(p);
  }
  return out;
}

void ParameterSet::assign_from(const ParameterSet& source) {
  for (const auto& s : source.params_) {
    Parameter& p = get(s.name);
    if (p.dims != s.dims) throw std::invalid_argument("assign_from: shape mismatch for " + s.name);
    p.value = s.value;
  }
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& a = params_[i];
    const auto& b = other.params_[i];
    if (a.name != b.name || a.dims != b.dims || a.value != b.value) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape());
  return grad;
}

Var Tape::constant(Tensor value) { return make(std::move(value), false, nullptr); }

Var Tape::variable(Tensor value) { return make(std::move(value), true, nullptr); }

Var Tape::make(Tensor value, bool needs_grad, std::function<void()> backward) {
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  node->needs_grad = record_ && needs_grad;
  if (node->needs_grad) node->backward = std::move(backward);
  node->tape = this;
  nodes_.push_back(std::move(node));
  return nodes_.back().get();
}

void Tape::backward(Var scalar) {
  if (!record_) throw std::logic_error("backward on a non-recording tape");
  if (scalar->value.size() != 1) throw std::invalid_argument("backward expects a scalar node");
  scalar->grad_buffer()[0] += 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.backward && !n.grad.empty()) n.backward();
  }
}

// ---------------------------------------------------------------------------
// kernels

namespace kernels {

void im2col(const float* image, int channels, int height, int width, int kernel, int stride, int pad,
            int out_h, int out_w, float* col) {
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < channels; ++c) {
    const float* src = image + static_cast<std::size_t>(c) * height * width;
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        float* dst = col + (static_cast<std::size_t>(c) * kernel * kernel + ky * kernel + kx) * out_plane;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          float* row = dst + static_cast<std::size_t>(oy) * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(row, row + out_w, 0.0f);
            continue;
          }
          const float* srow = src + static_cast<std::size_t>(iy) * width;
          if (stride == 1) {
            const int shift = kx - pad;
            const int lo = std::max(0, -shift);
            const int hi = std::min(out_w, width - shift);
            std::fill(row, row + std::min(lo, out_w), 0.0f);
            if (hi > lo) std::copy(srow + lo + shift, srow + hi + shift, row + lo);
            if (hi < out_w) std::fill(row + std::max(hi, lo), row + out_w, 0.0f);
          } else {
            for (int ox = 0; ox < out_w; ++ox) {
              const int ix = ox * stride - pad + kx;
              row[ox] = (ix >= 0 && ix < width) ? srow[ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im(const float* col, int channels, int height, int width, int kernel, int stride, int pad,
            int out_h, int out_w, float* image) {
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < channels; ++c) {
    float* dst = image + static_cast<std::size_t>(c) * height * width;
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const float* src = col + (static_cast<std::size_t>(c) * kernel * kernel + ky * kernel + kx) * out_plane;
        // Columns ox with 0 <= ox * stride - pad + kx < width.
        const int off = kx - pad;
        const int ox_lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
        const int ox_hi = std::min(out_w, width - off <= 0 ? 0 : (width - off - 1) / stride + 1);
        if (ox_hi <= ox_lo) continue;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          const float* row = src + static_cast<std::size_t>(oy) * out_w;
          float* drow = dst + static_cast<std::size_t>(iy) * width + off;
          if (stride == 1) {
            for (int ox = ox_lo; ox < ox_hi; ++ox) drow[ox] += row[ox];
          } else {
            for (int ox = ox_lo; ox < ox_hi; ++ox) drow[ox * stride] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// ops

namespace ops {
namespace {

bool param_trainable(const Tape& tape, const Parameter& p) { return tape.recording() && !p.frozen; }

// Per-thread scratch reused across ops; contents are fully overwritten by
// every user, so growth is the only allocation and nothing is zeroed.
float* workspace(int slot, std::size_t n) {
  thread_local std::vector<float> buffers[2];
  std::vector<float>& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

void check_conv_params(const Parameter& w, const Parameter& b, int expected_in, bool transposed) {
  if (w.dims.size() != 4 || w.dims[2] != w.dims[3])
    throw std::invalid_argument(w.name + ": expected square 4-d kernel");
  const int in = transposed ? w.dims[0] : w.dims[1];
  const int out = transposed ? w.dims[1] : w.dims[0];
  if (in != expected_in)
    throw std::invalid_argument(w.name + ": input has " + std::to_string(expected_in) + " channels, kernel expects " +
                                std::to_string(in));
  if (b.dims.size() != 1 || b.dims[0] != out) throw std::invalid_argument(b.name + ": bias size mismatch");
}

}  // namespace

Var conv2d(Var x, Parameter& weight, Parameter& bias, int stride, int pad) {
  const Shape in = x->value.shape();
  check_conv_params(weight, bias, in.channels, false);
  const int out_c = weight.dims[0];
  const int k = weight.dims[2];
  const int out_h = (in.height + 2 * pad - k) / stride + 1;
  const int out_w = (in.width + 2 * pad - k) / stride + 1;
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument(weight.name + ": input too small for kernel");
  const int rows = in.channels * k * k;
  const std::size_t cols = static_cast<std::size_t>(out_h) * out_w;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  auto make_col = [=](const Tensor& src) -> const float* {
    if (direct) return src.data();
    float* buf = workspace(0, static_cast<std::size_t>(rows) * cols);
    kernels::im2col(src.data(), in.channels, in.height, in.width, k, stride, pad, out_h, out_w, buf);
    return buf;
  };

  Tensor y(out_c, out_h, out_w);
  {
    const float* col = make_col(x->value);
    MatMap ym(y.data(), out_c, static_cast<Eigen::Index>(cols));
    ym.noalias() = ConstMatMap(weight.value.data(), out_c, rows) * ConstMatMap(col, rows, static_cast<Eigen::Index>(cols));
    for (int c = 0; c < out_c; ++c) ym.row(c).array() += bias.value[c];
  }

  Tape& tape = *x->tape;
  const bool train_params = param_trainable(tape, weight) || param_trainable(tape, bias);
  Var out = tape.make(std::move(y), x->needs_grad || train_params, nullptr);
  if (out->needs_grad) {
    out->backward = [=, &weight, &bias, &tape]() {
      const Tensor& dy = out->grad;
      ConstMatMap dym(dy.data(), out_c, static_cast<Eigen::Index>(cols));
      if (param_trainable(tape, weight)) {
        const float* col = make_col(x->value);
        MatMap(weight.grad.data(), out_c, rows).noalias() +=
            dym * ConstMatMap(col, rows, static_cast<Eigen::Index>(cols)).transpose();
      }
      // Fixed-order sum: Eigen reductions vary with pointer alignment.
      if (param_trainable(tape, bias))
        for (int c = 0; c < out_c; ++c) {
          const float* p = dy.channel(c);
          double s = 0.0;
          for (std::size_t i = 0; i < cols; ++i) s += p[i];
          bias.grad[c] += static_cast<float>(s);
        }
      if (x->needs_grad) {
        Tensor& dx = x->grad_buffer();
        if (direct) {
          MatMap(dx.data(), rows, static_cast<Eigen::Index>(cols)).noalias() +=
              ConstMatMap(weight.value.data(), out_c, rows).transpose() * dym;
        } else {
          float* dcol = workspace(1, static_cast<std::size_t>(rows) * cols);
          MatMap(dcol, rows, static_cast<Eigen::Index>(cols)).noalias() =
              ConstMatMap(weight.value.data(), out_c, rows).transpose() * dym;
          kernels::col2im(dcol, in.channels, in.height, in.width, k, stride, pad, out_h, out_w, dx.data());
        }
      }
    };
  }
  return out;
}

Var conv_transpose2d(Var x, Parameter& weight, Parameter& bias, int stride, int pad) {
  const Shape in = x->value.shape();
  check_conv_params(weight, bias, in.channels, true);
  const int out_c = weight.dims[1];
  const int k = weight.dims[2];
  const int out_h = (in.height - 1) * stride - 2 * pad + k;
  const int out_w = (in.width - 1) * stride - 2 * pad + k;
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument(weight.name + ": degenerate output size");
  const int rows = out_c * k * k;
  const std::size_t cols = in.plane();
  const Eigen::Index ncols = static_cast<Eigen::Index>(cols);

  Tensor y(out_c, out_h, out_w);
  {
    float* col = workspace(0, static_cast<std::size_t>(rows) * cols);
    MatMap(col, rows, ncols).noalias() =
        ConstMatMap(weight.value.data(), in.channels, rows).transpose() * ConstMatMap(x->value.data(), in.channels, ncols);
    kernels::col2im(col, out_c, out_h, out_w, k, stride, pad, in.height, in.width, y.data());
    for (int c = 0; c < out_c; ++c) {
      float* p = y.channel(c);
      std::for_each(p, p + y.shape().plane(), [b = bias.value[c]](float& v) { v += b; });
    }
  }

  Tape& tape = *x->tape;
  Var out = tape.make(std::move(y), x->needs_grad || param_trainable(tape, weight) || param_trainable(tape, bias),
                      nullptr);
  if (out->needs_grad) {
    out->backward = [=, &weight, &bias, &tape]() {
      const Tensor& dy = out->grad;
      float* dcol = workspace(0, static_cast<std::size_t>(rows) * cols);
      kernels::im2col(dy.data(), out_c, out_h, out_w, k, stride, pad, in.height, in.width, dcol);
      ConstMatMap dcolm(dcol, rows, ncols);
      if (param_trainable(tape, weight))
        MatMap(weight.grad.data(), in.channels, rows).noalias() +=
            ConstMatMap(x->value.data(), in.channels, ncols) * dcolm.transpose();
      if (param_trainable(tape, bias)) {
        const std::size_t plane = dy.shape().plane();
        for (int c = 0; c < out_c; ++c) {
          const float* p = dy.channel(c);
          double s = 0.0;
          for (std::size_t i = 0; i < plane; ++i) s += p[i];
          bias.grad[c] += static_cast<float>(s);
        }
      }
      if (x->needs_grad) {
        MatMap(x->grad_buffer().data(), in.channels, ncols).noalias() +=
            ConstMatMap(weight.value.data(), in.channels, rows) * dcolm;
      }
    };
  }
  return out;
}

Var relu(Var x) {
  Tensor y = x->value;
  for (auto& v : y.vec()) v = v > 0.0f ? v : 0.0f;
  Var out = x->tape->make(std::move(y), x->needs_grad, nullptr);
  if (out->needs_grad) {
    out->backward = [=]() {
      Tensor& dx = x->grad_buffer();
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (x->value[i] > 0.0f) dx[i] += out->grad[i];
    };
  }
  return out;
}

Var sigmoid(Var x) {
  Tensor y(x->value.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const float z = std::clamp(x->value[i], -kSigmoidClamp, kSigmoidClamp);
    y[i] = 1.0f / (1.0f + std::exp(-z));
  }
  Var out = x->tape->make(std::move(y), x->needs_grad, nullptr);
  if (out->needs_grad) {
    out->backward = [=]() {
      Tensor& dx = x->grad_buffer();
      for (std::size_t i = 0; i < dx.size(); ++i) {
        const float z = x->value[i];
        if (z < -kSigmoidClamp || z > kSigmoidClamp) continue;
        const float s = out->value[i];
        dx[i] += out->grad[i] * s * (1.0f - s);
      }
    };
  }
  return out;
}

Var add(Var a, Var b) {
  require_same_shape(a->value.shape(), b->value.shape(), "add");
  Tensor y = a->value;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b->value[i];
  Var out = a->tape->make(std::move(y), a->needs_grad || b->needs_grad, nullptr);
  if (out->needs_grad) {
    out->backward = [=]() {
      for (Var v : {a, b}) {
        if (!v->needs_grad) continue;
        Tensor& d = v->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += out->grad[i];
      }
    };
  }
  return out;
}

Var one_minus(Var x) {
  Tensor y(x->value.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = 1.0f - x->value[i];
  Var out = x->tape->make(std::move(y), x->needs_grad, nullptr);
  if (out->needs_grad) {
    out->backward = [=]() {
      Tensor& dx = x->grad_buffer();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] -= out->grad[i];
    };
  }
  return out;
}

Var gate(Var x, Var g) {
  const Shape xs = x->value.shape();
  const Shape gs = g->value.shape();
  if (gs.channels != 1 || gs.height != xs.height || gs.width != xs.width)
    throw std::invalid_argument("gate: plane " + gs.str() + " does not match features " + xs.str());
  const std::size_t plane = xs.plane();
  Tensor y(xs);
  for (int c = 0; c < xs.channels; ++c) {
    const float* src = x->value.channel(c);
    float* dst = y.channel(c);
    for (std::size_t i = 0; i < plane; ++i) dst[i] = g->value[i] * src[i];
  }
  Var out = x->tape->make(std::move(y), x->needs_grad || g->needs_grad, nullptr);
  if (out->needs_grad) {
    out->backward = [=]() {
      const Tensor& dy = out->grad;
      if (x->needs_grad) {
        Tensor& dx = x->grad_buffer();
        for (int c = 0; c < xs.channels; ++c) {
          const float* d = dy.channel(c);
          float* o = dx.channel(c);
          for (std::size_t i = 0; i < plane; ++i) o[i] += g->value[i] * d[i];
        }
      }
      if (g->needs_grad) {
        Tensor& dg = g->grad_buffer();
        for (int c = 0; c < xs.channels; ++c) {
          const float* d = dy.channel(c);
          const float* v = x->value.channel(c);
          for (std::size_t i = 0; i < plane; ++i) dg[i] += v[i] * d[i];
        }
      }
    };
  }
  return out;
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat of nothing");
  const Shape first = parts.front()->value.shape();
  int channels = 0;
  bool needs = false;
  for (Var p : parts) {
    const Shape s = p->value.shape();
    if (s.height != first.height || s.width != first.width)
      throw std::invalid_argument("concat: spatial mismatch " + s.str() + " vs " + first.str());
    channels += s.channels;
    needs = needs || p->needs_grad;
  }
  Tensor y(channels, first.height, first.width);
  std::size_t offset = 0;
  for (Var p : parts) {
    std::copy(p->value.vec().begin(), p->value.vec().end(), y.vec().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p->value.size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  Var out = parts.front()->tape->make(std::move(y), needs, nullptr);
  if (out->needs_grad) {
    out->backward = [=]() {
      std::size_t off = 0;
      for (Var p : inputs) {
        if (p->needs_grad) {
          Tensor& d = p->grad_buffer();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += out->grad[off + i];
        }
        off += p->value.size();
      }
    };
  }
  return out;
}

Var avg_pool(Var x, int factor) {
  const Shape s = x->value.shape();
  if (factor < 1 || s.height % factor != 0 || s.width % factor != 0)
    throw std::invalid_argument("avg_pool: factor " + std::to_string(factor) + " does not divide " + s.str());
  if (factor == 1) return x;
  const int oh = s.height / factor;
  const int ow = s.width / factor;
  const float inv = 1.0f / static_cast<float>(factor * factor);
  Tensor y(s.channels, oh, ow);
  for (int c = 0; c < s.channels; ++c)
    for (int y0 = 0; y0 < oh; ++y0)
      for (int x0 = 0; x0 < ow; ++x0) {
        float acc = 0.0f;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += x->value.at(c, y0 * factor + dy, x0 * factor + dx);
        y.at(c, y0, x0) = acc * inv;
      }
  Var out = x->tape->make(std::move(y), x->needs_grad, nullptr);
  if (out->needs_grad) {
    out->backward = [=]() {
      Tensor& dx = x->grad_buffer();
      for (int c = 0; c < s.channels; ++c)
        for (int yy = 0; yy < s.height; ++yy)
          for (int xx = 0; xx < s.width; ++xx) dx.at(c, yy, xx) += out->grad.at(c, yy / factor, xx / factor) * inv;
    };
  }
  return out;
}

Var max_pool2(Var x) {
  const Shape s = x->value.shape();
  if (s.height % 2 != 0 || s.width % 2 != 0) throw std::invalid_argument("max_pool2: odd input " + s.str());
  const int oh = s.height / 2;
  const int ow = s.width / 2;
  Tensor y(s.channels, oh, ow);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(y.size());
  std::size_t o = 0;
  for (int c = 0; c < s.channels; ++c)
    for (int y0 = 0; y0 < oh; ++y0)
      for (int x0 = 0; x0 < ow; ++x0, ++o) {
        std::size_t best = (static_cast<std::size_t>(c) * s.height + 2 * y0) * s.width + 2 * x0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (static_cast<std::size_t>(c) * s.height + 2 * y0 + dy) * s.width + 2 * x0 + dx;
            if (x->value[idx] > x->value[best]) best = idx;
          }
        y[o] = x->value[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
  Var out = x->tape->make(std::move(y), x->needs_grad, nullptr);
  if (out->needs_grad) {
    out->backward = [=]() {
      Tensor& dx = x->grad_buffer();
      for (std::size_t i = 0; i < argmax->size(); ++i) dx[(*argmax)[i]] += out->grad[i];
    };
  }
  return out;
}

Var weighted_sum(std::span<const Var> scalars, std::span<const float> weights) {
  if (scalars.empty() || scalars.size() != weights.size())
    throw std::invalid_argument("weighted_sum: need one weight per scalar");
  double total = 0.0;
  bool needs = false;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i]->value.size() != 1) throw std::invalid_argument("weighted_sum: non-scalar input");
    total += static_cast<double>(weights[i]) * scalars[i]->value[0];
    needs = needs || scalars[i]->needs_grad;
  }
  std::vector<Var> in(scalars.begin(), scalars.end());
  std::vector<float> w(weights.begin(), weights.end());
  Var out = scalars.front()->tape->make(Tensor(1, 1, 1, static_cast<float>(total)), needs, nullptr);
  if (out->needs_grad) {
    out->backward = [=]() {
      for (std::size_t i = 0; i < in.size(); ++i)
        if (in[i]->needs_grad) in[i]->grad_buffer()[0] += w[i] * out->grad[0];
    };
  }
  return out;
}

}  // namespace ops
}  // namespace deblur
