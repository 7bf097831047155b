#pragma once

// Minimal reverse-mode differentiation over (C, H, W) tensors. A Tape owns
// every intermediate produced during one forward pass; calling backward()
// on a scalar node walks the tape in reverse creation order, which is a
// valid topological order because ops only consume earlier nodes.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "deblur/tensor.hpp"

namespace deblur {

/// Learnable array with its gradient accumulator.
struct Parameter {
  std::string name;
  std::vector<int> dims;
  std::vector<float> value;
  std::vector<float> grad;
  bool frozen = false;
  /// Standard deviation used by random initialization (0 for biases).
  float init_std = 0.0f;

  std::size_t numel() const { return value.size(); }
};

/// Ordered, name-addressable collection of parameters. Iteration order is
/// registration order, which also fixes the serialized layout.
class ParameterSet {
 public:
  /// The returned reference is invalidated by the next add().
  Parameter& add(const std::string& name, std::vector<int> dims, float init_std = 0.0f);

  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t total_numel() const;

  void zero_grad();
  /// Freeze or thaw every parameter whose name starts with `prefix`.
  void set_frozen(const std::string& prefix, bool frozen);

  /// Copy of the parameters whose names start with `prefix`.
  ParameterSet subset(const std::string& prefix) const;
  /// Overwrites values of same-named parameters from `source`; every
  /// parameter in `source` must exist here with identical dims.
  void assign_from(const ParameterSet& source);

  bool operator==(const ParameterSet& other) const;

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

struct Node {
  Tensor value;
  Tensor grad;
  bool needs_grad = false;
  std::function<void()> backward;
  Tape* tape = nullptr;

  Tensor& grad_buffer();
};

using Var = Node*;

class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input with no gradient.
  Var constant(Tensor value);
  /// Input whose gradient is accumulated (for probes and gradient checks).
  Var variable(Tensor value);

  Var make(Tensor value, bool needs_grad, std::function<void()> backward);

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(out)/d(out) = 1 for a scalar node and propagates.
  void backward(Var scalar);

 private:
  bool record_;
  std::vector<std::unique_ptr<Node>> nodes_;
};

namespace ops {

/// Convolution with square kernel; weight dims {out, in, k, k}, bias dims {out}.
Var conv2d(Var x, Parameter& weight, Parameter& bias, int stride, int pad);

/// Transposed convolution; weight dims {in, out, k, k}, bias dims {out}.
Var conv_transpose2d(Var x, Parameter& weight, Parameter& bias, int stride, int pad);

Var relu(Var x);

/// Logistic function with logits clamped to [-kSigmoidClamp, kSigmoidClamp],
/// which keeps every output strictly inside (0,1) in single precision.
inline constexpr float kSigmoidClamp = 15.0f;
Var sigmoid(Var x);

Var add(Var a, Var b);
Var one_minus(Var x);
/// Multiplies every channel of `x` by the single-channel plane `gate`.
Var gate(Var x, Var gate);
Var concat(std::span<const Var> parts);
/// Block-mean downsampling by an integer factor.
Var avg_pool(Var x, int factor);
Var max_pool2(Var x);

/// Weighted sum of scalar nodes.
Var weighted_sum(std::span<const Var> scalars, std::span<const float> weights);

}  // namespace ops

namespace kernels {

void im2col(const float* image, int channels, int height, int width, int kernel, int stride, int pad,
            int out_h, int out_w, float* col);
/// Accumulates `col` back into `image` (adjoint of im2col).
void col2im(const float* col, int channels, int height, int width, int kernel, int stride, int pad,
            int out_h, int out_w, float* image);

}  // namespace kernels

}  // namespace deblur
