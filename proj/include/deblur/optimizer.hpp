#pragma once

#include <cstdint>
#include <vector>

#include "deblur/autograd.hpp"

namespace deblur {

/// First/second moment estimates, one vector per parameter in set order.
struct OptimizerState {
  std::int64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;

  bool operator==(const OptimizerState&) const = default;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adaptive moment estimation with bias correction. Frozen parameters are
/// skipped (their moments stay untouched).
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(ParameterSet& params);

  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  const AdamConfig& config() const { return config_; }
  const OptimizerState& state() const { return state_; }
  void set_state(OptimizerState state) { state_ = std::move(state); }

 private:
  void ensure_state(const ParameterSet& params);

  AdamConfig config_;
  OptimizerState state_;
};

}  // namespace deblur
