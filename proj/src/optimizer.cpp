#include "deblur/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace deblur {

void Adam::ensure_state(const ParameterSet& params) {
  const auto& all = params.all();
  if (state_.m.empty() && state_.v.empty()) {
    for (const auto& p : all) {
      state_.m.emplace_back(p.numel(), 0.0f);
      state_.v.emplace_back(p.numel(), 0.0f);
    }
    return;
  }
  if (state_.m.size() != all.size() || state_.v.size() != all.size())
    throw std::invalid_argument("optimizer state does not match parameter set");
  for (std::size_t i = 0; i < all.size(); ++i)
    if (state_.m[i].size() != all[i].numel() || state_.v[i].size() != all[i].numel())
      throw std::invalid_argument("optimizer state size mismatch for " + all[i].name);
}

void Adam::step(ParameterSet& params) {
  ensure_state(params);
  ++state_.step;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
  const float alpha = static_cast<float>(config_.learning_rate * std::sqrt(c2) / c1);
  const float eps = static_cast<float>(config_.epsilon * std::sqrt(c2));
  const float fb1 = static_cast<float>(b1);
  const float fb2 = static_cast<float>(b2);

  auto& all = params.all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    Parameter& p = all[i];
    if (p.frozen) continue;
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const float g = p.grad[j];
      m[j] = fb1 * m[j] + (1.0f - fb1) * g;
      v[j] = fb2 * v[j] + (1.0f - fb2) * g * g;
      p.value[j] -= alpha * m[j] / (std::sqrt(v[j]) + eps);
    }
  }
}

}  // namespace deblur
