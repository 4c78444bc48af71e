#pragma once

// AdamW with decoupled weight decay, and the warmup + cosine learning-rate
// schedule.

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "swintext/config.hpp"
#include "swintext/errors.hpp"
#include "swintext/nn.hpp"
#include "swintext/tensor.hpp"

namespace swintext {

/// Linear ramp 0 -> base over the warmup epochs, then cosine from base down
/// to min_lr at the final epoch.
inline double lr_at(std::size_t epoch, const ScheduleConfig& s) {
  const std::size_t warm = s.warmup_epochs();
  if (epoch < warm) return s.base_lr * static_cast<double>(epoch) / static_cast<double>(warm);
  if (s.epochs <= warm + 1) return s.base_lr;
  const double t = std::min(1.0, static_cast<double>(epoch - warm) / static_cast<double>(s.epochs - 1 - warm));
  const double floor = s.min_lr / s.base_lr;
  return s.base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

template <class T>
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg = {}) : cfg_(cfg) {}

  std::size_t steps() const { return step_; }
  const OptimConfig& config() const { return cfg_; }

  /// One update of every parameter that received a gradient. Throws
  /// NumericError naming the first parameter with a non-finite gradient,
  /// before anything is modified.
  void step(ParamStore<T>& params, double lr) {
    for (const auto& [name, p] : params.all()) {
      if (!p.has_grad()) continue;
      for (T g : p.grad()) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw NumericError("non-finite gradient in parameter '" + name + "' at step " + std::to_string(step_ + 1));
        }
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const auto& [name, param] : params.all()) {
      if (!param.has_grad()) continue;
      Tensor<T> p = param;
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(p.numel(), 0.0);
        st.v.assign(p.numel(), 0.0);
      }
      auto data = p.mutable_data();
      const auto grad = p.grad();
      const double decay = 1.0 - lr * cfg_.weight_decay;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        double w = static_cast<double>(data[i]) * decay;
        w -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        data[i] = static_cast<T>(w);
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };

  OptimConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace swintext
