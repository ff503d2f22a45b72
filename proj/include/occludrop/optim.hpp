#pragma once

// Classical momentum SGD with a step-decay learning-rate schedule.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "occludrop/tensor.hpp"

namespace occludrop {

/// lr * decay^k, k = number of milestones (fractions of total epochs) reached.
inline double scheduled_lr(double base_lr, std::size_t epoch, std::size_t epochs,
                           const std::vector<double>& milestones, double decay) {
  double lr = base_lr;
  for (double m : milestones) {
    const auto at = static_cast<std::size_t>(std::floor(m * static_cast<double>(epochs)));
    if (epoch >= at) lr *= decay;
  }
  return lr;
}

/// v <- mu v - lr (g + wd p);  p <- p + v.
/// Weight decay applies to tensors of rank >= 2 (conv and linear weights).
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<std::pair<std::string, Tensor<T>>> params, double momentum, double weight_decay = 0.0)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.second.numel(), T(0));
  }

  void zero_grad() {
    for (auto& p : params_) p.second.zero_grad();
  }

  void step(double lr) {
    const T mu = static_cast<T>(momentum_), rate = static_cast<T>(lr);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor<T>& p = params_[k].second;
      if (!p.has_grad()) continue;
      const T wd = p.rank() >= 2 ? static_cast<T>(weight_decay_) : T(0);
      auto v = p.values();
      auto g = p.grad();
      auto& vel = velocity_[k];
      for (std::size_t i = 0; i < v.size(); ++i) {
        vel[i] = mu * vel[i] - rate * (g[i] + wd * v[i]);
        v[i] += vel[i];
      }
    }
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_;
  double weight_decay_;
};

}  // namespace occludrop
