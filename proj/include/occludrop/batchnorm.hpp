#pragma once

// Per-channel batch normalization over [n,c,h,w] feature maps, with an
// optional per-(sample, channel) keep mask. Masked entries are excluded from
// the statistics and produce zero output.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "occludrop/ops.hpp"
#include "occludrop/tensor.hpp"

namespace occludrop {

template <typename T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> variance;
  Tensor<T> running_mean;
  Tensor<T> running_variance;
  T momentum = T(0.9);
  T epsilon = T(1e-5);
  /// Channels that had no surviving sample in some training batch.
  std::size_t degenerate_channels = 0;

  explicit BatchStats(std::size_t channels = 0, T momentum_ = T(0.9), T epsilon_ = T(1e-5))
      : mean(channels, T(0)),
        variance(channels, T(1)),
        momentum(momentum_),
        epsilon(epsilon_) {
    if (channels > 0) {
      running_mean = Tensor<T>::zeros({channels});
      running_variance = Tensor<T>::full({channels}, T(1));
    }
  }
};

/// Learnable scale/shift plus statistics for one normalized layer.
template <typename T>
struct BatchNorm {
  Tensor<T> scale;
  Tensor<T> shift;
  BatchStats<T> stats;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels, T momentum = T(0.9), T epsilon = T(1e-5))
      : scale(Tensor<T>::full({channels}, T(1), true)),
        shift(Tensor<T>::zeros({channels}, true)),
        stats(channels, momentum, epsilon) {}
  std::size_t channels() const { return scale.numel(); }
};

namespace detail {

template <typename T>
Tensor<T> batchnorm_impl(const Tensor<T>& input, BatchNorm<T>& bn, bool training,
                         const std::vector<std::uint8_t>* keep) {
  require_rank(input, 4, "batchnorm");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (bn.channels() != c) {
    throw DimensionError("batchnorm: layer has " + std::to_string(bn.channels()) +
                         " channels, input channel axis (1) is " + std::to_string(c));
  }
  if (keep && keep->size() != n * c) {
    throw DimensionError("batchnorm: keep mask must cover (batch, channel) = " + std::to_string(n * c));
  }
  if (training && n * hw < 2) {
    throw ContractError("batchnorm: insufficient batch, need n*h*w >= 2 in training mode, got " +
                        std::to_string(n * hw));
  }
  auto& st = bn.stats;
  auto xv = input.values();
  auto gamma = bn.scale.values();
  auto beta = bn.shift.values();
  auto kept = [&](std::size_t t, std::size_t i) { return !keep || (*keep)[t * c + i] != 0; };

  std::vector<T> xhat(input.numel(), T(0));
  std::vector<T> inv_std(c);
  std::vector<T> counts(c, T(0));
  std::vector<T> out(input.numel(), T(0));
  auto rm = st.running_mean.values();
  auto rv = st.running_variance.values();

  for (std::size_t i = 0; i < c; ++i) {
    T mu, var;
    std::size_t survivors = n;
    if (training) {
      survivors = 0;
      for (std::size_t t = 0; t < n; ++t) survivors += kept(t, i) ? 1 : 0;
    }
    const bool batch_stats = training && survivors > 0;
    if (batch_stats) {
      const std::size_t count = survivors * hw;
      T acc = T(0);
      for (std::size_t t = 0; t < n; ++t) {
        if (!kept(t, i)) continue;
        const T* p = xv.data() + (t * c + i) * hw;
        for (std::size_t s = 0; s < hw; ++s) acc += p[s];
      }
      mu = acc / static_cast<T>(count);
      T sq = T(0);
      for (std::size_t t = 0; t < n; ++t) {
        if (!kept(t, i)) continue;
        const T* p = xv.data() + (t * c + i) * hw;
        for (std::size_t s = 0; s < hw; ++s) sq += (p[s] - mu) * (p[s] - mu);
      }
      var = sq / static_cast<T>(count);
      counts[i] = static_cast<T>(count);
      st.mean[i] = mu;
      st.variance[i] = var;
      const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
      rm[i] = st.momentum * rm[i] + (T(1) - st.momentum) * mu;
      rv[i] = st.momentum * rv[i] + (T(1) - st.momentum) * unbiased;
    } else {
      if (training) ++st.degenerate_channels;
      mu = rm[i];
      var = rv[i];
    }
    inv_std[i] = T(1) / std::sqrt(var + st.epsilon);
    for (std::size_t t = 0; t < n; ++t) {
      if (training && !kept(t, i)) continue;
      const std::size_t base = (t * c + i) * hw;
      for (std::size_t s = 0; s < hw; ++s) {
        const T xh = (xv[base + s] - mu) * inv_std[i];
        xhat[base + s] = xh;
        out[base + s] = gamma[i] * xh + beta[i];
      }
    }
  }

  std::vector<std::uint8_t> keep_copy;
  if (training && keep) keep_copy = *keep;
  const std::string op = keep ? "masked_batchnorm" : "batchnorm";
  return make_result<T>(
      input.shape(), std::move(out), op, {input, bn.scale, bn.shift},
      [n, c, hw, training, xhat = std::move(xhat), inv_std = std::move(inv_std),
       counts = std::move(counts), keep_copy = std::move(keep_copy)](Node<T>& self) {
        const auto& gamma = self.inputs[1]->value;
        auto kept = [&](std::size_t t, std::size_t i) {
          return keep_copy.empty() || keep_copy[t * c + i] != 0;
        };
        T* gx = self.input_grad(0);
        T* gg = self.input_grad(1);
        T* gb = self.input_grad(2);
        const T* dy = self.grad.data();
        for (std::size_t i = 0; i < c; ++i) {
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::size_t t = 0; t < n; ++t) {
            if (training && !kept(t, i)) continue;
            const std::size_t base = (t * c + i) * hw;
            for (std::size_t s = 0; s < hw; ++s) {
              sum_dy += dy[base + s];
              sum_dy_xhat += dy[base + s] * xhat[base + s];
            }
          }
          if (gg) gg[i] += sum_dy_xhat;
          if (gb) gb[i] += sum_dy;
          if (!gx) continue;
          if (training && counts[i] > T(0)) {
            const T m = counts[i];
            const T k = gamma[i] * inv_std[i] / m;
            for (std::size_t t = 0; t < n; ++t) {
              if (!kept(t, i)) continue;
              const std::size_t base = (t * c + i) * hw;
              for (std::size_t s = 0; s < hw; ++s) {
                gx[base + s] += k * (m * dy[base + s] - sum_dy - xhat[base + s] * sum_dy_xhat);
              }
            }
          } else if (!training) {
            const T k = gamma[i] * inv_std[i];
            for (std::size_t t = 0; t < n; ++t) {
              const std::size_t base = (t * c + i) * hw;
              for (std::size_t s = 0; s < hw; ++s) gx[base + s] += k * dy[base + s];
            }
          }
        }
      });
}

}  // namespace detail

/// Training mode normalizes with batch statistics and updates the running
/// estimates; eval mode uses the running estimates only.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, BatchNorm<T>& bn, bool training) {
  return detail::batchnorm_impl(input, bn, training, nullptr);
}

}  // namespace occludrop
