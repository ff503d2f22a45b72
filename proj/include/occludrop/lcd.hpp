#pragma once

// Locality-aware channel-wise dropout: per sample, zero a uniformly sized,
// uniformly chosen set of whole channels. Also the normalization statistics
// that exclude dropped channels when the drop precedes batch normalization.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "occludrop/batchnorm.hpp"
#include "occludrop/ops.hpp"
#include "occludrop/tensor.hpp"

namespace occludrop {

struct GammaPolicy {
  std::size_t gamma_min = 0;
  std::size_t gamma_max = 0;
  std::uint64_t rng_seed = 0;

  /// floor(0.1 c) .. floor(0.6 c)
  static GammaPolicy defaults_for(std::size_t channels, std::uint64_t seed = 0) {
    return {channels / 10, (channels * 6) / 10, seed};
  }
  void validate(std::size_t channels) const {
    if (gamma_min > gamma_max) {
      throw ContractError("gamma policy: gamma_min " + std::to_string(gamma_min) + " > gamma_max " +
                          std::to_string(gamma_max));
    }
    if (gamma_max > channels) {
      throw ContractError("gamma policy: gamma_max " + std::to_string(gamma_max) + " exceeds channel count " +
                          std::to_string(channels));
    }
  }
};

/// Channel-constant binary mask. Storage is per (sample, channel); the
/// spatial extent is implied, so M[t,i,:,:] is all-0 or all-1 by construction.
class DropMask {
 public:
  DropMask() = default;
  DropMask(std::size_t n, std::size_t c, std::size_t h, std::size_t w)
      : n_(n), c_(c), h_(h), w_(w), keep_(n * c, 1), dropped_(n), gamma_(n, 0) {}

  /// Mask that drops exactly the given channels of each sample.
  static DropMask from_indices(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                               const std::vector<std::vector<std::size_t>>& dropped) {
    if (dropped.size() != n) throw DimensionError("DropMask: need one index set per sample");
    DropMask m(n, c, h, w);
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t i : dropped[t]) m.drop(t, i);
    }
    return m;
  }

  std::size_t batch() const { return n_; }
  std::size_t channels() const { return c_; }
  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  Shape shape() const { return {n_, c_, h_, w_}; }

  bool kept(std::size_t t, std::size_t i) const { return keep_[t * c_ + i] != 0; }
  std::uint8_t at(std::size_t t, std::size_t i, std::size_t /*y*/, std::size_t /*x*/) const {
    return keep_[t * c_ + i];
  }
  const std::vector<std::uint8_t>& channel_keep() const { return keep_; }
  const std::vector<std::size_t>& dropped_indices(std::size_t t) const { return dropped_[t]; }
  std::size_t gamma(std::size_t t) const { return gamma_[t]; }

  /// eta_i: samples whose channel i was dropped.
  std::size_t dropped_count(std::size_t i) const {
    std::size_t eta = 0;
    for (std::size_t t = 0; t < n_; ++t) eta += kept(t, i) ? 0 : 1;
    return eta;
  }

  /// Dense n*c*h*w expansion.
  template <typename T>
  std::vector<T> expand() const {
    const std::size_t hw = h_ * w_;
    std::vector<T> dense(n_ * c_ * hw);
    for (std::size_t p = 0; p < n_ * c_; ++p) std::fill_n(dense.begin() + p * hw, hw, T(keep_[p]));
    return dense;
  }

  void drop(std::size_t t, std::size_t i) {
    if (i >= c_) throw ContractError("DropMask: channel index " + std::to_string(i) + " >= " + std::to_string(c_));
    if (!kept(t, i)) throw ContractError("DropMask: channel " + std::to_string(i) + " dropped twice");
    keep_[t * c_ + i] = 0;
    dropped_[t].push_back(i);
    ++gamma_[t];
  }

 private:
  std::size_t n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<std::uint8_t> keep_;
  std::vector<std::vector<std::size_t>> dropped_;
  std::vector<std::size_t> gamma_;
};

/// gamma_t ~ U{gamma_min..gamma_max}; then gamma_t distinct channels
/// uniformly without replacement (partial Fisher-Yates).
template <typename Rng>
DropMask sample_mask(std::size_t n, std::size_t c, std::size_t h, std::size_t w, const GammaPolicy& policy,
                     Rng& rng) {
  policy.validate(c);
  DropMask mask(n, c, h, w);
  std::uniform_int_distribution<std::size_t> gamma_dist(policy.gamma_min, policy.gamma_max);
  std::vector<std::size_t> perm(c);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t gamma = gamma_dist(rng);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t k = 0; k < gamma; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, c - 1);
      std::swap(perm[k], perm[pick(rng)]);
      mask.drop(t, perm[k]);
    }
  }
  return mask;
}

template <typename T>
void require_mask_matches(const Tensor<T>& input, const DropMask& mask, const char* op) {
  detail::require_rank(input, 4, op);
  if (input.shape() != mask.shape()) {
    throw DimensionError(std::string(op) + ": input " + shape_str(input.shape()) + " vs mask " +
                         shape_str(mask.shape()));
  }
}

/// Training: F o M. Eval: identity (the same tensor is returned).
template <typename T>
Tensor<T> apply_lcd(const Tensor<T>& input, const DropMask& mask, bool training) {
  require_mask_matches(input, mask, "apply_lcd");
  if (!training) return input;
  return apply_constant_mask(input, mask.expand<T>(), "apply_lcd");
}

/// Per-channel mean over surviving samples:
/// u_i = sum_{t kept} sum_{j,k} x / ((n - eta_i) h w).
template <typename T>
std::vector<T> masked_batchnorm_mean(const Tensor<T>& input, const DropMask& mask) {
  require_mask_matches(input, mask, "masked_batchnorm_mean");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  auto xv = input.values();
  std::vector<T> u(c);
  for (std::size_t i = 0; i < c; ++i) {
    const std::size_t eta = mask.dropped_count(i);
    if (eta == n) {
      throw NumericError("masked_batchnorm_mean: channel " + std::to_string(i) + " dropped in every sample");
    }
    T acc = T(0);
    for (std::size_t t = 0; t < n; ++t) {
      if (!mask.kept(t, i)) continue;
      for (std::size_t s = 0; s < hw; ++s) acc += xv[(t * c + i) * hw + s];
    }
    u[i] = acc / static_cast<T>((n - eta) * hw);
  }
  return u;
}

/// Companion (biased) variance over the same surviving entries.
template <typename T>
std::vector<T> masked_batchnorm_variance(const Tensor<T>& input, const DropMask& mask) {
  const auto u = masked_batchnorm_mean(input, mask);
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  auto xv = input.values();
  std::vector<T> var(c);
  for (std::size_t i = 0; i < c; ++i) {
    T acc = T(0);
    for (std::size_t t = 0; t < n; ++t) {
      if (!mask.kept(t, i)) continue;
      for (std::size_t s = 0; s < hw; ++s) {
        const T d = xv[(t * c + i) * hw + s] - u[i];
        acc += d * d;
      }
    }
    var[i] = acc / static_cast<T>((n - mask.dropped_count(i)) * hw);
  }
  return var;
}

/// Batch normalization whose statistics skip dropped (sample, channel)
/// slices; dropped slices stay zero in the output. A channel dropped by every
/// sample falls back to running statistics and is counted in
/// stats.degenerate_channels. Eval mode ignores the mask.
template <typename T>
Tensor<T> masked_batchnorm(const Tensor<T>& input, const DropMask& mask, BatchNorm<T>& bn, bool training) {
  require_mask_matches(input, mask, "masked_batchnorm");
  if (!training) return batchnorm(input, bn, false);
  return detail::batchnorm_impl(input, bn, true, &mask.channel_keep());
}

enum class LcdOrder { bn_then_lcd, lcd_then_maskedbn };

inline LcdOrder parse_lcd_order(const std::string& s) {
  if (s == "bn_then_lcd") return LcdOrder::bn_then_lcd;
  if (s == "lcd_then_maskedbn") return LcdOrder::lcd_then_maskedbn;
  throw ContractError("unknown lcd order '" + s + "'");
}

inline const char* to_string(LcdOrder o) {
  return o == LcdOrder::bn_then_lcd ? "bn_then_lcd" : "lcd_then_maskedbn";
}

}  // namespace occludrop
