#pragma once

// Competing occlusion / dropout strategies. Image-level strategies edit the
// input batch; feature-level strategies act at the insertion point of the
// backbone. All are training-time only and draw from the caller's stream.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "occludrop/lcd.hpp"
#include "occludrop/ops.hpp"
#include "occludrop/tensor.hpp"

namespace occludrop {

struct CutoutParams {
  std::size_t box_size = 16;
};
struct DropBlockParams {
  std::size_t block_size = 3;
  double drop_prob = 0.1;
};
struct WcdParams {
  double keep_ratio = 0.6;
};
struct LcdParams {
  GammaPolicy policy;
  bool use_defaults = true;  ///< derive gamma range from the channel count
};
struct ImageTemplateParams {
  double min_fraction = 0.2;
  double max_fraction = 0.5;
  double fill = 0.5;
};

using OcclusionStrategy = std::variant<std::monostate, CutoutParams, DropBlockParams, WcdParams, LcdParams,
                                       ImageTemplateParams>;

enum class StrategyDomain { none, image, feature };

inline StrategyDomain domain_of(const OcclusionStrategy& s) {
  if (std::holds_alternative<std::monostate>(s)) return StrategyDomain::none;
  if (std::holds_alternative<CutoutParams>(s) || std::holds_alternative<ImageTemplateParams>(s)) {
    return StrategyDomain::image;
  }
  return StrategyDomain::feature;
}

inline std::string strategy_name(const OcclusionStrategy& s) {
  static const char* names[] = {"none", "cutout", "dropblock", "wcd", "lcd", "image_template"};
  return names[s.index()];
}

/// Zero one box_size x box_size square per image, placed uniformly so it lies
/// fully inside. Images are [n,ch,H,W] values, modified in place.
template <typename T, typename Rng>
void cutout(std::span<T> images, const Shape& shape, std::size_t box_size, Rng& rng) {
  if (shape.size() != 4) throw DimensionError("cutout: expected [n,ch,H,W], got " + shape_str(shape));
  const std::size_t n = shape[0], ch = shape[1], h = shape[2], w = shape[3];
  if (box_size > h || box_size > w) {
    throw ContractError("cutout: box " + std::to_string(box_size) + " larger than image " + std::to_string(h) +
                        "x" + std::to_string(w));
  }
  if (box_size == 0) return;
  std::uniform_int_distribution<std::size_t> ry(0, h - box_size), rx(0, w - box_size);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t y0 = ry(rng), x0 = rx(rng);
    for (std::size_t c = 0; c < ch; ++c) {
      T* plane = images.data() + (t * ch + c) * h * w;
      for (std::size_t y = y0; y < y0 + box_size; ++y) std::fill_n(plane + y * w + x0, box_size, T(0));
    }
  }
}

/// Fill one random rectangle per image (side fractions drawn uniformly from
/// [min_fraction, max_fraction]) with a flat gray value.
template <typename T, typename Rng>
void image_template(std::span<T> images, const Shape& shape, const ImageTemplateParams& p, Rng& rng) {
  if (shape.size() != 4) throw DimensionError("image_template: expected [n,ch,H,W], got " + shape_str(shape));
  if (p.min_fraction < 0 || p.max_fraction > 1 || p.min_fraction > p.max_fraction) {
    throw ContractError("image_template: fraction range must satisfy 0 <= min <= max <= 1");
  }
  const std::size_t n = shape[0], ch = shape[1], h = shape[2], w = shape[3];
  std::uniform_real_distribution<double> frac(p.min_fraction, p.max_fraction);
  for (std::size_t t = 0; t < n; ++t) {
    const double f = frac(rng);
    const auto bh = static_cast<std::size_t>(std::floor(f * static_cast<double>(h)));
    const auto bw = static_cast<std::size_t>(std::floor(f * static_cast<double>(w)));
    std::uniform_int_distribution<std::size_t> ry(0, h - bh), rx(0, w - bw);
    const std::size_t y0 = ry(rng), x0 = rx(rng);
    for (std::size_t c = 0; c < ch; ++c) {
      T* plane = images.data() + (t * ch + c) * h * w;
      for (std::size_t y = y0; y < y0 + bh; ++y) std::fill_n(plane + y * w + x0, bw, static_cast<T>(p.fill));
    }
  }
}

/// Spatial keep mask per sample, [n, h*w], shared by every channel.
/// Seeds are Bernoulli over positions where a block fits entirely; each seed
/// zeroes the block anchored at its top-left corner.
template <typename Rng>
std::vector<std::uint8_t> dropblock_mask(std::size_t n, std::size_t h, std::size_t w, const DropBlockParams& p,
                                         Rng& rng) {
  if (p.drop_prob < 0.0 || p.drop_prob > 1.0) {
    throw ContractError("dropblock: drop_prob " + std::to_string(p.drop_prob) + " outside [0,1]");
  }
  if (p.block_size == 0 || p.block_size > h || p.block_size > w) {
    throw ContractError("dropblock: block_size must be in [1, spatial size]");
  }
  std::vector<std::uint8_t> keep(n * h * w, 1);
  if (p.drop_prob == 0.0) return keep;
  const std::size_t bs = p.block_size;
  const std::size_t valid_h = h - bs + 1, valid_w = w - bs + 1;
  const double seed_rate = std::min(
      1.0, p.drop_prob / static_cast<double>(bs * bs) * static_cast<double>(h * w) /
               static_cast<double>(valid_h * valid_w));
  std::bernoulli_distribution seed(seed_rate);
  for (std::size_t t = 0; t < n; ++t) {
    std::uint8_t* k = keep.data() + t * h * w;
    for (std::size_t y = 0; y < valid_h; ++y) {
      for (std::size_t x = 0; x < valid_w; ++x) {
        if (!seed(rng)) continue;
        for (std::size_t dy = 0; dy < bs; ++dy) std::fill_n(k + (y + dy) * w + x, bs, std::uint8_t{0});
      }
    }
  }
  return keep;
}

/// Apply a DropBlock mask to [n,c,h,w] features; survivors of each sample are
/// rescaled by (total positions / kept positions).
template <typename T, typename Rng>
Tensor<T> dropblock(const Tensor<T>& features, const DropBlockParams& p, Rng& rng) {
  detail::require_rank(features, 4, "dropblock");
  const std::size_t n = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  auto keep = dropblock_mask(n, h, w, p, rng);
  if (p.drop_prob == 0.0) return features;
  std::vector<T> dense(features.numel());
  for (std::size_t t = 0; t < n; ++t) {
    const std::uint8_t* k = keep.data() + t * h * w;
    const std::size_t kept = static_cast<std::size_t>(std::count(k, k + h * w, std::uint8_t{1}));
    const T gain = kept ? static_cast<T>(h * w) / static_cast<T>(kept) : T(0);
    for (std::size_t i = 0; i < c; ++i) {
      T* d = dense.data() + (t * c + i) * h * w;
      for (std::size_t s = 0; s < h * w; ++s) d[s] = k[s] ? gain : T(0);
    }
  }
  return apply_constant_mask(features, dense, "dropblock");
}

/// Weighted channel dropout. Channel scores are mean |activation|; per sample,
/// round(keep_ratio * c) channels are retained by weighted random sampling
/// without replacement (key u^(1/score), keep the largest keys).
template <typename T, typename Rng>
std::vector<std::uint8_t> wcd_keep(const Tensor<T>& features, const WcdParams& p, Rng& rng) {
  detail::require_rank(features, 4, "weighted_channel_dropout");
  if (!(p.keep_ratio > 0.0 && p.keep_ratio <= 1.0)) {
    throw ContractError("weighted_channel_dropout: keep_ratio must be in (0,1]");
  }
  const std::size_t n = features.dim(0), c = features.dim(1), hw = features.dim(2) * features.dim(3);
  const std::size_t retain = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(p.keep_ratio * static_cast<double>(c))), 1, c);
  std::vector<std::uint8_t> keep(n * c, 1);
  if (retain == c) return keep;
  auto xv = features.values();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::pair<double, std::size_t>> keys(c);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t i = 0; i < c; ++i) {
      double score = 0.0;
      for (std::size_t s = 0; s < hw; ++s) score += std::abs(static_cast<double>(xv[(t * c + i) * hw + s]));
      score = score / static_cast<double>(hw) + 1e-12;
      // log-key: log(u) / score, larger is kept
      keys[i] = {std::log(std::max(u(rng), 1e-300)) / score, i};
    }
    std::partial_sort(keys.begin(), keys.begin() + static_cast<long>(retain), keys.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = retain; r < c; ++r) keep[t * c + keys[r].second] = 0;
  }
  return keep;
}

template <typename T, typename Rng>
Tensor<T> weighted_channel_dropout(const Tensor<T>& features, const WcdParams& p, Rng& rng) {
  auto keep = wcd_keep(features, p, rng);
  if (std::all_of(keep.begin(), keep.end(), [](std::uint8_t k) { return k == 1; })) return features;
  const std::size_t hw = features.dim(2) * features.dim(3);
  std::vector<T> dense(features.numel());
  for (std::size_t q = 0; q < keep.size(); ++q) std::fill_n(dense.begin() + q * hw, hw, T(keep[q]));
  return apply_constant_mask(features, dense, "weighted_channel_dropout");
}

}  // namespace occludrop
