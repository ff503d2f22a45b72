#pragma once

// Channel-reweighting attention. A 1x1 convolution compresses the feature
// map, two fully-connected layers see all positions at once, and the result
// is squashed into one weight per channel. No global pooling is used, since
// pooled descriptors of zeroed channels carry no information.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>

#include "occludrop/conv.hpp"
#include "occludrop/ops.hpp"
#include "occludrop/tensor.hpp"

namespace occludrop {

enum class Squash { logistic, identity };

inline Squash parse_squash(const std::string& s) {
  if (s == "logistic") return Squash::logistic;
  if (s == "identity") return Squash::identity;
  throw ContractError("unknown squash '" + s + "' (expected logistic or identity)");
}

struct SamConfig {
  bool enabled = false;
  Squash squash = Squash::logistic;
  std::size_t c_mid = 0;   ///< 0 selects channels / 4
  std::size_t hidden = 0;  ///< 0 selects channels
};

template <typename T>
struct SamParams {
  Tensor<T> conv1x1;  ///< [c_mid, c, 1, 1]
  Tensor<T> fc1_weight, fc1_bias;
  Tensor<T> fc2_weight, fc2_bias;  ///< fc2 output dimension == c
  Squash squash = Squash::logistic;
  std::size_t channels = 0, height = 0, width = 0;

  /// He-uniform for the 1x1 conv and fc1; fc2 starts at zero so every
  /// channel receives the same initial weight.
  template <typename Rng>
  static SamParams init(std::size_t c, std::size_t h, std::size_t w, const SamConfig& cfg, Rng& rng) {
    SamParams p;
    p.channels = c;
    p.height = h;
    p.width = w;
    p.squash = cfg.squash;
    const std::size_t c_mid = cfg.c_mid ? cfg.c_mid : std::max<std::size_t>(1, c / 4);
    const std::size_t hidden = cfg.hidden ? cfg.hidden : c;
    auto uniform = [&rng](Shape shape, double fan_in) {
      const double bound = std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> u(-bound, bound);
      std::vector<T> v(shape_numel(shape));
      for (auto& x : v) x = static_cast<T>(u(rng));
      return Tensor<T>::from(std::move(shape), std::move(v), true);
    };
    p.conv1x1 = uniform({c_mid, c, 1, 1}, static_cast<double>(c));
    p.fc1_weight = uniform({hidden, c_mid * h * w}, static_cast<double>(c_mid * h * w));
    p.fc1_bias = Tensor<T>::zeros({hidden}, true);
    p.fc2_weight = Tensor<T>::zeros({c, hidden}, true);
    p.fc2_bias = Tensor<T>::full({c}, p.squash == Squash::logistic ? T(0) : T(1), true);
    return p;
  }

  std::size_t parameter_count() const {
    return conv1x1.numel() + fc1_weight.numel() + fc1_bias.numel() + fc2_weight.numel() + fc2_bias.numel();
  }
};

template <typename T>
struct SamOutput {
  Tensor<T> theta;   ///< [n, c]
  Tensor<T> output;  ///< [n, c, h, w]
};

template <typename T>
Tensor<T> sam_attention(const Tensor<T>& input, const SamParams<T>& p) {
  detail::require_rank(input, 4, "sam_forward");
  if (input.dim(1) != p.channels || input.dim(2) != p.height || input.dim(3) != p.width) {
    throw DimensionError("sam_forward: module built for [*," + std::to_string(p.channels) + "," +
                         std::to_string(p.height) + "," + std::to_string(p.width) + "], input is " +
                         shape_str(input.shape()));
  }
  auto compressed = flatten(conv2d(input, p.conv1x1, 1, 0));
  auto hidden = relu(linear(compressed, p.fc1_weight, p.fc1_bias));
  auto logits = linear(hidden, p.fc2_weight, p.fc2_bias);
  return p.squash == Squash::logistic ? sigmoid(logits) : logits;
}

/// theta = squash(fc2(relu(fc1(flatten(conv1x1(F)))))); out[t,i] = F[t,i] * theta[t,i].
template <typename T>
SamOutput<T> sam_forward(const Tensor<T>& input, const SamParams<T>& p) {
  auto theta = sam_attention(input, p);
  auto out = channel_scale(input, theta);
  return {std::move(theta), std::move(out)};
}

}  // namespace occludrop
