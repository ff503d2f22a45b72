#pragma once

// Four-stage residual backbone with one optional insertion point.
//
// Layout: stem conv3x3 -> BN -> ReLU at full resolution, then four stages of
//   a = ReLU(BN(conv3x3 stride 2))
//   b = BN(conv3x3(a))              <- regularized layer of the insertion stage
//   b = drop(b); b = SAM(b)         <- insertion point (configured stage only)
//   out = ReLU(b + BN(conv1x1 stride 2 (input)))
// followed by flatten -> linear embedding. With the lcd_then_maskedbn order
// the drop moves between conv and BN, and BN skips the dropped slices.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "occludrop/batchnorm.hpp"
#include "occludrop/conv.hpp"
#include "occludrop/lcd.hpp"
#include "occludrop/ops.hpp"
#include "occludrop/sam.hpp"
#include "occludrop/spatial_reg.hpp"
#include "occludrop/strategies.hpp"

namespace occludrop {

inline constexpr std::size_t kStages = 4;

struct ModelConfig {
  std::size_t in_channels = 1;
  std::size_t image_size = 64;
  std::size_t width_base = 16;
  std::size_t embedding_dim = 128;
  /// Insertion stage (1..4); also the stage whose second conv is regularized.
  int stage = 3;
  /// Feature-level strategy at the insertion point (monostate, LCD, DropBlock or WCD).
  OcclusionStrategy feature_strategy;
  LcdOrder order = LcdOrder::bn_then_lcd;
  SamConfig sam;
  ColumnRule column_rule = ColumnRule::x_offset;
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;

  std::size_t stage_width(int s) const { return width_base << (s - 1); }
  std::size_t stage_size(int s) const { return image_size >> s; }
};

/// Returns cfg with the insertion moved to `stage`; throws on unknown stages.
inline ModelConfig place_lcd(ModelConfig cfg, int stage) {
  if (stage < 1 || stage > static_cast<int>(kStages)) {
    throw ConfigError("lcd.stage must be one of 1..4, got " + std::to_string(stage));
  }
  cfg.stage = stage;
  return cfg;
}

template <typename T>
struct ConvBn {
  Tensor<T> weight;
  BatchNorm<T> bn;
  std::size_t stride = 1, padding = 1;
};

template <typename T>
struct StageBlock {
  ConvBn<T> a, b, proj;
};

template <typename T>
struct ForwardOptions {
  bool training = false;
  /// Stream for training-time feature strategies.
  std::mt19937_64* rng = nullptr;
  /// Drop applied after the BN of `forced_stage`'s second conv in any mode.
  /// Used by diagnostics; the model's own strategy is skipped when set.
  const DropMask* forced_mask = nullptr;
  int forced_stage = 3;
};

template <typename T>
struct ForwardResult {
  Tensor<T> embedding;           ///< [n, L]
  Tensor<T> response;            ///< regularized layer output at the insertion stage
  std::optional<DropMask> mask;  ///< channel mask applied at the insertion point
  Tensor<T> theta;               ///< attention weights when SAM is active
};

template <typename T>
class Backbone {
 public:
  Backbone(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    if (cfg.image_size % 16 != 0 || cfg.image_size == 0) {
      throw ConfigError("model: image size must be a positive multiple of 16, got " +
                        std::to_string(cfg.image_size));
    }
    place_lcd(cfg, cfg.stage);
    std::mt19937_64 rng(init_seed);
    const T mom = static_cast<T>(cfg.bn_momentum), eps = static_cast<T>(cfg.bn_epsilon);
    stem_ = make_conv_bn(cfg.width_base, cfg.in_channels, 3, 1, 1, mom, eps, rng);
    std::size_t prev = cfg.width_base;
    for (int s = 1; s <= static_cast<int>(kStages); ++s) {
      const std::size_t c = cfg.stage_width(s);
      StageBlock<T> blk;
      blk.a = make_conv_bn(c, prev, 3, 2, 1, mom, eps, rng);
      blk.b = make_conv_bn(c, c, 3, 1, 1, mom, eps, rng);
      blk.proj = make_conv_bn(c, prev, 1, 2, 0, mom, eps, rng);
      stages_.push_back(std::move(blk));
      prev = c;
    }
    const std::size_t flat = prev * cfg.stage_size(4) * cfg.stage_size(4);
    embed_weight_ = he_uniform({cfg.embedding_dim, flat}, static_cast<double>(flat), rng);
    embed_bias_ = Tensor<T>::zeros({cfg.embedding_dim}, true);
    if (cfg.sam.enabled) {
      // Separate stream: backbone weights are identical with or without SAM.
      std::mt19937_64 sam_rng(init_seed ^ 0x5a4d5a4d5a4d5a4dULL);
      const std::size_t hs = cfg.stage_size(cfg.stage);
      sam_ = SamParams<T>::init(cfg.stage_width(cfg.stage), hs, hs, cfg.sam, sam_rng);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const std::optional<SamParams<T>>& sam() const { return sam_; }
  std::optional<SamParams<T>>& sam() { return sam_; }
  /// Weights of the regularized layer (second conv of the insertion stage).
  const Tensor<T>& regularized_weight() const { return stages_[cfg_.stage - 1].b.weight; }
  FilterBank<T> filter_bank() const { return FilterBank<T>(regularized_weight(), cfg_.column_rule); }

  ForwardResult<T> forward(const Tensor<T>& images, const ForwardOptions<T>& opt) {
    if (images.rank() != 4 || images.dim(1) != cfg_.in_channels || images.dim(2) != cfg_.image_size ||
        images.dim(3) != cfg_.image_size) {
      throw DimensionError("backbone: expected [n," + std::to_string(cfg_.in_channels) + "," +
                           std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "], got " +
                           shape_str(images.shape()));
    }
    ForwardResult<T> res;
    auto x = relu(conv_bn(images, stem_, opt.training));
    for (int s = 1; s <= static_cast<int>(kStages); ++s) {
      auto& blk = stages_[s - 1];
      auto a = relu(conv_bn(x, blk.a, opt.training));
      auto bconv = conv2d(a, blk.b.weight, blk.b.stride, blk.b.padding);
      Tensor<T> b;
      const bool insertion = s == cfg_.stage;
      const bool forced = opt.forced_mask && s == opt.forced_stage;
      const bool lcd_active = insertion && opt.training && !forced &&
                              std::holds_alternative<LcdParams>(cfg_.feature_strategy);
      if (lcd_active && cfg_.order == LcdOrder::lcd_then_maskedbn) {
        res.mask = sample_lcd(bconv, opt);
        res.response = bconv;
        b = masked_batchnorm(apply_lcd(bconv, *res.mask, true), *res.mask, blk.b.bn, true);
      } else {
        b = batchnorm(bconv, blk.b.bn, opt.training);
        if (insertion) res.response = b;
        if (forced) {
          require_mask_matches(b, *opt.forced_mask, "forced drop");
          b = apply_constant_mask(b, opt.forced_mask->template expand<T>(), "forced_drop");
          if (insertion) res.mask = *opt.forced_mask;
        } else if (insertion && opt.training) {
          b = apply_feature_strategy(b, opt, res);
        }
      }
      if (insertion && sam_) {
        auto out = sam_forward(b, *sam_);
        b = out.output;
        res.theta = out.theta;
      }
      auto skip = conv_bn(x, blk.proj, opt.training);
      x = relu(add(b, skip));
    }
    res.embedding = linear(flatten(x), embed_weight_, embed_bias_);
    return res;
  }

  /// Trainable tensors in a fixed order with stable names.
  std::vector<std::pair<std::string, Tensor<T>>> parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto add_cb = [&out](const std::string& name, const ConvBn<T>& cb) {
      out.emplace_back(name + ".weight", cb.weight);
      out.emplace_back(name + ".bn.scale", cb.bn.scale);
      out.emplace_back(name + ".bn.shift", cb.bn.shift);
    };
    add_cb("stem", stem_);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string p = "stage" + std::to_string(s + 1);
      add_cb(p + ".a", stages_[s].a);
      add_cb(p + ".b", stages_[s].b);
      add_cb(p + ".proj", stages_[s].proj);
    }
    out.emplace_back("embed.weight", embed_weight_);
    out.emplace_back("embed.bias", embed_bias_);
    if (sam_) {
      out.emplace_back("sam.conv1x1", sam_->conv1x1);
      out.emplace_back("sam.fc1.weight", sam_->fc1_weight);
      out.emplace_back("sam.fc1.bias", sam_->fc1_bias);
      out.emplace_back("sam.fc2.weight", sam_->fc2_weight);
      out.emplace_back("sam.fc2.bias", sam_->fc2_bias);
    }
    return out;
  }

  /// Running normalization statistics.
  std::vector<std::pair<std::string, Tensor<T>>> buffers() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto add_cb = [&out](const std::string& name, const ConvBn<T>& cb) {
      out.emplace_back(name + ".bn.running_mean", cb.bn.stats.running_mean);
      out.emplace_back(name + ".bn.running_variance", cb.bn.stats.running_variance);
    };
    add_cb("stem", stem_);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string p = "stage" + std::to_string(s + 1);
      add_cb(p + ".a", stages_[s].a);
      add_cb(p + ".b", stages_[s].b);
      add_cb(p + ".proj", stages_[s].proj);
    }
    return out;
  }

  std::size_t parameter_count(bool include_sam = true) const {
    std::size_t total = 0;
    for (const auto& [name, t] : parameters()) {
      if (!include_sam && name.rfind("sam.", 0) == 0) continue;
      total += t.numel();
    }
    return total;
  }

  std::size_t degenerate_channels() const { return stages_[cfg_.stage - 1].b.bn.stats.degenerate_channels; }

 private:
  template <typename Rng>
  static Tensor<T> he_uniform(Shape shape, double fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(u(rng));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
  }

  template <typename Rng>
  static ConvBn<T> make_conv_bn(std::size_t out, std::size_t in, std::size_t k, std::size_t stride,
                                std::size_t pad, T mom, T eps, Rng& rng) {
    ConvBn<T> cb;
    cb.weight = he_uniform({out, in, k, k}, static_cast<double>(in * k * k), rng);
    cb.bn = BatchNorm<T>(out, mom, eps);
    cb.stride = stride;
    cb.padding = pad;
    return cb;
  }

  static Tensor<T> conv_bn(const Tensor<T>& x, ConvBn<T>& cb, bool training) {
    return batchnorm(conv2d(x, cb.weight, cb.stride, cb.padding), cb.bn, training);
  }

  DropMask sample_lcd(const Tensor<T>& features, const ForwardOptions<T>& opt) const {
    if (!opt.rng) throw ContractError("backbone: training with a stochastic strategy requires an rng");
    const auto& p = std::get<LcdParams>(cfg_.feature_strategy);
    const std::size_t c = features.dim(1);
    const GammaPolicy policy = p.use_defaults ? GammaPolicy::defaults_for(c, p.policy.rng_seed) : p.policy;
    return sample_mask(features.dim(0), c, features.dim(2), features.dim(3), policy, *opt.rng);
  }

  Tensor<T> apply_feature_strategy(const Tensor<T>& b, const ForwardOptions<T>& opt, ForwardResult<T>& res) const {
    return std::visit(
        [&](const auto& p) -> Tensor<T> {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, LcdParams>) {
            res.mask = sample_lcd(b, opt);
            return apply_lcd(b, *res.mask, true);
          } else if constexpr (std::is_same_v<P, DropBlockParams>) {
            if (!opt.rng) throw ContractError("backbone: dropblock requires an rng");
            return dropblock(b, p, *opt.rng);
          } else if constexpr (std::is_same_v<P, WcdParams>) {
            if (!opt.rng) throw ContractError("backbone: wcd requires an rng");
            return weighted_channel_dropout(b, p, *opt.rng);
          } else {
            return b;
          }
        },
        cfg_.feature_strategy);
  }

  ModelConfig cfg_;
  ConvBn<T> stem_;
  std::vector<StageBlock<T>> stages_;
  Tensor<T> embed_weight_, embed_bias_;
  std::optional<SamParams<T>> sam_;
};

}  // namespace occludrop
