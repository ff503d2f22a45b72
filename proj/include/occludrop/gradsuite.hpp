#pragma once

// Finite-difference checks of every differentiable primitive on randomized
// small shapes. Shared by the `gradcheck` subcommand and the test suites.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "occludrop/batchnorm.hpp"
#include "occludrop/conv.hpp"
#include "occludrop/gradcheck.hpp"
#include "occludrop/lcd.hpp"
#include "occludrop/margin.hpp"
#include "occludrop/ops.hpp"
#include "occludrop/sam.hpp"
#include "occludrop/spatial_reg.hpp"

namespace occludrop {

struct GradCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed, const GradCheckOptions&)> run;
};

namespace detail {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>::from(std::move(shape), std::move(v), true);
}

/// Values bounded away from zero (|x| in [0.05, 1]) with random sign.
inline Tensor<double> off_zero_tensor(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor<double>::from(std::move(shape), std::move(v), true);
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace detail

inline std::vector<GradCase> gradient_cases() {
  using detail::pick;
  using detail::random_tensor;
  using T = Tensor<double>;
  std::vector<GradCase> cases;

  cases.push_back({"conv2d", [](std::uint64_t seed, const GradCheckOptions& o) {
                     std::mt19937_64 rng(seed);
                     const std::size_t n = pick(rng, 1, 2), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
                     const std::size_t k = pick(rng, 0, 1) ? 3 : 1, stride = pick(rng, 1, 2), pad = k == 3 ? pick(rng, 0, 1) : 0;
                     const std::size_t hw = pick(rng, 4, 6);
                     return finite_difference_check(
                         [=](const std::vector<T>& in) { return conv2d(in[0], in[1], stride, pad); },
                         {random_tensor({n, ci, hw, hw}, rng), random_tensor({co, ci, k, k}, rng)}, o);
                   }});
  cases.push_back({"linear", [](std::uint64_t seed, const GradCheckOptions& o) {
                     std::mt19937_64 rng(seed);
                     const std::size_t n = pick(rng, 1, 4), di = pick(rng, 1, 6), dout = pick(rng, 1, 5);
                     return finite_difference_check(
                         [](const std::vector<T>& in) { return linear(in[0], in[1], in[2]); },
                         {random_tensor({n, di}, rng), random_tensor({dout, di}, rng), random_tensor({dout}, rng)}, o);
                   }});
  cases.push_back({"batchnorm", [](std::uint64_t seed, const GradCheckOptions& o) {
                     std::mt19937_64 rng(seed);
                     const std::size_t n = pick(rng, 2, 4), c = pick(rng, 1, 3), hw = pick(rng, 1, 3);
                     auto bn = std::make_shared<BatchNorm<double>>(c);
                     return finite_difference_check(
                         [bn](const std::vector<T>& in) {
                           bn->scale = in[1];
                           bn->shift = in[2];
                           return batchnorm(in[0], *bn, true);
                         },
                         {random_tensor({n, c, hw, hw}, rng), random_tensor({c}, rng, 0.5, 1.5), random_tensor({c}, rng)},
                         o);
                   }});
  cases.push_back({"masked_batchnorm", [](std::uint64_t seed, const GradCheckOptions& o) {
                     std::mt19937_64 rng(seed);
                     const std::size_t n = pick(rng, 3, 5), c = pick(rng, 2, 4), hw = pick(rng, 1, 3);
                     auto bn = std::make_shared<BatchNorm<double>>(c);
                     // at most n-2 drops per channel so every channel keeps two samples
                     std::vector<std::vector<std::size_t>> drops(n);
                     for (std::size_t i = 0; i < c; ++i) {
                       const std::size_t eta = pick(rng, 0, n - 2);
                       std::vector<std::size_t> samples(n);
                       for (std::size_t t = 0; t < n; ++t) samples[t] = t;
                       std::shuffle(samples.begin(), samples.end(), rng);
                       for (std::size_t k = 0; k < eta; ++k) drops[samples[k]].push_back(i);
                     }
                     const auto mask = DropMask::from_indices(n, c, hw, hw, drops);
                     return finite_difference_check(
                         [bn, mask](const std::vector<T>& in) {
                           bn->scale = in[1];
                           bn->shift = in[2];
                           return masked_batchnorm(apply_lcd(in[0], mask, true), mask, *bn, true);
                         },
                         {random_tensor({n, c, hw, hw}, rng), random_tensor({c}, rng, 0.5, 1.5), random_tensor({c}, rng)},
                         o);
                   }});
  cases.push_back({"relu", [](std::uint64_t seed, const GradCheckOptions& o) {
                     std::mt19937_64 rng(seed);
                     return finite_difference_check([](const std::vector<T>& in) { return relu(in[0]); },
                                                    {detail::off_zero_tensor({pick(rng, 1, 3), pick(rng, 2, 6)}, rng)}, o);
                   }});
  cases.push_back({"global_avg_pool", [](std::uint64_t seed, const GradCheckOptions& o) {
                     std::mt19937_64 rng(seed);
                     return finite_difference_check(
                         [](const std::vector<T>& in) { return global_avg_pool(in[0]); },
                         {random_tensor({pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}, rng)}, o);
                   }});
  cases.push_back({"lcd_apply", [](std::uint64_t seed, const GradCheckOptions& o) {
                     std::mt19937_64 rng(seed);
                     const std::size_t n = pick(rng, 1, 3), c = pick(rng, 2, 6), hw = pick(rng, 1, 3);
                     const auto mask = sample_mask(n, c, hw, hw, GammaPolicy{1, c - 1, 0}, rng);
                     return finite_difference_check(
                         [mask](const std::vector<T>& in) { return apply_lcd(in[0], mask, true); },
                         {random_tensor({n, c, hw, hw}, rng)}, o);
                   }});
  cases.push_back({"sam", [](std::uint64_t seed, const GradCheckOptions& o) {
                     std::mt19937_64 rng(seed);
                     const std::size_t n = pick(rng, 1, 3), c = pick(rng, 2, 4), hw = pick(rng, 1, 3);
                     SamConfig cfg;
                     cfg.enabled = true;
                     cfg.c_mid = pick(rng, 1, 2);
                     cfg.hidden = pick(rng, 2, 4);
                     cfg.squash = pick(rng, 0, 1) ? Squash::logistic : Squash::identity;
                     auto p = std::make_shared<SamParams<double>>(SamParams<double>::init(c, hw, hw, cfg, rng));
                     return finite_difference_check(
                         [p](const std::vector<T>& in) {
                           p->conv1x1 = in[1];
                           p->fc1_weight = in[2];
                           p->fc1_bias = in[3];
                           p->fc2_weight = in[4];
                           p->fc2_bias = in[5];
                           return sam_forward(in[0], *p).output;
                         },
                         {random_tensor({n, c, hw, hw}, rng), random_tensor(p->conv1x1.shape(), rng),
                          random_tensor(p->fc1_weight.shape(), rng), random_tensor(p->fc1_bias.shape(), rng),
                          random_tensor(p->fc2_weight.shape(), rng), random_tensor(p->fc2_bias.shape(), rng)},
                         o);
                   }});
  cases.push_back({"filter_orthogonal_loss", [](std::uint64_t seed, const GradCheckOptions& o) {
                     std::mt19937_64 rng(seed);
                     const std::size_t co = pick(rng, 2, 4), ci = pick(rng, 1, 3), k = pick(rng, 0, 1) ? 3 : 2;
                     const auto rule = pick(rng, 0, 1) ? ColumnRule::x_offset : ColumnRule::y_offset;
                     return finite_difference_check(
                         [rule](const std::vector<T>& in) { return filter_orthogonal_loss(FilterBank<double>(in[0], rule)); },
                         {random_tensor({co, ci, k, k}, rng)}, o);
                   }});
  cases.push_back({"response_orthogonal_loss", [](std::uint64_t seed, const GradCheckOptions& o) {
                     std::mt19937_64 rng(seed);
                     return finite_difference_check(
                         [](const std::vector<T>& in) { return response_orthogonal_loss(ResponseSet<double>(in[0])); },
                         {random_tensor({pick(rng, 1, 3), pick(rng, 2, 4), pick(rng, 1, 3), pick(rng, 2, 3)}, rng)}, o);
                   }});
  cases.push_back({"margin_loss", [](std::uint64_t seed, const GradCheckOptions& o) {
                     std::mt19937_64 rng(seed);
                     const std::size_t n = pick(rng, 1, 4), dim = pick(rng, 2, 5), k = pick(rng, 2, 5);
                     std::vector<std::size_t> labels(n);
                     for (auto& y : labels) y = pick(rng, 0, k - 1);
                     const double m = pick(rng, 0, 1) ? 0.5 : 0.2, s = pick(rng, 0, 1) ? 64.0 : 4.0;
                     return finite_difference_check(
                         [labels, m, s](const std::vector<T>& in) {
                           MarginHead<double> head;
                           head.weight = in[1];
                           head.margin = m;
                           head.scale = s;
                           return margin_loss(in[0], labels, head);
                         },
                         {random_tensor({n, dim}, rng), random_tensor({k, dim}, rng)}, o);
                   }});
  cases.push_back({"composite", [](std::uint64_t seed, const GradCheckOptions& o) {
                     std::mt19937_64 rng(seed);
                     const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 3), hw = pick(rng, 1, 3);
                     return finite_difference_check(
                         [](const std::vector<T>& in) {
                           auto a = sub(mul(in[0], in[1]), scale(in[1], 0.5));
                           auto b = channel_scale(add(a, in[0]), sigmoid(in[2]));
                           return mean(flatten(b));
                         },
                         {random_tensor({n, c, hw, hw}, rng), random_tensor({n, c, hw, hw}, rng),
                          random_tensor({n, c}, rng)},
                         o);
                   }});
  return cases;
}

struct GradSuiteResult {
  std::string name;
  std::size_t seeds = 0;
  std::size_t failures = 0;
  double worst = 0;
  std::string diagnostic;
  bool passed() const { return failures == 0; }
};

inline std::vector<GradSuiteResult> run_gradient_suite(std::size_t seeds, const GradCheckOptions& base = {},
                                                       std::uint64_t first_seed = 1) {
  std::vector<GradSuiteResult> out;
  for (const auto& c : gradient_cases()) {
    GradSuiteResult r;
    r.name = c.name;
    for (std::size_t k = 0; k < seeds; ++k) {
      GradCheckOptions o = base;
      o.seed = first_seed + k;
      const auto rep = c.run(first_seed + k, o);
      ++r.seeds;
      r.worst = std::max(r.worst, rep.worst);
      if (!rep.passed) {
        ++r.failures;
        if (r.diagnostic.empty()) {
          r.diagnostic = "seed " + std::to_string(first_seed + k) + ": worst " + std::to_string(rep.worst) +
                         (rep.diagnostic.empty() ? "" : " (" + rep.diagnostic + ")");
        }
      }
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace occludrop
