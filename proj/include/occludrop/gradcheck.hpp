#pragma once

// Central finite-difference verification of analytic gradients. 64-bit only.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "occludrop/ops.hpp"
#include "occludrop/tensor.hpp"

namespace occludrop {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error, so vanishing gradients are
  /// compared on an absolute scale.
  double floor = 1e-3;
  /// Fraction of each input's elements to perturb (at least one element).
  double sample_fraction = 1.0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  std::vector<double> max_relative_error;  // one entry per input
  double worst = 0.0;
  bool passed = true;
  std::string diagnostic;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff == 0.0) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// First node (inputs before users) holding a non-finite value, or empty.
inline std::string find_non_finite(const Tensor<double>& out) {
  for (Node<double>* n : topological_order(out.node().get())) {
    for (double v : n->value) {
      if (!std::isfinite(v)) return n->op;
    }
  }
  return {};
}

using GraphFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares d(graph)/d(inputs) from backward() against central differences.
/// Non-scalar outputs are contracted with a fixed random weighting first.
inline GradCheckReport finite_difference_check(const GraphFn& graph, std::vector<Tensor<double>> inputs,
                                               const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  std::mt19937_64 rng(opt.seed);
  Tensor<double> projection;

  auto evaluate = [&](bool build_projection) -> Tensor<double> {
    Tensor<double> out = graph(inputs);
    if (out.is_scalar()) return out;
    if (build_projection || !projection.defined()) {
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      std::vector<double> w(out.numel());
      for (auto& v : w) v = u(rng);
      projection = Tensor<double>::from(out.shape(), std::move(w));
    }
    return sum(mul(out, projection));
  };

  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor<double> loss = evaluate(true);
  if (auto bad = find_non_finite(loss); !bad.empty()) {
    report.passed = false;
    report.diagnostic = "non-finite value produced by op '" + bad + "'";
    return report;
  }
  backward(loss);

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    std::vector<double> analytic(in.grad().begin(), in.grad().end());
    std::vector<std::size_t> idx(in.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.sample_fraction < 1.0) {
      std::shuffle(idx.begin(), idx.end(), rng);
      const auto keep = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::ceil(opt.sample_fraction * static_cast<double>(idx.size()))));
      idx.resize(keep);
      std::sort(idx.begin(), idx.end());
    }
    double worst = 0.0;
    auto vals = in.values();
    for (std::size_t i : idx) {
      const double orig = vals[i];
      vals[i] = orig + opt.step;
      const double up = evaluate(false).item();
      vals[i] = orig - opt.step;
      const double down = evaluate(false).item();
      vals[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.passed = false;
        report.diagnostic = "non-finite loss while perturbing input " + std::to_string(k);
        continue;
      }
      const double numeric = (up - down) / (2.0 * opt.step);
      worst = std::max(worst, relative_error(analytic[i], numeric, opt.floor));
    }
    report.max_relative_error.push_back(worst);
    report.worst = std::max(report.worst, worst);
  }
  if (report.worst >= opt.tolerance) report.passed = false;
  return report;
}

}  // namespace occludrop
