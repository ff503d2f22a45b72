#pragma once

// Spatial regularization: a filter orthogonality loss over per-filter column
// decompositions, and a response decorrelation loss over channel maps. Both
// push the channels of one convolution layer toward distinct, local regions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <string>
#include <vector>

#include "occludrop/ops.hpp"
#include "occludrop/tensor.hpp"

namespace occludrop {

/// How a [c_in,k,k] filter is split into k columns.
enum class ColumnRule {
  x_offset,  ///< (c_in*k) x k matrix; column p holds w[:, :, p]
  y_offset,  ///< column p holds w[:, p, :]
};

inline ColumnRule parse_column_rule(const std::string& s) {
  if (s == "x_offset") return ColumnRule::x_offset;
  if (s == "y_offset") return ColumnRule::y_offset;
  throw ContractError("unknown column rule '" + s + "' (expected x_offset or y_offset)");
}

/// Convolution weights [c_out,c_in,k,k] viewed as per-filter column matrices.
template <typename T>
class FilterBank {
 public:
  explicit FilterBank(Tensor<T> weights, ColumnRule rule = ColumnRule::x_offset)
      : weights_(std::move(weights)), rule_(rule) {
    detail::require_rank(weights_, 4, "FilterBank");
    if (weights_.dim(2) != weights_.dim(3)) {
      throw DimensionError("FilterBank: kernel axes (2,3) must be square, got " + shape_str(weights_.shape()));
    }
  }
  const Tensor<T>& weights() const { return weights_; }
  ColumnRule rule() const { return rule_; }
  std::size_t filters() const { return weights_.dim(0); }
  std::size_t columns() const { return weights_.dim(3); }
  std::size_t column_length() const { return weights_.dim(1) * weights_.dim(2); }

  /// Flat index into weights of element (q, p) of filter i's column view.
  std::size_t flat_index(std::size_t i, std::size_t q, std::size_t p) const {
    const std::size_t c_in = weights_.dim(1), k = weights_.dim(2);
    const std::size_t ci = q / k, r = q % k;
    const std::size_t y = rule_ == ColumnRule::x_offset ? r : p;
    const std::size_t x = rule_ == ColumnRule::x_offset ? p : r;
    return ((i * c_in + ci) * k + y) * k + x;
  }
  T column_element(std::size_t i, std::size_t q, std::size_t p) const {
    return weights_.values()[flat_index(i, q, p)];
  }

 private:
  Tensor<T> weights_;
  ColumnRule rule_;
};

/// Responses [n,c,h,w] of the regularized layer; channel f_i has length h*w.
template <typename T>
class ResponseSet {
 public:
  explicit ResponseSet(Tensor<T> responses) : responses_(std::move(responses)) {
    detail::require_rank(responses_, 4, "ResponseSet");
  }
  const Tensor<T>& responses() const { return responses_; }
  std::size_t batch() const { return responses_.dim(0); }
  std::size_t channels() const { return responses_.dim(1); }
  std::size_t plane() const { return responses_.dim(2) * responses_.dim(3); }
  std::span<const T> flattened(std::size_t t, std::size_t i) const {
    return responses_.values().subspan((t * channels() + i) * plane(), plane());
  }

 private:
  Tensor<T> responses_;
};

namespace detail {

template <typename T>
T norm_of(std::span<const T> v) {
  T acc = T(0);
  for (T x : v) acc += x * x;
  return std::sqrt(acc);
}

template <typename T>
T dot_of(std::span<const T> a, std::span<const T> b) {
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// d cos(a,b) / d a for cos = <a,b> / (|a||b| + eps), added as scale * grad into out.
template <typename T>
void add_cosine_grad(std::span<const T> a, std::span<const T> b, T na, T nb, T dot, T eps, T scale,
                     T* out) {
  const T denom = na * nb + eps;
  const T k1 = scale / denom;
  const T k2 = na > T(0) ? scale * dot * nb / (denom * denom * na) : T(0);
  for (std::size_t q = 0; q < a.size(); ++q) out[q] += k1 * b[q] - k2 * a[q];
}

}  // namespace detail

/// Sum over ordered filter pairs i != j of |sum_p cos(w_i^p, w_j^p)|,
/// with eps added to each cosine denominator.
template <typename T>
Tensor<T> filter_orthogonal_loss(const FilterBank<T>& bank, T epsilon = T(1e-8)) {
  const std::size_t c = bank.filters(), k = bank.columns(), len = bank.column_length();
  if (c < 2) throw ContractError("filter_orthogonal_loss: needs at least 2 filters, got " + std::to_string(c));
  // Gather columns as contiguous vectors: cols[(i*k + p)*len + q].
  std::vector<T> cols(c * k * len);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t q = 0; q < len; ++q) cols[(i * k + p) * len + q] = bank.column_element(i, q, p);
    }
  }
  auto col = [&cols, k, len](std::size_t i, std::size_t p) {
    return std::span<const T>(cols.data() + (i * k + p) * len, len);
  };
  std::vector<T> norms(c * k);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t p = 0; p < k; ++p) norms[i * k + p] = detail::norm_of(col(i, p));
  }
  std::vector<T> pair_sum(c * c, T(0));
  T loss = T(0);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      if (i == j) continue;
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p) {
        s += detail::dot_of(col(i, p), col(j, p)) / (norms[i * k + p] * norms[j * k + p] + epsilon);
      }
      pair_sum[i * c + j] = s;
      loss += std::abs(s);
    }
  }
  std::vector<std::size_t> index(c * k * len);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t q = 0; q < len; ++q) index[(i * k + p) * len + q] = bank.flat_index(i, q, p);
    }
  }
  return make_result<T>(
      {1}, {loss}, "filter_orthogonal_loss", {bank.weights()},
      [c, k, len, epsilon, cols = std::move(cols), norms = std::move(norms),
       pair_sum = std::move(pair_sum), index = std::move(index)](Node<T>& self) {
        T* g = self.input_grad(0);
        if (!g) return;
        const T up = self.grad[0];
        auto col = [&](std::size_t i, std::size_t p) {
          return std::span<const T>(cols.data() + (i * k + p) * len, len);
        };
        std::vector<T> dcols(cols.size(), T(0));
        for (std::size_t i = 0; i < c; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            if (i == j) continue;
            const T s = pair_sum[i * c + j];
            const T sign = s > T(0) ? T(1) : (s < T(0) ? T(-1) : T(0));
            if (sign == T(0)) continue;
            for (std::size_t p = 0; p < k; ++p) {
              auto a = col(i, p);
              auto b = col(j, p);
              const T d = detail::dot_of(a, b);
              const T na = norms[i * k + p], nb = norms[j * k + p];
              detail::add_cosine_grad(a, b, na, nb, d, epsilon, up * sign, dcols.data() + (i * k + p) * len);
              detail::add_cosine_grad(b, a, nb, na, d, epsilon, up * sign, dcols.data() + (j * k + p) * len);
            }
          }
        }
        for (std::size_t e = 0; e < dcols.size(); ++e) g[index[e]] += dcols[e];
      });
}

/// Per sample, sum over ordered channel pairs i != j of cos(f_i, f_j)^2;
/// averaged over the batch.
template <typename T>
Tensor<T> response_orthogonal_loss(const ResponseSet<T>& set, T epsilon = T(1e-8)) {
  const std::size_t n = set.batch(), c = set.channels(), hw = set.plane();
  if (c < 2) throw ContractError("response_orthogonal_loss: needs at least 2 channels, got " + std::to_string(c));
  std::vector<T> norms(n * c);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t i = 0; i < c; ++i) norms[t * c + i] = detail::norm_of(set.flattened(t, i));
  }
  std::vector<T> cosines(n * c * c, T(0));
  T total = T(0);
  for (std::size_t t = 0; t < n; ++t) {
    T per_sample = T(0);
    for (std::size_t i = 0; i < c; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        if (i == j) continue;
        const T cs = detail::dot_of(set.flattened(t, i), set.flattened(t, j)) /
                     (norms[t * c + i] * norms[t * c + j] + epsilon);
        cosines[(t * c + i) * c + j] = cs;
        per_sample += cs * cs;
      }
    }
    total += per_sample;
  }
  const T loss = total / static_cast<T>(n);
  return make_result<T>(
      {1}, {loss}, "response_orthogonal_loss", {set.responses()},
      [n, c, hw, epsilon, norms = std::move(norms), cosines = std::move(cosines)](Node<T>& self) {
        T* g = self.input_grad(0);
        if (!g) return;
        const auto& x = self.inputs[0]->value;
        const T up = self.grad[0] / static_cast<T>(n);
        auto f = [&](std::size_t t, std::size_t i) { return std::span<const T>(x.data() + (t * c + i) * hw, hw); };
        for (std::size_t t = 0; t < n; ++t) {
          for (std::size_t i = 0; i < c; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
              if (i == j) continue;
              const T cs = cosines[(t * c + i) * c + j];
              if (cs == T(0)) continue;
              const T na = norms[t * c + i], nb = norms[t * c + j];
              const T d = detail::dot_of(f(t, i), f(t, j));
              const T w = up * T(2) * cs;
              detail::add_cosine_grad(f(t, i), f(t, j), na, nb, d, epsilon, w, g + (t * c + i) * hw);
              detail::add_cosine_grad(f(t, j), f(t, i), nb, na, d, epsilon, w, g + (t * c + j) * hw);
            }
          }
        }
      });
}

/// Mean |cos| over ordered channel pairs and samples; the locality diagnostic.
template <typename T>
double mean_abs_response_cosine(const ResponseSet<T>& set, T epsilon = T(1e-8)) {
  const std::size_t n = set.batch(), c = set.channels();
  if (c < 2) return 0.0;
  double acc = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<T> norms(c);
    for (std::size_t i = 0; i < c; ++i) norms[i] = detail::norm_of(set.flattened(t, i));
    for (std::size_t i = 0; i < c; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        if (i == j) continue;
        acc += std::abs(static_cast<double>(detail::dot_of(set.flattened(t, i), set.flattened(t, j)) /
                                            (norms[i] * norms[j] + epsilon)));
      }
    }
  }
  return acc / static_cast<double>(n * c * (c - 1));
}

struct Heatmap {
  std::size_t height = 0, width = 0;
  std::vector<double> pixels;  ///< row-major, in [0,1]
  bool constant = false;       ///< source channel had no spatial variation
};

/// Batch-averaged map of one channel, min-max normalized to [0,1].
template <typename T>
Heatmap channel_response_heatmap(const ResponseSet<T>& set, std::size_t channel) {
  if (channel >= set.channels()) {
    throw ContractError("channel_response_heatmap: channel " + std::to_string(channel) + " >= " +
                        std::to_string(set.channels()));
  }
  Heatmap map;
  map.height = set.responses().dim(2);
  map.width = set.responses().dim(3);
  map.pixels.assign(set.plane(), 0.0);
  for (std::size_t t = 0; t < set.batch(); ++t) {
    auto f = set.flattened(t, channel);
    for (std::size_t s = 0; s < f.size(); ++s) map.pixels[s] += static_cast<double>(f[s]);
  }
  for (auto& v : map.pixels) v /= static_cast<double>(set.batch());
  const auto [lo, hi] = std::minmax_element(map.pixels.begin(), map.pixels.end());
  const double low = *lo, span = *hi - *lo;
  if (span <= 0.0) {
    map.constant = true;
    std::fill(map.pixels.begin(), map.pixels.end(), 0.0);
    return map;
  }
  for (auto& v : map.pixels) v = (v - low) / span;
  return map;
}

/// Pearson correlation between two heatmaps of equal size.
inline double heatmap_correlation(const Heatmap& a, const Heatmap& b) {
  const std::size_t m = a.pixels.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < m; ++i) {
    ma += a.pixels[i];
    mb += b.pixels[i];
  }
  ma /= static_cast<double>(m);
  mb /= static_cast<double>(m);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < m; ++i) {
    sab += (a.pixels[i] - ma) * (b.pixels[i] - mb);
    saa += (a.pixels[i] - ma) * (a.pixels[i] - ma);
    sbb += (b.pixels[i] - mb) * (b.pixels[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

/// Binary (P5) portable graymap, 8 bits per pixel.
inline void write_pgm(const std::string& path, std::size_t width, std::size_t height,
                      const std::vector<double>& pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : pixels) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
}

}  // namespace occludrop
