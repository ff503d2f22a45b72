#pragma once

// Additive angular-margin softmax cross-entropy.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "occludrop/tensor.hpp"

namespace occludrop {

template <typename T>
struct MarginHead {
  Tensor<T> weight;  ///< [num_ids, L]
  T margin = T(0.5);
  T scale = T(64);
  /// Cosines whose angular term needed clamping into (-1, 1).
  std::size_t clamped = 0;

  template <typename Rng>
  static MarginHead init(std::size_t num_ids, std::size_t dim, T margin, T scale, Rng& rng) {
    MarginHead h;
    h.margin = margin;
    h.scale = scale;
    std::normal_distribution<double> nd(0.0, 0.01);
    std::vector<T> w(num_ids * dim);
    for (auto& v : w) v = static_cast<T>(nd(rng));
    h.weight = Tensor<T>::from({num_ids, dim}, std::move(w), true);
    return h;
  }
  std::size_t num_ids() const { return weight.dim(0); }
};

/// Rows of [n, L] scaled to unit length (zero rows stay zero).
template <typename T>
std::vector<T> normalize_rows(std::span<const T> x, std::size_t rows, std::size_t cols, std::vector<T>* norms) {
  std::vector<T> out(x.size());
  if (norms) norms->assign(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::size_t k = 0; k < cols; ++k) acc += x[r * cols + k] * x[r * cols + k];
    const T nrm = std::sqrt(acc);
    if (norms) (*norms)[r] = nrm;
    const T inv = nrm > T(0) ? T(1) / nrm : T(0);
    for (std::size_t k = 0; k < cols; ++k) out[r * cols + k] = x[r * cols + k] * inv;
  }
  return out;
}

namespace detail {

/// Gradient through row normalization: dx = (dxhat - xhat <xhat, dxhat>) / |x|.
template <typename T>
void add_normalize_grad(const std::vector<T>& xhat, const std::vector<T>& norms, const std::vector<T>& dxhat,
                        std::size_t rows, std::size_t cols, T* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (norms[r] <= T(0)) continue;
    T proj = T(0);
    for (std::size_t k = 0; k < cols; ++k) proj += xhat[r * cols + k] * dxhat[r * cols + k];
    for (std::size_t k = 0; k < cols; ++k) {
      dx[r * cols + k] += (dxhat[r * cols + k] - xhat[r * cols + k] * proj) / norms[r];
    }
  }
}

}  // namespace detail

/// Logits are s * cos(angle_j) for j != y and s * cos(angle_y + m) for the
/// true class, evaluated as x cos m - sqrt(1 - x^2) sin m. Returns the mean
/// softmax cross-entropy over the batch.
template <typename T>
Tensor<T> margin_loss(const Tensor<T>& embeddings, const std::vector<std::size_t>& labels, MarginHead<T>& head) {
  if (embeddings.rank() != 2) throw DimensionError("margin_loss: embeddings must be [n,L], got " + shape_str(embeddings.shape()));
  const std::size_t n = embeddings.dim(0), dim = embeddings.dim(1), k = head.num_ids();
  if (head.weight.dim(1) != dim) {
    throw DimensionError("margin_loss: class weight axis 1 is " + std::to_string(head.weight.dim(1)) +
                         " but embedding axis 1 is " + std::to_string(dim));
  }
  if (labels.size() != n) throw DimensionError("margin_loss: one label per embedding required");
  for (std::size_t y : labels) {
    if (y >= k) throw ContractError("margin_loss: label " + std::to_string(y) + " >= num_ids " + std::to_string(k));
  }
  const T m = head.margin, s = head.scale;
  const T cos_m = std::cos(m), sin_m = std::sin(m);
  const T limit = T(1) - T(1e-7);

  std::vector<T> e_norms, w_norms;
  auto ehat = normalize_rows<T>(embeddings.values(), n, dim, &e_norms);
  auto what = normalize_rows<T>(head.weight.values(), k, dim, &w_norms);
  std::vector<T> cosine(n * k, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      T acc = T(0);
      for (std::size_t d = 0; d < dim; ++d) acc += ehat[i * dim + d] * what[j * dim + d];
      cosine[i * k + j] = acc;
    }
  }
  std::vector<T> prob(n * k);
  std::vector<T> dtarget(n);  // d logit_y / d cos_y (before the factor s)
  T loss = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = labels[i];
    T x = cosine[i * k + y];
    T xc = x;
    if (xc > limit || xc < -limit) {
      ++head.clamped;
      xc = std::clamp(xc, -limit, limit);
    }
    const T sine = std::sqrt(T(1) - xc * xc);
    const T target = x * cos_m - sine * sin_m;
    dtarget[i] = cos_m + xc * sin_m / sine;
    T* row = prob.data() + i * k;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      row[j] = s * (j == y ? target : cosine[i * k + j]);
      mx = std::max(mx, row[j]);
    }
    T z = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < k; ++j) row[j] /= z;
    loss += -std::log(std::max(row[y], std::numeric_limits<T>::min()));
  }
  loss /= static_cast<T>(n);

  return make_result<T>(
      {1}, {loss}, "margin_loss", {embeddings, head.weight},
      [n, dim, k, s, labels, ehat = std::move(ehat), what = std::move(what), e_norms = std::move(e_norms),
       w_norms = std::move(w_norms), prob = std::move(prob), dtarget = std::move(dtarget)](Node<T>& self) {
        const T up = self.grad[0] / static_cast<T>(n);
        std::vector<T> dcos(n * k);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const T dlogit = up * (prob[i * k + j] - (j == labels[i] ? T(1) : T(0)));
            dcos[i * k + j] = s * dlogit * (j == labels[i] ? dtarget[i] : T(1));
          }
        }
        if (T* ge = self.input_grad(0)) {
          std::vector<T> dehat(n * dim, T(0));
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
              const T g = dcos[i * k + j];
              for (std::size_t d = 0; d < dim; ++d) dehat[i * dim + d] += g * what[j * dim + d];
            }
          }
          detail::add_normalize_grad(ehat, e_norms, dehat, n, dim, ge);
        }
        if (T* gw = self.input_grad(1)) {
          std::vector<T> dwhat(k * dim, T(0));
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
              const T g = dcos[i * k + j];
              for (std::size_t d = 0; d < dim; ++d) dwhat[j * dim + d] += g * ehat[i * dim + d];
            }
          }
          detail::add_normalize_grad(what, w_norms, dwhat, k, dim, gw);
        }
      });
}

}  // namespace occludrop
