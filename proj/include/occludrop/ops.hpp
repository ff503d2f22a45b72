#pragma once

// Elementwise, reduction and reshaping primitives.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "occludrop/tensor.hpp"

namespace occludrop {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": operand shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

template <typename T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " input, got " + shape_str(a.shape()));
  }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result<T>(a.shape(), std::move(out), "add", {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (T* g = self.input_grad(k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [](Node<T>& self) {
    if (T* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = self.input_grad(1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [](Node<T>& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    if (T* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (T* g = self.input_grad(1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return make_result<T>(a.shape(), std::move(out), "scale", {a}, [s](Node<T>& self) {
    if (T* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
  return make_result<T>(a.shape(), std::move(out), "relu", {a}, [](Node<T>& self) {
    if (T* g = self.input_grad(0)) {
      const auto& x = self.inputs[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (x[i] > T(0)) g[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-av[i]));
  return make_result<T>(a.shape(), std::move(out), "sigmoid", {a}, [](Node<T>& self) {
    if (T* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T y = self.value[i];
        g[i] += self.grad[i] * y * (T(1) - y);
      }
    }
  });
}

/// Sum of all elements (sequential, row-major).
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.values()) acc += v;
  return make_result<T>({1}, {acc}, "sum", {a}, [](Node<T>& self) {
    if (T* g = self.input_grad(0)) {
      const T up = self.grad[0];
      for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) g[i] += up;
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
  }
  return make_result<T>(std::move(shape), std::vector<T>(a.values().begin(), a.values().end()),
                        "reshape", {a}, [](Node<T>& self) {
                          if (T* g = self.input_grad(0)) {
                            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                          }
                        });
}

/// [n, ...] -> [n, prod(...)]
template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
  if (a.rank() < 2) throw DimensionError("flatten: needs rank >= 2, got " + shape_str(a.shape()));
  return reshape(a, {a.dim(0), a.numel() / a.dim(0)});
}

/// [n,c,h,w] -> [n,c], spatial mean per channel.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& a) {
  detail::require_rank(a, 4, "global_avg_pool");
  const std::size_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<T> out(n * c);
  auto av = a.values();
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc = T(0);
    for (std::size_t s = 0; s < hw; ++s) acc += av[p * hw + s];
    out[p] = acc / static_cast<T>(hw);
  }
  return make_result<T>({n, c}, std::move(out), "global_avg_pool", {a}, [hw](Node<T>& self) {
    if (T* g = self.input_grad(0)) {
      const T inv = T(1) / static_cast<T>(hw);
      for (std::size_t p = 0; p < self.grad.size(); ++p) {
        const T up = self.grad[p] * inv;
        for (std::size_t s = 0; s < hw; ++s) g[p * hw + s] += up;
      }
    }
  });
}

/// out[t,i,:,:] = x[t,i,:,:] * weights[t,i]. Used for channel reweighting.
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& weights) {
  detail::require_rank(x, 4, "channel_scale");
  detail::require_rank(weights, 2, "channel_scale");
  if (weights.dim(0) != x.dim(0) || weights.dim(1) != x.dim(1)) {
    throw DimensionError("channel_scale: weights " + shape_str(weights.shape()) +
                         " do not match (batch, channel) axes of " + shape_str(x.shape()));
  }
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel());
  auto xv = x.values();
  auto wv = weights.values();
  for (std::size_t p = 0; p < nc; ++p) {
    for (std::size_t s = 0; s < hw; ++s) out[p * hw + s] = xv[p * hw + s] * wv[p];
  }
  return make_result<T>(x.shape(), std::move(out), "channel_scale", {x, weights},
                        [nc, hw](Node<T>& self) {
                          const auto& xs = self.inputs[0]->value;
                          const auto& ws = self.inputs[1]->value;
                          if (T* g = self.input_grad(0)) {
                            for (std::size_t p = 0; p < nc; ++p) {
                              for (std::size_t s = 0; s < hw; ++s) {
                                g[p * hw + s] += self.grad[p * hw + s] * ws[p];
                              }
                            }
                          }
                          if (T* g = self.input_grad(1)) {
                            for (std::size_t p = 0; p < nc; ++p) {
                              T acc = T(0);
                              for (std::size_t s = 0; s < hw; ++s) {
                                acc += self.grad[p * hw + s] * xs[p * hw + s];
                              }
                              g[p] += acc;
                            }
                          }
                        });
}

/// Multiply by a constant (non-differentiable) mask of identical shape.
template <typename T>
Tensor<T> apply_constant_mask(const Tensor<T>& x, const std::vector<T>& mask, std::string op) {
  if (mask.size() != x.numel()) {
    throw DimensionError(op + ": mask has " + std::to_string(mask.size()) + " elements, input " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return make_result<T>(x.shape(), std::move(out), std::move(op), {x}, [mask](Node<T>& self) {
    if (T* g = self.input_grad(0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * mask[i];
    }
  });
}

}  // namespace occludrop
