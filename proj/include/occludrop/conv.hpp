#pragma once

// Direct cross-correlation and affine layers. Both lower to a row-major
// matrix product whose inner reduction runs in ascending index order, so
// results are reproducible bit for bit.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <memory>
#include <utility>
#include <string>
#include <vector>

#include "occludrop/ops.hpp"
#include "occludrop/tensor.hpp"

namespace occludrop {

namespace detail {

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
  }
  return out;
}

/// 64-byte SIMD lane group (GCC vector extension).
template <typename T>
struct Lanes {
  typedef T type __attribute__((vector_size(64)));
  static constexpr std::size_t width = 64 / sizeof(T);
  static type load(const T* p) {
    type v;
    std::memcpy(&v, p, sizeof v);
    return v;
  }
  static void store(T* p, type v) { std::memcpy(p, &v, sizeof v); }
};

/// c[m,n] += a[m,k] * b[k,n]. Every output accumulates over p in ascending
/// order starting from its initial value; the register tiling only changes
/// which outputs are in flight together, so results match a naive triple loop
/// bit for bit.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  using L = Lanes<T>;
  using V = typename L::type;
  constexpr std::size_t W = L::width, MR = 4, NR = 2 * W;
  std::size_t j = 0;
  for (; j + NR <= n; j += NR) {
    std::size_t i = 0;
    for (; i + MR <= m; i += MR) {
      V acc[MR][2];
      for (std::size_t r = 0; r < MR; ++r) {
        acc[r][0] = L::load(c + (i + r) * n + j);
        acc[r][1] = L::load(c + (i + r) * n + j + W);
      }
      const T* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T* br = b + p * n + j;
        const V b0 = L::load(br), b1 = L::load(br + W);
        for (std::size_t r = 0; r < MR; ++r) {
          const T av = ai[r * k + p];
          acc[r][0] += av * b0;
          acc[r][1] += av * b1;
        }
      }
      for (std::size_t r = 0; r < MR; ++r) {
        L::store(c + (i + r) * n + j, acc[r][0]);
        L::store(c + (i + r) * n + j + W, acc[r][1]);
      }
    }
    for (; i < m; ++i) {
      V acc0 = L::load(c + i * n + j), acc1 = L::load(c + i * n + j + W);
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        const T* br = b + p * n + j;
        acc0 += av * L::load(br);
        acc1 += av * L::load(br + W);
      }
      L::store(c + i * n + j, acc0);
      L::store(c + i * n + j + W, acc1);
    }
  }
  for (std::size_t i = 0; i < m && j < n; ++i) {
    for (std::size_t jj = j; jj < n; ++jj) {
      T acc = c[i * n + jj];
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + jj];
      c[i * n + jj] = acc;
    }
  }
}

/// c[m,n] += a[k,m]^T * b[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  auto at = transpose(a, k, m);
  gemm_nn(m, n, k, at.data(), b, c);
}

/// c[m,n] += a[m,k] * b[n,k]^T as row dot products. Each dot product sums
/// lane-wise partial sums in a fixed order, so results are reproducible but
/// not bit-identical to a sequential loop.
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  using L = Lanes<T>;
  using V = typename L::type;
  constexpr std::size_t W = L::width;
  const std::size_t kv = k - k % W;
  auto reduce = [](const V& v) {
    T s = T(0);
    for (std::size_t l = 0; l < W; ++l) s += v[l];
    return s;
  };
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* a0 = a + i * k;
    for (std::size_t q = 0; q < n; ++q) {
      const T* bq = b + q * k;
      V acc[4] = {};
      for (std::size_t p = 0; p < kv; p += W) {
        const V bv = L::load(bq + p);
        for (std::size_t r = 0; r < 4; ++r) acc[r] += L::load(a0 + r * k + p) * bv;
      }
      for (std::size_t r = 0; r < 4; ++r) {
        T tail = T(0);
        for (std::size_t p = kv; p < k; ++p) tail += a0[r * k + p] * bq[p];
        c[(i + r) * n + q] += reduce(acc[r]) + tail;
      }
    }
  }
  for (; i < m; ++i) {
    for (std::size_t q = 0; q < n; ++q) {
      V acc = {};
      for (std::size_t p = 0; p < kv; p += W) acc += L::load(a + i * k + p) * L::load(b + q * k + p);
      T tail = T(0);
      for (std::size_t p = kv; p < k; ++p) tail += a[i * k + p] * b[q * k + p];
      c[i * n + q] += reduce(acc) + tail;
    }
  }
}

struct ConvGeometry {
  std::size_t n, c_in, h, w, c_out, k, stride, pad, out_h, out_w;
  std::size_t patch() const { return c_in * k * k; }
  std::size_t out_plane() const { return out_h * out_w; }
  std::size_t columns() const { return n * out_plane(); }
};

/// Output columns [lo, hi) whose input column ox*stride + kx - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t stride,
                                                       std::size_t offset, std::size_t pad) {
  // need 0 <= o*stride + offset - pad < in
  std::size_t lo = 0;
  if (offset < pad) lo = (pad - offset + stride - 1) / stride;
  std::size_t hi = 0;
  if (in + pad > offset) hi = std::min(out, (in + pad - offset - 1) / stride + 1);
  return {std::min(lo, hi), hi};
}

/// cols[(ci*k+ky)*k+kx, t*out_plane + oy*out_w + ox]
template <typename T>
std::vector<T> im2col(const T* x, const ConvGeometry& g) {
  const std::size_t ncols = g.columns();
  std::vector<T> cols(g.patch() * ncols, T(0));
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [y_lo, y_hi] = valid_range(g.out_h, g.h, g.stride, ky, g.pad);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [x_lo, x_hi] = valid_range(g.out_w, g.w, g.stride, kx, g.pad);
        T* row = cols.data() + ((ci * g.k + ky) * g.k + kx) * ncols;
        for (std::size_t t = 0; t < g.n; ++t) {
          const T* plane = x + (t * g.c_in + ci) * g.h * g.w;
          T* dst = row + t * g.out_plane();
          for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
            const T* src = plane + (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
            T* out = dst + oy * g.out_w;
            if (g.stride == 1) {
              std::copy(src + x_lo, src + x_hi, out + x_lo);
            } else {
              for (std::size_t ox = x_lo; ox < x_hi; ++ox) out[ox] = src[ox * g.stride];
            }
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t ncols = g.columns();
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [y_lo, y_hi] = valid_range(g.out_h, g.h, g.stride, ky, g.pad);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [x_lo, x_hi] = valid_range(g.out_w, g.w, g.stride, kx, g.pad);
        const T* row = cols + ((ci * g.k + ky) * g.k + kx) * ncols;
        for (std::size_t t = 0; t < g.n; ++t) {
          T* plane = dx + (t * g.c_in + ci) * g.h * g.w;
          const T* src = row + t * g.out_plane();
          for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
            T* dst = plane + (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
            const T* in = src + oy * g.out_w;
            for (std::size_t ox = x_lo; ox < x_hi; ++ox) dst[ox * g.stride] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation of input [n,c_in,h,w] with weights [c_out,c_in,k,k].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, std::size_t stride,
                 std::size_t padding) {
  detail::require_rank(input, 4, "conv2d input");
  detail::require_rank(weights, 4, "conv2d weights");
  if (stride == 0) throw ContractError("conv2d: stride must be >= 1");
  if (weights.dim(1) != input.dim(1)) {
    throw DimensionError("conv2d: weight in-channel axis (1) is " + std::to_string(weights.dim(1)) +
                         " but input channel axis (1) is " + std::to_string(input.dim(1)));
  }
  if (weights.dim(2) != weights.dim(3)) {
    throw DimensionError("conv2d: kernel axes (2,3) must be square, got " + shape_str(weights.shape()));
  }
  detail::ConvGeometry g{};
  g.n = input.dim(0);
  g.c_in = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.c_out = weights.dim(0);
  g.k = weights.dim(2);
  g.stride = stride;
  g.pad = padding;
  if (g.k > g.h + 2 * padding || g.k > g.w + 2 * padding) {
    throw DimensionError("conv2d: kernel " + std::to_string(g.k) + " exceeds padded spatial axes (2,3) of " +
                         shape_str(input.shape()));
  }
  g.out_h = (g.h + 2 * padding - g.k) / stride + 1;
  g.out_w = (g.w + 2 * padding - g.k) / stride + 1;

  auto cols = std::make_shared<std::vector<T>>(detail::im2col(input.values().data(), g));
  std::vector<T> prod(g.c_out * g.columns(), T(0));
  detail::gemm_nn(g.c_out, g.columns(), g.patch(), weights.values().data(), cols->data(), prod.data());
  // [c_out, n*plane] -> [n, c_out, plane]
  std::vector<T> out(g.n * g.c_out * g.out_plane());
  for (std::size_t o = 0; o < g.c_out; ++o) {
    for (std::size_t t = 0; t < g.n; ++t) {
      const T* src = prod.data() + o * g.columns() + t * g.out_plane();
      std::copy(src, src + g.out_plane(), out.data() + (t * g.c_out + o) * g.out_plane());
    }
  }
  return make_result<T>({g.n, g.c_out, g.out_h, g.out_w}, std::move(out), "conv2d", {input, weights},
                        [g, cols](Node<T>& self) {
                          std::vector<T> dprod(g.c_out * g.columns());
                          for (std::size_t o = 0; o < g.c_out; ++o) {
                            for (std::size_t t = 0; t < g.n; ++t) {
                              const T* src = self.grad.data() + (t * g.c_out + o) * g.out_plane();
                              std::copy(src, src + g.out_plane(),
                                        dprod.data() + o * g.columns() + t * g.out_plane());
                            }
                          }
                          const auto& wt = self.inputs[1]->value;
                          if (T* gw = self.input_grad(1)) {
                            detail::gemm_nt(g.c_out, g.patch(), g.columns(), dprod.data(), cols->data(), gw);
                          }
                          if (T* gx = self.input_grad(0)) {
                            std::vector<T> dcols(g.patch() * g.columns(), T(0));
                            detail::gemm_tn(g.patch(), g.columns(), g.c_out, wt.data(), dprod.data(),
                                            dcols.data());
                            detail::col2im(dcols.data(), g, gx);
                          }
                        });
}

/// Affine map: input [n,d_in], weights [d_out,d_in], bias [d_out].
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  detail::require_rank(input, 2, "linear input");
  detail::require_rank(weights, 2, "linear weights");
  detail::require_rank(bias, 1, "linear bias");
  const std::size_t n = input.dim(0), d_in = input.dim(1), d_out = weights.dim(0);
  if (weights.dim(1) != d_in) {
    throw DimensionError("linear: weight axis 1 is " + std::to_string(weights.dim(1)) +
                         " but input axis 1 is " + std::to_string(d_in));
  }
  if (bias.dim(0) != d_out) {
    throw DimensionError("linear: bias axis 0 is " + std::to_string(bias.dim(0)) +
                         " but weight axis 0 is " + std::to_string(d_out));
  }
  std::vector<T> out(n * d_out);
  auto bv = bias.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < d_out; ++o) out[i * d_out + o] = bv[o];
  }
  auto wt = detail::transpose(weights.values().data(), d_out, d_in);
  detail::gemm_nn(n, d_out, d_in, input.values().data(), wt.data(), out.data());
  return make_result<T>({n, d_out}, std::move(out), "linear", {input, weights, bias},
                        [n, d_in, d_out](Node<T>& self) {
                          const auto& x = self.inputs[0]->value;
                          const auto& w = self.inputs[1]->value;
                          const T* dy = self.grad.data();
                          if (T* gx = self.input_grad(0)) detail::gemm_nn(n, d_in, d_out, dy, w.data(), gx);
                          if (T* gw = self.input_grad(1)) detail::gemm_tn(d_out, d_in, n, dy, x.data(), gw);
                          if (T* gb = self.input_grad(2)) {
                            for (std::size_t i = 0; i < n; ++i) {
                              for (std::size_t o = 0; o < d_out; ++o) gb[o] += dy[i * d_out + o];
                            }
                          }
                        });
}

}  // namespace occludrop
