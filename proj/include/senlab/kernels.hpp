#pragma once

// Raw loops behind the tensor primitives. Summation order is fixed so every
// result is bit-reproducible for the same inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace senlab::kernels {

namespace detail {

// R x C block of C held in registers while p runs over k. Element (r, p) of
// A sits at a[r * rs + p * ps]. Every output still sums its k products in
// order p = 0, 1, ..., so blocking does not change a single bit.
template <std::size_t R, std::size_t C>
inline void gemm_tile(const double* __restrict a, std::size_t rs, std::size_t ps, const double* __restrict b,
                      std::size_t ldb, double* __restrict c, std::size_t ldc, std::size_t k, bool accumulate) {
  double acc[R][C];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < C; ++j) acc[r][j] = accumulate ? c[r * ldc + j] : 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * ldb;
    for (std::size_t r = 0; r < R; ++r) {
      const double av = a[r * rs + p * ps];
      for (std::size_t j = 0; j < C; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < C; ++j) c[r * ldc + j] = acc[r][j];
}

template <std::size_t R>
inline void gemm_row_block(const double* a, std::size_t rs, std::size_t ps, const double* b, double* c,
                           std::size_t k, std::size_t m, bool accumulate) {
  std::size_t j = 0;
  for (; j + 32 <= m; j += 32) gemm_tile<R, 32>(a, rs, ps, b + j, m, c + j, m, k, accumulate);
  if (j + 16 <= m) {
    gemm_tile<R, 16>(a, rs, ps, b + j, m, c + j, m, k, accumulate);
    j += 16;
  }
  if (j + 8 <= m) {
    gemm_tile<R, 8>(a, rs, ps, b + j, m, c + j, m, k, accumulate);
    j += 8;
  }
  if (j + 4 <= m) {
    gemm_tile<R, 4>(a, rs, ps, b + j, m, c + j, m, k, accumulate);
    j += 4;
  }
  if (j + 2 <= m) {
    gemm_tile<R, 2>(a, rs, ps, b + j, m, c + j, m, k, accumulate);
    j += 2;
  }
  if (j < m) gemm_tile<R, 1>(a, rs, ps, b + j, m, c + j, m, k, accumulate);
}

inline void gemm_blocked(const double* a, std::size_t rs, std::size_t ps, const double* b, double* c,
                         std::size_t n, std::size_t k, std::size_t m, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) gemm_row_block<4>(a + i * rs, rs, ps, b, c + i * m, k, m, accumulate);
  for (; i < n; ++i) gemm_row_block<1>(a + i * rs, rs, ps, b, c + i * m, k, m, accumulate);
}

}  // namespace detail

/// C[n x m] (+)= A[n x k] * B[k x m]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,
                    bool accumulate = false) {
  detail::gemm_blocked(a, k, 1, b, c, n, k, m, accumulate);
}

/// C[n x m] (+)= A[n x k] * B[m x k]^T. B is transposed once so the inner
/// loop runs over contiguous output columns.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t n,
                    std::size_t k, std::size_t m, bool accumulate = false) {
  std::vector<double> bt(k * m);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * m + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, n, k, m, accumulate);
}

/// C[n x m] (+)= A[k x n]^T * B[k x m]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m,
                    bool accumulate = false) {
  detail::gemm_blocked(a, 1, n, b, c, n, k, m, accumulate);
}

/// In-place stable softmax over one row of length k.
inline void softmax_row(double* z, std::size_t k) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, z[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    z[j] = std::exp(z[j] - mx);
    s += z[j];
  }
  for (std::size_t j = 0; j < k; ++j) z[j] /= s;
}

/// log(sum(exp(z))) over one row, shifted by the max.
inline double logsumexp_row(const double* z, std::size_t k) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, z[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - mx);
  return mx + std::log(s);
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel, stride, padding;

  std::size_t out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
  std::size_t patch() const { return channels * kernel * kernel; }
};

/// One image [C x H x W] -> columns [C*k*k x Ho*Wo]; zero padding.
inline void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj, ++row) {
        double* out = cols + row * ho * wo;
        for (std::size_t oi = 0; oi < ho; ++oi) {
          const auto ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - pad;
          for (std::size_t oj = 0; oj < wo; ++oj) {
            const auto jj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) - pad;
            const bool inside = ii >= 0 && jj >= 0 &&
                                ii < static_cast<std::ptrdiff_t>(g.height) &&
                                jj < static_cast<std::ptrdiff_t>(g.width);
            out[oi * wo + oj] =
                inside ? img[(c * g.height + static_cast<std::size_t>(ii)) * g.width +
                             static_cast<std::size_t>(jj)]
                       : 0.0;
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-add columns back into an image.
inline void col2im(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj, ++row) {
        const double* in = cols + row * ho * wo;
        for (std::size_t oi = 0; oi < ho; ++oi) {
          const auto ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - pad;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t oj = 0; oj < wo; ++oj) {
            const auto jj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) - pad;
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(ii)) * g.width +
                static_cast<std::size_t>(jj)] += in[oi * wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace senlab::kernels
