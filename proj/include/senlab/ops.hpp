#pragma once

// Value-level primitives shared by the tape and by plain evaluation.

#include <string>

#include "senlab/kernels.hpp"
#include "senlab/tensor.hpp"

namespace senlab {

/// Piecewise-linear activation a(v) = alpha*v for v > 0, beta*v otherwise.
/// Degree-1 positive homogeneous; ReLU is (1, 0).
struct PositiveHomogeneous {
  double alpha = 1.0;
  double beta = 0.0;

  PositiveHomogeneous() = default;
  PositiveHomogeneous(double a, double b) : alpha(a), beta(b) {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) {
      throw Error("activation slopes must be non-negative, got alpha=" +
                  std::to_string(alpha) + " beta=" + std::to_string(beta));
    }
  }

  static PositiveHomogeneous relu() { return {1.0, 0.0}; }

  double operator()(double v) const { return v > 0.0 ? alpha * v : beta * v; }
  // The kink v == 0 takes the beta branch.
  double derivative(double v) const { return v > 0.0 ? alpha : beta; }
  /// (alpha^2 + beta^2) / 2: E[a'(p)^2] for p symmetric about zero.
  double gain() const { return 0.5 * (alpha * alpha + beta * beta); }

  friend bool operator==(const PositiveHomogeneous&, const PositiveHomogeneous&) = default;
};

inline Tensor apply_positive_homogeneous(const Tensor& x, double alpha, double beta) {
  const PositiveHomogeneous act(alpha, beta);
  Tensor y = x;
  for (double& v : y.data()) v = act(v);
  return y;
}

inline Tensor apply_positive_homogeneous(const Tensor& x, const PositiveHomogeneous& act) {
  Tensor y = x;
  for (double& v : y.data()) v = act(v);
  return y;
}

/// Softmax of a vector, or of each row of a matrix.
inline Tensor softmax(const Tensor& z) {
  if (z.rank() == 0 || z.rank() > 2) {
    throw ShapeError("softmax expects a vector or a matrix, got " + shape_str(z.shape()));
  }
  Tensor out = z;
  const std::size_t k = z.rank() == 1 ? z.dim(0) : z.dim(1);
  const std::size_t rows = z.size() / k;
  for (std::size_t r = 0; r < rows; ++r) kernels::softmax_row(out.data().data() + r * k, k);
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  Tensor c(Shape{a.dim(0), b.dim(1)});
  kernels::gemm_nn(a.data().data(), b.data().data(), c.data().data(), a.dim(0),
                   a.dim(1), b.dim(1));
  return c;
}

/// Index of the largest entry of row r (first on ties).
inline std::size_t argmax_row(const Tensor& m, std::size_t r) {
  const std::size_t k = m.dim(1);
  const double* row = m.data().data() + r * k;
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

}  // namespace senlab
