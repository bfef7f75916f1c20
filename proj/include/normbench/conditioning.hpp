#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "normbench/tensor.hpp"

namespace normbench {

/// Row-major double matrix.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct ConditionReport {
  std::size_t layer_index = 0;
  std::size_t step = 0;
  double c_50 = 0.0;
  double c_80 = 0.0;
  double c_max = 0.0;
};

/// Valid token vectors of [..., d] features stacked into [N x d]. Requires N > d.
template <typename T>
DenseMatrix reshape_tokens(const Tensor<T>& x, std::span<const std::uint8_t> mask);

/// Singular values, descending, from a cyclic Jacobi eigensolve of X^T X.
std::vector<double> singular_values(const DenseMatrix& x);

/// sigma_1 / sigma_ceil(p d) of a descending spectrum; +inf when the
/// denominator is zero.
double c_p(std::span<const double> spectrum, double p);
double c_p(const DenseMatrix& x, double p);
double c_max(const DenseMatrix& x);

ConditionReport condition_report(const DenseMatrix& x, std::size_t layer_index, std::size_t step);

}  // namespace normbench
