#pragma once

// Shared helpers for the test binaries: seeded generators and error metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "normbench/tensor.hpp"

namespace normbench::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

/// |a - b| relative to the larger magnitude, floored so exact zeros compare as absolute.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_err(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, rel_err(a[i], b[i], floor));
  return worst;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Singular values of a row-major [rows x cols] matrix by power iteration on
/// the Gram matrix with deflation. Descending.
inline std::vector<double> power_iteration_singular_values(const std::vector<double>& x, std::size_t rows,
                                                           std::size_t cols, std::uint64_t seed = 7) {
  std::vector<double> g(cols * cols, 0.0);
  for (std::size_t i = 0; i < cols; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      for (std::size_t r = 0; r < rows; ++r) g[i * cols + j] += x[r * cols + i] * x[r * cols + j];
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  std::vector<double> out;
  for (std::size_t k = 0; k < cols; ++k) {
    std::vector<double> v(cols), w(cols);
    for (auto& e : v) e = z(rng);
    double lambda = 0.0;
    for (int it = 0; it < 1000000; ++it) {
      for (std::size_t i = 0; i < cols; ++i) {
        w[i] = 0.0;
        for (std::size_t j = 0; j < cols; ++j) w[i] += g[i * cols + j] * v[j];
      }
      double nrm = 0.0;
      for (double e : w) nrm += e * e;
      nrm = std::sqrt(nrm);
      if (nrm == 0.0) {
        lambda = 0.0;
        break;
      }
      double change = 0.0;
      for (std::size_t i = 0; i < cols; ++i) {
        change += std::pow(w[i] / nrm - v[i], 2);
        v[i] = w[i] / nrm;
      }
      lambda = nrm;
      if (std::sqrt(change) < 1e-11) break;
    }
    out.push_back(std::sqrt(std::max(lambda, 0.0)));
    for (std::size_t i = 0; i < cols; ++i)
      for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] -= lambda * v[i] * v[j];
  }
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

}  // namespace normbench::testing
