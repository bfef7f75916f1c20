#include "normbench/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "normbench/errors.hpp"

namespace normbench {

namespace {

constexpr double kOffDiagonalTol = 1e-10;
constexpr int kMaxSweeps = 100;

double off_diagonal(const DenseMatrix& a) {
  double s = 0.0;
  for (std::size_t p = 0; p < a.rows; ++p)
    for (std::size_t q = 0; q < a.cols; ++q)
      if (p != q) s += a(p, q) * a(p, q);
  return std::sqrt(s);
}

// Eigenvalues of a symmetric matrix, unsorted.
std::vector<double> jacobi_eigenvalues(DenseMatrix a) {
  const std::size_t n = a.rows;
  double frob = 0.0;
  for (double v : a.data) frob += v * v;
  frob = std::sqrt(frob);
  int sweep = 0;
  while (off_diagonal(a) > kOffDiagonalTol * frob) {
    if (++sweep > kMaxSweeps) throw NumericError("Jacobi eigensolve did not converge");
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  return ev;
}

}  // namespace

template <typename T>
DenseMatrix reshape_tokens(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  if (mask.size() != rows)
    throw ShapeError("mask has " + std::to_string(mask.size()) + " entries for " + std::to_string(rows) + " tokens");
  std::size_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  if (n <= d)
    throw ShapeError("conditioning needs more tokens than features (" + std::to_string(n) + " <= " +
                     std::to_string(d) + ")");
  DenseMatrix out(n, d);
  std::size_t r = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < d; ++j) out(r, j) = static_cast<double>(x[i * d + j]);
    ++r;
  }
  return out;
}

template DenseMatrix reshape_tokens(const Tensor<float>&, std::span<const std::uint8_t>);
template DenseMatrix reshape_tokens(const Tensor<double>&, std::span<const std::uint8_t>);

std::vector<double> singular_values(const DenseMatrix& x) {
  if (x.rows <= x.cols) throw ShapeError("singular_values expects more rows than columns");
  for (double v : x.data)
    if (!std::isfinite(v)) throw NumericError("non-finite entry in feature matrix");
  const std::size_t d = x.cols;
  DenseMatrix gram(d, d);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t i = 0; i < d; ++i) {
      const double xi = x(r, i);
      for (std::size_t j = i; j < d; ++j) gram(i, j) += xi * x(r, j);
    }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < i; ++j) gram(i, j) = gram(j, i);
  std::vector<double> sv = jacobi_eigenvalues(std::move(gram));
  for (auto& v : sv) v = std::sqrt(std::max(v, 0.0));
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

double c_p(std::span<const double> spectrum, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("p must lie in (0, 1]");
  if (spectrum.empty()) throw ShapeError("empty spectrum");
  const double d = static_cast<double>(spectrum.size());
  auto k = static_cast<std::size_t>(std::ceil(p * d - 1e-9));
  k = std::clamp<std::size_t>(k, 1, spectrum.size());
  const double denom = spectrum[k - 1];
  if (!(denom > 0.0)) return std::numeric_limits<double>::infinity();
  return spectrum[0] / denom;
}

double c_p(const DenseMatrix& x, double p) {
  const auto sv = singular_values(x);
  return c_p(std::span<const double>(sv), p);
}

double c_max(const DenseMatrix& x) { return singular_values(x).front(); }

ConditionReport condition_report(const DenseMatrix& x, std::size_t layer_index, std::size_t step) {
  const auto sv = singular_values(x);
  ConditionReport r;
  r.layer_index = layer_index;
  r.step = step;
  r.c_50 = c_p(std::span<const double>(sv), 0.5);
  r.c_80 = c_p(std::span<const double>(sv), 0.8);
  r.c_max = sv.front();
  return r;
}

}  // namespace normbench
