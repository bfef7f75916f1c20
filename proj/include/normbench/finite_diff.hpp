#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "normbench/errors.hpp"
#include "normbench/tensor.hpp"

namespace normbench {

/// One scalar coordinate of one parameter tensor.
struct Coord {
  std::size_t param = 0;
  std::size_t index = 0;
};

/// Central differences of `loss` at selected coordinates. `params` are
/// perturbed in place and restored; `loss` must read them and be free of
/// side effects.
template <typename T>
std::vector<T> finite_diff_at(const std::function<T()>& loss, std::span<Tensor<T>* const> params,
                              std::span<const Coord> coords, T step) {
  std::vector<T> out;
  out.reserve(coords.size());
  for (const Coord& c : coords) {
    T& x = (*params[c.param])[c.index];
    const T saved = x;
    x = saved + step;
    const T up = loss();
    x = saved - step;
    const T down = loss();
    x = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff: non-finite loss evaluation");
    out.push_back((up - down) / (T{2} * step));
  }
  return out;
}

/// Central differences for every coordinate of every parameter.
template <typename T>
std::vector<Tensor<T>> finite_diff(const std::function<T()>& loss, std::span<Tensor<T>* const> params,
                                   T step) {
  std::vector<Tensor<T>> grads;
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<Coord> coords;
    for (std::size_t i = 0; i < params[p]->numel(); ++i) coords.push_back({p, i});
    auto g = finite_diff_at(loss, params, std::span<const Coord>(coords), step);
    grads.emplace_back(params[p]->shape(), std::move(g));
  }
  return grads;
}

/// Convenience form for a pure function of tensors.
template <typename T>
std::vector<Tensor<T>> finite_diff(const std::function<T(std::span<const Tensor<T>>)>& f,
                                   std::vector<Tensor<T>> params, T step) {
  std::vector<Tensor<T>*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  std::function<T()> loss = [&] { return f(std::span<const Tensor<T>>(params)); };
  return finite_diff(loss, std::span<Tensor<T>* const>(ptrs), step);
}

}  // namespace normbench
