#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "normbench/tensor.hpp"

namespace normbench {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only tape. Nodes are stored in creation order, which is also a
/// topological order; backward walks it in reverse.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Node with no gradient.
  Var<T> constant(Tensor<T> value);
  /// Node that receives a gradient on backward.
  Var<T> leaf(Tensor<T> value);

  /// Records an op result. The value is checked for non-finite entries.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward,
                const char* op_name);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Accumulation target for node `id`, allocated as zeros on first use.
  Tensor<T>& grad_slot(std::size_t id);

  /// Reverse-mode sweep from a one-element loss. May be called once per graph.
  void backward(Var<T> loss);

  /// Gradient of a node after backward; zeros if it was not reached.
  Tensor<T> grad(Var<T> v) const;
  bool has_grad(Var<T> v) const;

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::deque<Node> nodes_;  // stable element addresses as the tape grows
  bool backward_done_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph_->value(id_);
}

// Elementwise ops. Binary ops broadcast one operand into the other's shape:
// right-aligned, each extent equal or 1. Mutual broadcasting is rejected.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);
template <typename T> Var<T> sqrt(Var<T> x);
template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> exp(Var<T> x);
template <typename T> Var<T> log(Var<T> x);
template <typename T> Var<T> square(Var<T> x);
template <typename T> Var<T> scale(Var<T> x, T factor);
template <typename T> Var<T> add_scalar(Var<T> x, T offset);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <typename T> Var<T> operator/(Var<T> a, Var<T> b) { return div(a, b); }

/// [m x k] . [k x n]
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// [b x m x k] . [b x k x n]
template <typename T> Var<T> bmm(Var<T> a, Var<T> b);
/// Swaps the two trailing axes.
template <typename T> Var<T> transpose_last2(Var<T> x);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);

template <typename T> Var<T> sum_all(Var<T> x);
template <typename T> Var<T> mean_all(Var<T> x);

template <typename T>
struct Moments {
  Var<T> mean;
  Var<T> var;
};

/// Biased mean and variance over `axes`. With keepdims the reduced axes stay
/// as extent 1 so the result broadcasts back against `x`.
template <typename T>
Moments<T> reduce_moments(Var<T> x, std::vector<std::size_t> axes, bool keepdims = false);

/// Max-stabilized softmax along `axis`.
template <typename T> Var<T> softmax(Var<T> x, std::size_t axis);

/// Rows `indices` of a matrix; repeated indices accumulate on backward.
template <typename T> Var<T> gather_rows(Var<T> x, std::span<const std::size_t> indices);
/// Inverse placement of gather_rows into a zero matrix with `rows` rows.
template <typename T>
Var<T> scatter_rows(Var<T> x, std::span<const std::size_t> indices, std::size_t rows);
template <typename T> Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t count);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);

/// Value copy with no gradient path.
template <typename T> Var<T> stop_gradient(Var<T> x);

/// Binds model-owned parameter tensors to graph leaves, once per graph.
/// Tensors with requires_grad() == false, or every tensor when `frozen`, are
/// bound as constants.
template <typename T>
class ParamBinder {
 public:
  explicit ParamBinder(Graph<T>& graph, bool frozen = false) : graph_(&graph), frozen_(frozen) {}

  Var<T> operator()(Tensor<T>& param) {
    for (auto& [ptr, var] : bound_)
      if (ptr == &param) return var;
    Var<T> v = param.requires_grad() && !frozen_ ? graph_->leaf(param) : graph_->constant(param);
    bound_.emplace_back(&param, v);
    return v;
  }

  Graph<T>& graph() const { return *graph_; }
  const std::vector<std::pair<Tensor<T>*, Var<T>>>& bound() const { return bound_; }

 private:
  Graph<T>* graph_;
  bool frozen_;
  std::vector<std::pair<Tensor<T>*, Var<T>>> bound_;
};

/// Weighted mean of -log softmax(logits)[target] over rows of [n x c] logits.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets, std::span<const T> weights);

}  // namespace normbench
