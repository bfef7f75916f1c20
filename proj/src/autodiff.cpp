#include "normbench/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "normbench/errors.hpp"

namespace normbench {

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  if (!value.all_finite()) throw NumericError("non-finite value in constant tensor");
  nodes_.push_back(Node{std::move(value), {}, {}, {}, false});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::leaf(Tensor<T> value) {
  if (!value.all_finite()) throw NumericError("non-finite value in leaf tensor");
  value.set_requires_grad(true);
  nodes_.push_back(Node{std::move(value), {}, {}, {}, true});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward,
                        const char* op_name) {
  if (!value.all_finite())
    throw NumericError(std::string("non-finite value produced by ") + op_name);
  bool needs = false;
  for (auto i : inputs) needs = needs || nodes_.at(i).requires_grad;
  value.set_requires_grad(needs);
  nodes_.push_back(Node{std::move(value), {}, std::move(inputs), needs ? std::move(backward) : BackwardFn{},
                        needs});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Graph<T>::grad_slot(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.valid() && &loss.graph() != this) throw StateError("loss belongs to another graph");
  if (backward_done_)
    throw StateError("backward already ran on this graph; re-run the forward pass first");
  if (value(loss.id()).numel() != 1) throw ShapeError("backward needs a scalar loss");
  backward_done_ = true;
  if (!requires_grad(loss.id())) return;
  grad_slot(loss.id()).fill(T{1});
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
}

template <typename T>
Tensor<T> Graph<T>::grad(Var<T> v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
bool Graph<T>::has_grad(Var<T> v) const {
  return !nodes_.at(v.id()).grad.empty();
}

template class Graph<float>;
template class Graph<double>;

// ---------------------------------------------------------------------------
// Helpers

namespace {

bool broadcasts_into(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  const std::size_t off = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i)
    if (small[i] != big[off + i] && small[i] != 1) return false;
  return true;
}

// out-flat index -> small-flat index
std::vector<std::size_t> broadcast_map(const Shape& small, const Shape& big) {
  const std::size_t off = big.size() - small.size();
  std::vector<std::size_t> strides(big.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = small.size(); i-- > 0;) {
    strides[off + i] = small[i] == 1 ? 0 : s;
    s *= small[i];
  }
  const std::size_t n = shape_numel(big);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(big.size(), 0);
  std::size_t cur = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = cur;
    for (std::size_t ax = big.size(); ax-- > 0;) {
      ++idx[ax];
      cur += strides[ax];
      if (idx[ax] < big[ax]) break;
      cur -= strides[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return map;
}

struct BinaryLayout {
  Shape out;
  std::vector<std::size_t> a_map;  // empty means identity
  std::vector<std::size_t> b_map;
};

BinaryLayout binary_layout(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return {a, {}, {}};
  if (broadcasts_into(b, a)) return {a, {}, broadcast_map(b, a)};
  if (broadcasts_into(a, b)) return {b, broadcast_map(a, b), {}};
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " +
                   shape_string(b));
}

inline std::size_t at(const std::vector<std::size_t>& map, std::size_t i) {
  return map.empty() ? i : map[i];
}

template <typename T, typename F, typename DA, typename DB>
Var<T> binary(Var<T> a, Var<T> b, const char* name, F f, DA da, DB db) {
  Graph<T>& g = a.graph();
  if (&b.graph() != &g) throw StateError(std::string(name) + ": operands from different graphs");
  auto layout = binary_layout(a.shape(), b.shape(), name);
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(layout.out);
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = f(av[at(layout.a_map, i)], bv[at(layout.b_map, i)]);
  const std::size_t ia = a.id(), ib = b.id();
  auto back = [ia, ib, layout = std::move(layout), da, db](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gout = gr.grad_slot(self);
    const auto& x = gr.value(ia);
    const auto& y = gr.value(ib);
    const auto& z = gr.value(self);
    if (gr.requires_grad(ia)) {
      auto& ga = gr.grad_slot(ia);
      for (std::size_t i = 0; i < gout.numel(); ++i) {
        const std::size_t ja = at(layout.a_map, i), jb = at(layout.b_map, i);
        ga[ja] += gout[i] * da(x[ja], y[jb], z[i]);
      }
    }
    if (gr.requires_grad(ib)) {
      auto& gb = gr.grad_slot(ib);
      for (std::size_t i = 0; i < gout.numel(); ++i) {
        const std::size_t ja = at(layout.a_map, i), jb = at(layout.b_map, i);
        gb[jb] += gout[i] * db(x[ja], y[jb], z[i]);
      }
    }
  };
  return g.record(std::move(out), {ia, ib}, std::move(back), name);
}

template <typename T, typename F, typename D>
Var<T> unary(Var<T> x, const char* name, F f, D d) {
  Graph<T>& g = x.graph();
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(xv[i]);
  const std::size_t ix = x.id();
  auto back = [ix, d](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gout = gr.grad_slot(self);
    const auto& xs = gr.value(ix);
    const auto& zs = gr.value(self);
    auto& gx = gr.grad_slot(ix);
    for (std::size_t i = 0; i < gout.numel(); ++i) gx[i] += gout[i] * d(xs[i], zs[i]);
  };
  return g.record(std::move(out), {ix}, std::move(back), name);
}

// c[m x n] += a[m x k] . b[k x n]  with optional transposes expressed by strides
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
              bool trans_a, bool trans_b) {
  // a(i,p) = trans_a ? a[p*m + i] : a[i*k + p]
  // b(p,j) = trans_b ? b[j*k + p] : b[p*n + j]
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = trans_a ? a[p * m + i] : a[i * k + p];
      if (aip == T{0}) continue;
      if (!trans_b) {
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * b[j * k + p];
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T{1}; },
      [](T, T, T) { return T{1}; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T{1}; },
      [](T, T, T) { return T{-1}; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  return binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T{1} / y; },
      [](T, T y, T z) { return -z / y; });
}

template <typename T>
Var<T> sqrt(Var<T> x) {
  for (T v : x.value().data())
    if (v < T{0}) throw NumericError("sqrt of negative value");
  return unary(
      x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T z) { return T{0.5} / z; });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return unary(
      x, "relu", [](T v) { return v > T{0} ? v : T{0}; },
      [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return unary(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T z) { return z; });
}

template <typename T>
Var<T> log(Var<T> x) {
  return unary(
      x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
Var<T> square(Var<T> x) {
  return unary(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  return unary(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(Var<T> x, T offset) {
  return unary(
      x, "add_scalar", [offset](T v) { return v + offset; }, [](T, T) { return T{1}; });
}

// ---------------------------------------------------------------------------
// Linear algebra and shape

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2) throw ShapeError("matmul expects two matrices");
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  if (B.dim(0) != k)
    throw ShapeError("matmul inner extents differ: " + shape_string(A.shape()) + " . " +
                     shape_string(B.shape()));
  Tensor<T> C(Shape{m, n});
  gemm_acc(A.data().data(), B.data().data(), C.data().data(), m, k, n, false, false);
  const std::size_t ia = a.id(), ib = b.id();
  auto back = [ia, ib, m, k, n](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gc = gr.grad_slot(self);
    if (gr.requires_grad(ia)) {  // dA = dC . B^T
      gemm_acc(gc.data().data(), gr.value(ib).data().data(), gr.grad_slot(ia).data().data(), m, n, k,
               false, true);
    }
    if (gr.requires_grad(ib)) {  // dB = A^T . dC
      gemm_acc(gr.value(ia).data().data(), gc.data().data(), gr.grad_slot(ib).data().data(), k, m, n,
               true, false);
    }
  };
  return a.graph().record(std::move(C), {ia, ib}, std::move(back), "matmul");
}

template <typename T>
Var<T> bmm(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 3 || B.rank() != 3) throw ShapeError("bmm expects rank-3 operands");
  const std::size_t bs = A.dim(0), m = A.dim(1), k = A.dim(2), n = B.dim(2);
  if (B.dim(0) != bs || B.dim(1) != k)
    throw ShapeError("bmm extents differ: " + shape_string(A.shape()) + " . " + shape_string(B.shape()));
  Tensor<T> C(Shape{bs, m, n});
  for (std::size_t s = 0; s < bs; ++s)
    gemm_acc(A.data().data() + s * m * k, B.data().data() + s * k * n, C.data().data() + s * m * n, m, k,
             n, false, false);
  const std::size_t ia = a.id(), ib = b.id();
  auto back = [ia, ib, bs, m, k, n](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gc = gr.grad_slot(self);
    for (std::size_t s = 0; s < bs; ++s) {
      const T* gcs = gc.data().data() + s * m * n;
      if (gr.requires_grad(ia))
        gemm_acc(gcs, gr.value(ib).data().data() + s * k * n, gr.grad_slot(ia).data().data() + s * m * k, m,
                 n, k, false, true);
      if (gr.requires_grad(ib))
        gemm_acc(gr.value(ia).data().data() + s * m * k, gcs, gr.grad_slot(ib).data().data() + s * k * n, k,
                 m, n, true, false);
    }
  };
  return a.graph().record(std::move(C), {ia, ib}, std::move(back), "bmm");
}

template <typename T>
Var<T> transpose_last2(Var<T> x) {
  const auto& X = x.value();
  if (X.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  Shape shape = X.shape();
  const std::size_t r = shape[shape.size() - 2], c = shape[shape.size() - 1];
  const std::size_t outer = X.numel() / (r * c);
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  Tensor<T> out(shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[o * r * c + j * r + i] = X[o * r * c + i * c + j];
  const std::size_t ix = x.id();
  auto back = [ix, outer, r, c](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad_slot(self);
    auto& gx = gr.grad_slot(ix);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[o * r * c + i * c + j] += go[o * r * c + j * r + i];
  };
  return x.graph().record(std::move(out), {ix}, std::move(back), "transpose");
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  auto back = [ix](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad_slot(self);
    auto& gx = gr.grad_slot(ix);
    for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
  };
  return x.graph().record(std::move(out), {ix}, std::move(back), "reshape");
}

template <typename T>
Var<T> sum_all(Var<T> x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  auto back = [ix](Graph<T>& gr, std::size_t self) {
    const T go = gr.grad_slot(self)[0];
    auto& gx = gr.grad_slot(ix);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += go;
  };
  return x.graph().record(Tensor<T>::scalar(s), {ix}, std::move(back), "sum");
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  return scale(sum_all(x), T{1} / static_cast<T>(x.value().numel()));
}

template <typename T>
Moments<T> reduce_moments(Var<T> x, std::vector<std::size_t> axes, bool keepdims) {
  const auto& X = x.value();
  if (axes.empty()) throw ShapeError("reduce_moments: empty axis set");
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  if (axes.back() >= X.rank()) throw ShapeError("reduce_moments: axis out of range");

  const Shape& in = X.shape();
  std::vector<bool> reduced(in.size(), false);
  for (auto a : axes) reduced[a] = true;
  Shape kept_shape;  // keepdims form
  std::size_t m = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    kept_shape.push_back(reduced[i] ? 1 : in[i]);
    if (reduced[i]) m *= in[i];
  }
  // m >= 1 is guaranteed by positive extents
  std::vector<std::size_t> out_of = broadcast_map(kept_shape, in);

  Shape out_shape = kept_shape;
  if (!keepdims) {
    out_shape.clear();
    for (std::size_t i = 0; i < in.size(); ++i)
      if (!reduced[i]) out_shape.push_back(in[i]);
    if (out_shape.empty()) out_shape.push_back(1);
  }
  const T inv_m = T{1} / static_cast<T>(m);
  Tensor<T> mean(out_shape), var(out_shape);
  for (std::size_t i = 0; i < X.numel(); ++i) mean[out_of[i]] += X[i];
  for (std::size_t o = 0; o < mean.numel(); ++o) mean[o] *= inv_m;
  for (std::size_t i = 0; i < X.numel(); ++i) {
    const T d = X[i] - mean[out_of[i]];
    var[out_of[i]] += d * d;
  }
  for (std::size_t o = 0; o < var.numel(); ++o) var[o] *= inv_m;

  Graph<T>& g = x.graph();
  const std::size_t ix = x.id();
  auto mean_back = [ix, out_of, inv_m](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gm = gr.grad_slot(self);
    auto& gx = gr.grad_slot(ix);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += gm[out_of[i]] * inv_m;
  };
  Var<T> mean_v = g.record(mean, {ix}, std::move(mean_back), "reduce_moments(mean)");
  // the mean path of dvar/dx sums to zero, so only the direct term remains
  auto var_back = [ix, out_of, inv_m, mean](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gv = gr.grad_slot(self);
    const auto& xs = gr.value(ix);
    auto& gx = gr.grad_slot(ix);
    for (std::size_t i = 0; i < gx.numel(); ++i)
      gx[i] += gv[out_of[i]] * T{2} * (xs[i] - mean[out_of[i]]) * inv_m;
  };
  Var<T> var_v = g.record(std::move(var), {ix}, std::move(var_back), "reduce_moments(var)");
  return {mean_v, var_v};
}

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const auto& X = x.value();
  if (axis >= X.rank()) throw ShapeError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= X.dim(i);
  for (std::size_t i = axis + 1; i < X.rank(); ++i) inner *= X.dim(i);
  const std::size_t n = X.dim(axis);
  Tensor<T> Y(X.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, X[base + k * inner]);
      T s{0};
      for (std::size_t k = 0; k < n; ++k) {
        const T e = std::exp(X[base + k * inner] - mx);
        Y[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < n; ++k) Y[base + k * inner] /= s;
    }
  const std::size_t ix = x.id();
  auto back = [ix, outer, inner, n](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gy = gr.grad_slot(self);
    const auto& Ys = gr.value(self);
    auto& gx = gr.grad_slot(ix);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot{0};
        for (std::size_t k = 0; k < n; ++k) dot += gy[base + k * inner] * Ys[base + k * inner];
        for (std::size_t k = 0; k < n; ++k)
          gx[base + k * inner] += Ys[base + k * inner] * (gy[base + k * inner] - dot);
      }
  };
  return x.graph().record(std::move(Y), {ix}, std::move(back), "softmax");
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> indices) {
  const auto& X = x.value();
  if (X.rank() != 2) throw ShapeError("gather_rows expects a matrix");
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  const std::size_t rows = X.dim(0), cols = X.dim(1);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Tensor<T> out(Shape{idx.size(), cols});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows) throw ShapeError("gather_rows: index out of range");
    std::copy_n(X.data().begin() + idx[r] * cols, cols, out.data().begin() + r * cols);
  }
  const std::size_t ix = x.id();
  auto back = [ix, idx, cols](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad_slot(self);
    auto& gx = gr.grad_slot(ix);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c) gx[idx[r] * cols + c] += go[r * cols + c];
  };
  return x.graph().record(std::move(out), {ix}, std::move(back), "gather_rows");
}

template <typename T>
Var<T> scatter_rows(Var<T> x, std::span<const std::size_t> indices, std::size_t rows) {
  const auto& X = x.value();
  if (X.rank() != 2 || X.dim(0) != indices.size())
    throw ShapeError("scatter_rows: row count does not match index count");
  const std::size_t cols = X.dim(1);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Tensor<T> out(Shape{rows, cols});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows) throw ShapeError("scatter_rows: index out of range");
    std::copy_n(X.data().begin() + r * cols, cols, out.data().begin() + idx[r] * cols);
  }
  const std::size_t ix = x.id();
  auto back = [ix, idx, cols](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad_slot(self);
    auto& gx = gr.grad_slot(ix);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += go[idx[r] * cols + c];
  };
  return x.graph().record(std::move(out), {ix}, std::move(back), "scatter_rows");
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t count) {
  const auto& X = x.value();
  if (X.rank() != 2 || count == 0 || begin + count > X.dim(1))
    throw ShapeError("slice_cols: range outside matrix " + shape_string(X.shape()));
  const std::size_t rows = X.dim(0), cols = X.dim(1);
  Tensor<T> out(Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(X.data().begin() + r * cols + begin, count, out.data().begin() + r * count);
  const std::size_t ix = x.id();
  auto back = [ix, rows, cols, begin, count](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad_slot(self);
    auto& gx = gr.grad_slot(ix);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) gx[r * cols + begin + c] += go[r * count + c];
  };
  return x.graph().record(std::move(out), {ix}, std::move(back), "slice_cols");
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t rows = parts[0].value().dim(0);
  std::size_t cols = 0;
  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.value().dim(0) != rows)
      throw ShapeError("concat_cols: row counts differ");
    ids.push_back(p.id());
    widths.push_back(p.value().dim(1));
    cols += widths.back();
  }
  Tensor<T> out(Shape{rows, cols});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& P = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(P.data().begin() + r * widths[k], widths[k], out.data().begin() + r * cols + off);
    off += widths[k];
  }
  auto back = [ids, widths, rows, cols](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& go = gr.grad_slot(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (gr.requires_grad(ids[k])) {
        auto& gp = gr.grad_slot(ids[k]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += go[r * cols + off + c];
      }
      off += widths[k];
    }
  };
  return parts[0].graph().record(std::move(out), std::move(ids), std::move(back), "concat_cols");
}

template <typename T>
Var<T> stop_gradient(Var<T> x) {
  return x.graph().constant(x.value());
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets, std::span<const T> weights) {
  const auto& Z = logits.value();
  if (Z.rank() != 2) throw ShapeError("cross_entropy expects [rows x classes] logits");
  const std::size_t rows = Z.dim(0), classes = Z.dim(1);
  if (targets.size() != rows || weights.size() != rows)
    throw ShapeError("cross_entropy: targets/weights do not match logits rows");
  T wsum{0};
  for (T w : weights) wsum += w;
  if (!(wsum > T{0})) throw NumericError("cross_entropy: total weight must be positive");
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<T> w(weights.begin(), weights.end());
  Tensor<T> probs(Shape{rows, classes});
  T loss{0};
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = Z.data().data() + r * classes;
    T mx = *std::max_element(z, z + classes);
    T s{0};
    for (std::size_t c = 0; c < classes; ++c) {
      probs[r * classes + c] = std::exp(z[c] - mx);
      s += probs[r * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] /= s;
    if (w[r] == T{0}) continue;
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= classes)
      throw ShapeError("cross_entropy: target class out of range");
    loss += w[r] * (mx + std::log(s) - z[tgt[r]]);
  }
  loss /= wsum;
  const std::size_t iz = logits.id();
  auto back = [iz, tgt, w, wsum, probs, rows, classes](Graph<T>& gr, std::size_t self) {
    const T go = gr.grad_slot(self)[0];
    auto& gz = gr.grad_slot(iz);
    for (std::size_t r = 0; r < rows; ++r) {
      if (w[r] == T{0}) continue;
      const T coef = go * w[r] / wsum;
      for (std::size_t c = 0; c < classes; ++c) gz[r * classes + c] += coef * probs[r * classes + c];
      gz[r * classes + static_cast<std::size_t>(tgt[r])] -= coef;
    }
  };
  return logits.graph().record(Tensor<T>::scalar(loss), {iz}, std::move(back), "cross_entropy");
}

// ---------------------------------------------------------------------------

#define NORMBENCH_INSTANTIATE(T)                                                              \
  template Var<T> add(Var<T>, Var<T>);                                                        \
  template Var<T> sub(Var<T>, Var<T>);                                                        \
  template Var<T> mul(Var<T>, Var<T>);                                                        \
  template Var<T> div(Var<T>, Var<T>);                                                        \
  template Var<T> sqrt(Var<T>);                                                               \
  template Var<T> relu(Var<T>);                                                               \
  template Var<T> exp(Var<T>);                                                                \
  template Var<T> log(Var<T>);                                                                \
  template Var<T> square(Var<T>);                                                             \
  template Var<T> scale(Var<T>, T);                                                           \
  template Var<T> add_scalar(Var<T>, T);                                                      \
  template Var<T> matmul(Var<T>, Var<T>);                                                     \
  template Var<T> bmm(Var<T>, Var<T>);                                                        \
  template Var<T> transpose_last2(Var<T>);                                                    \
  template Var<T> reshape(Var<T>, Shape);                                                     \
  template Var<T> sum_all(Var<T>);                                                            \
  template Var<T> mean_all(Var<T>);                                                           \
  template Moments<T> reduce_moments(Var<T>, std::vector<std::size_t>, bool);                 \
  template Var<T> softmax(Var<T>, std::size_t);                                               \
  template Var<T> gather_rows(Var<T>, std::span<const std::size_t>);                          \
  template Var<T> scatter_rows(Var<T>, std::span<const std::size_t>, std::size_t);            \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                               \
  template Var<T> concat_cols(std::span<const Var<T>>);                                       \
  template Var<T> stop_gradient(Var<T>);                                                      \
  template Var<T> cross_entropy(Var<T>, std::span<const int>, std::span<const T>);

NORMBENCH_INSTANTIATE(float)
NORMBENCH_INSTANTIATE(double)

}  // namespace normbench
