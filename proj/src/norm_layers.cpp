#include "normbench/norm_layers.hpp"

#include <algorithm>
#include <cmath>

#include "normbench/errors.hpp"

namespace normbench {

std::string_view to_string(NormKind kind) {
  switch (kind) {
    case NormKind::bn: return "bn";
    case NormKind::ln: return "ln";
    case NormKind::rbn: return "rbn";
    case NormKind::brn: return "brn";
  }
  return "?";
}

NormKind parse_norm_kind(std::string_view name) {
  if (name == "bn") return NormKind::bn;
  if (name == "ln") return NormKind::ln;
  if (name == "rbn") return NormKind::rbn;
  if (name == "brn") return NormKind::brn;
  throw ConfigError("unknown norm kind '" + std::string(name) + "' (expected bn, ln, rbn or brn)");
}

void RegularizerConfig::validate() const {
  if (!(lambda >= 0.0) || !(nu >= 0.0) || !std::isfinite(lambda) || !std::isfinite(nu))
    throw ConfigError("penalty weights lambda and nu must be finite and non-negative");
}

std::vector<std::size_t> valid_rows(std::span<const std::uint8_t> mask) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) rows.push_back(i);
  return rows;
}

template <typename T>
NormState<T>::NormState(std::size_t features, T momentum_, T eps_)
    : running_mean(features, T(0)),
      running_var(features, T(1)),
      last_batch_mean(features, T(0)),
      last_batch_var(features, T(0)),
      momentum(momentum_),
      eps(eps_) {
  if (features == 0) throw ShapeError("norm layer needs at least one feature");
  if (!(momentum > T(0) && momentum <= T(1))) throw ConfigError("EMA factor must lie in (0, 1]");
  if (!(eps > T(0))) throw ConfigError("stabilizer eps must be positive");
}

template <typename T>
void ema_update(NormState<T>& state, std::span<const T> batch_mean, std::span<const T> batch_var) {
  const std::size_t d = state.features();
  if (batch_mean.size() != d || batch_var.size() != d)
    throw ShapeError("ema_update: statistics width does not match the layer");
  const T a = state.momentum;
  for (std::size_t j = 0; j < d; ++j) {
    state.running_mean[j] = (T(1) - a) * state.running_mean[j] + a * batch_mean[j];
    state.running_var[j] = (T(1) - a) * state.running_var[j] + a * batch_var[j];
  }
  ++state.update_count;
}

template <typename T>
BrnLimits<T> BrnSchedule::at(std::size_t step) const {
  if (step < warmup_steps) return {T(1), T(0)};
  double frac = 1.0;
  if (ramp_steps > 0) frac = std::min(1.0, static_cast<double>(step - warmup_steps) / ramp_steps);
  return {static_cast<T>(1.0 + (r_final - 1.0) * frac), static_cast<T>(d_final * frac)};
}

template BrnLimits<float> BrnSchedule::at<float>(std::size_t) const;
template BrnLimits<double> BrnSchedule::at<double>(std::size_t) const;

namespace {

template <typename T>
struct Rows {
  Var<T> x2d;  // [rows x d]
  std::vector<std::size_t> valid;
  std::size_t rows = 0;
  std::size_t d = 0;
};

template <typename T>
Rows<T> flatten_rows(Var<T> x, std::span<const std::uint8_t> mask) {
  const Shape& s = x.shape();
  Rows<T> r;
  r.d = s.back();
  r.rows = x.value().numel() / r.d;
  if (mask.size() != r.rows)
    throw ShapeError("mask has " + std::to_string(mask.size()) + " entries for " + std::to_string(r.rows) +
                     " token rows");
  r.x2d = s.size() == 2 ? x : reshape(x, Shape{r.rows, r.d});
  r.valid = valid_rows(mask);
  return r;
}

template <typename T>
Var<T> finish(Var<T> y, const Rows<T>& r, const Shape& original, const Affine<T>* affine) {
  if (affine) y = add(mul(y, affine->gamma), affine->beta);
  Var<T> out = scatter_rows(y, std::span<const std::size_t>(r.valid), r.rows);
  return original.size() == 2 ? out : reshape(out, original);
}

template <typename T>
Tensor<T> as_row(const std::vector<T>& v) {
  return Tensor<T>(Shape{1, v.size()}, v);
}

template <typename T>
void check_state(const NormState<T>& state, std::size_t d) {
  if (state.features() != d)
    throw ShapeError("norm layer has " + std::to_string(state.features()) + " features, input has " +
                     std::to_string(d));
}

template <typename T>
void record_batch(NormState<T>& state, const Moments<T>& mom) {
  const auto& m = mom.mean.value();
  const auto& v = mom.var.value();
  state.last_batch_mean.assign(m.data().begin(), m.data().end());
  state.last_batch_var.assign(v.data().begin(), v.data().end());
}

}  // namespace

template <typename T>
NormOutput<T> bn_forward_train(Var<T> x, std::span<const std::uint8_t> mask, NormState<T>& state,
                               bool update_stats, const Affine<T>* affine) {
  Rows<T> r = flatten_rows(x, mask);
  check_state(state, r.d);
  if (r.valid.size() < 2) throw ShapeError("batch normalization needs at least two valid positions");
  Graph<T>& g = x.graph();

  Var<T> xv = gather_rows(r.x2d, std::span<const std::size_t>(r.valid));
  Moments<T> mom = reduce_moments(xv, {0}, true);
  Var<T> y = div(sub(xv, mom.mean), sqrt(add_scalar(mom.var, state.eps)));

  NormOutput<T> out;
  out.trace.batch_mean = mom.mean;
  out.trace.batch_var = mom.var;
  out.trace.running_mean = g.constant(Tensor<T>::vector(state.running_mean));
  out.trace.running_var = g.constant(Tensor<T>::vector(state.running_var));
  out.trace.eps = state.eps;

  record_batch(state, mom);
  if (update_stats)
    ema_update(state, std::span<const T>(state.last_batch_mean), std::span<const T>(state.last_batch_var));
  out.out = finish(y, r, x.shape(), affine);
  return out;
}

template <typename T>
Var<T> bn_forward_inf(Var<T> x, std::span<const std::uint8_t> mask, const NormState<T>& state,
                      const Affine<T>* affine) {
  if (!state.initialized())
    throw StateError("inference-mode batch normalization before any statistics were collected");
  Rows<T> r = flatten_rows(x, mask);
  check_state(state, r.d);
  if (r.valid.empty()) throw ShapeError("no valid positions");
  Graph<T>& g = x.graph();
  Var<T> xv = gather_rows(r.x2d, std::span<const std::size_t>(r.valid));
  Var<T> mu = g.constant(as_row(state.running_mean));
  Var<T> sd = sqrt(add_scalar(g.constant(as_row(state.running_var)), state.eps));
  return finish(div(sub(xv, mu), sd), r, x.shape(), affine);
}

template <typename T>
Var<T> ln_forward(Var<T> x, std::span<const std::uint8_t> mask, T eps, const Affine<T>* affine) {
  Rows<T> r = flatten_rows(x, mask);
  if (r.d < 2) throw ShapeError("layer normalization needs at least two features");
  if (r.valid.empty()) throw ShapeError("no valid positions");
  Var<T> xv = gather_rows(r.x2d, std::span<const std::size_t>(r.valid));
  Moments<T> mom = reduce_moments(xv, {1}, true);
  Var<T> y = div(sub(xv, mom.mean), sqrt(add_scalar(mom.var, eps)));
  return finish(y, r, x.shape(), affine);
}

template <typename T>
NormOutput<T> brn_forward_train(Var<T> x, std::span<const std::uint8_t> mask, NormState<T>& state,
                                BrnLimits<T> limits, bool update_stats, const Affine<T>* affine) {
  Rows<T> r = flatten_rows(x, mask);
  check_state(state, r.d);
  if (r.valid.size() < 2) throw ShapeError("batch renormalization needs at least two valid positions");
  if ((limits.r_max > T(1) || limits.d_max > T(0)) && !state.initialized())
    throw StateError("batch renormalization needs population statistics once r_max > 1");
  Graph<T>& g = x.graph();

  Var<T> xv = gather_rows(r.x2d, std::span<const std::size_t>(r.valid));
  Moments<T> mom = reduce_moments(xv, {0}, true);
  Var<T> sd_b = sqrt(add_scalar(mom.var, state.eps));
  Var<T> xhat = div(sub(xv, mom.mean), sd_b);

  Tensor<T> rr(Shape{1, r.d}), dd(Shape{1, r.d});
  for (std::size_t j = 0; j < r.d; ++j) {
    const T sd = std::sqrt(state.running_var[j] + state.eps);
    rr[j] = std::clamp(sd_b.value()[j] / sd, T(1) / limits.r_max, limits.r_max);
    dd[j] = std::clamp((mom.mean.value()[j] - state.running_mean[j]) / sd, -limits.d_max, limits.d_max);
  }
  Var<T> y = add(mul(xhat, g.constant(std::move(rr))), g.constant(std::move(dd)));

  NormOutput<T> out;
  out.trace.batch_mean = mom.mean;
  out.trace.batch_var = mom.var;
  out.trace.running_mean = g.constant(Tensor<T>::vector(state.running_mean));
  out.trace.running_var = g.constant(Tensor<T>::vector(state.running_var));
  out.trace.eps = state.eps;

  record_batch(state, mom);
  if (update_stats)
    ema_update(state, std::span<const T>(state.last_batch_mean), std::span<const T>(state.last_batch_var));
  out.out = finish(y, r, x.shape(), affine);
  return out;
}

template <typename T>
Var<T> rbn_penalty(Graph<T>& graph, std::span<const BatchStatTrace<T>> traces, const RegularizerConfig& cfg) {
  cfg.validate();
  Var<T> total = graph.constant(Tensor<T>::scalar(T(0)));
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& t = traces[i];
    if (!t.batch_mean.valid() || !t.batch_var.valid() || !t.running_mean.valid() || !t.running_var.valid())
      throw StateError("rbn_penalty: layer " + std::to_string(i) + " is missing batch or running statistics");
    const Var<T> mu = stop_gradient(t.running_mean);
    const Var<T> var = stop_gradient(t.running_var);
    const Var<T> mean_gap = sum_all(square(sub(t.batch_mean, mu)));
    const Var<T> sd_b = sqrt(add_scalar(t.batch_var, t.eps));
    const Var<T> sd = sqrt(add_scalar(var, t.eps));
    const Var<T> sd_gap = sum_all(square(sub(sd_b, sd)));
    total = add(total, add(scale(mean_gap, static_cast<T>(cfg.lambda)), scale(sd_gap, static_cast<T>(cfg.nu))));
  }
  return total;
}

double decomposition_check(std::span<const double> x, std::span<const double> mu_b,
                           std::span<const double> sigma_b, std::span<const double> mu,
                           std::span<const double> sigma) {
  const std::size_t d = mu.size();
  if (d == 0 || mu_b.size() != d || sigma_b.size() != d || sigma.size() != d || x.size() % d != 0)
    throw ShapeError("decomposition_check: inconsistent widths");
  for (std::size_t j = 0; j < d; ++j)
    if (!(sigma_b[j] > 0.0) || !(sigma[j] > 0.0))
      throw NumericError("decomposition_check: standard deviations must be positive");
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t j = i % d;
    const double lhs = (x[i] - mu_b[j]) / sigma_b[j];
    const double rhs = ((x[i] - mu[j]) / sigma[j] + (mu[j] - mu_b[j]) / sigma[j]) * (sigma[j] / sigma_b[j]);
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return worst;
}

// ---------------------------------------------------------------------------

template <typename T>
NormLayer<T>::NormLayer(NormKind kind, std::size_t features, T momentum, T eps)
    : kind_(kind), state_(features, momentum, eps), gamma_(Shape{features}, T(1)), beta_(Shape{features}, T(0)) {
  gamma_.set_requires_grad(true);
  beta_.set_requires_grad(true);
}

template <typename T>
Var<T> NormLayer<T>::forward(ParamBinder<T>& params, Var<T> x, std::span<const std::uint8_t> mask,
                             NormContext<T>& ctx) {
  const Affine<T> affine{params(gamma_), params(beta_)};
  if (kind_ == NormKind::ln) return ln_forward(x, mask, state_.eps, &affine);
  if (ctx.mode == NormMode::inference) return bn_forward_inf(x, mask, state_, &affine);
  const bool update = ctx.mode == NormMode::train;
  NormOutput<T> out = kind_ == NormKind::brn ? brn_forward_train(x, mask, state_, ctx.brn, update, &affine)
                                             : bn_forward_train(x, mask, state_, update, &affine);
  if (ctx.traces) ctx.traces->push_back(out.trace);
  return out.out;
}

template struct NormState<float>;
template struct NormState<double>;
template class NormLayer<float>;
template class NormLayer<double>;

#define NORMBENCH_NORM_INSTANTIATE(T)                                                                     \
  template void ema_update(NormState<T>&, std::span<const T>, std::span<const T>);                       \
  template NormOutput<T> bn_forward_train(Var<T>, std::span<const std::uint8_t>, NormState<T>&, bool,    \
                                          const Affine<T>*);                                              \
  template Var<T> bn_forward_inf(Var<T>, std::span<const std::uint8_t>, const NormState<T>&,             \
                                 const Affine<T>*);                                                       \
  template Var<T> ln_forward(Var<T>, std::span<const std::uint8_t>, T, const Affine<T>*);                \
  template NormOutput<T> brn_forward_train(Var<T>, std::span<const std::uint8_t>, NormState<T>&,         \
                                           BrnLimits<T>, bool, const Affine<T>*);                         \
  template Var<T> rbn_penalty(Graph<T>&, std::span<const BatchStatTrace<T>>, const RegularizerConfig&);

NORMBENCH_NORM_INSTANTIATE(float)
NORMBENCH_NORM_INSTANTIATE(double)

}  // namespace normbench
