#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "normbench/autodiff.hpp"

namespace normbench {

enum class NormKind { bn, ln, rbn, brn };

std::string_view to_string(NormKind kind);
NormKind parse_norm_kind(std::string_view name);

/// True for kinds that normalize with mini-batch statistics during training.
constexpr bool uses_batch_statistics(NormKind kind) { return kind != NormKind::ln; }

/// Running and last-batch statistics of one normalization layer.
template <typename T>
struct NormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  std::vector<T> last_batch_mean;
  std::vector<T> last_batch_var;
  T momentum = T(0.1);  // EMA factor alpha
  T eps = T(1e-5);
  std::uint64_t update_count = 0;
  bool loaded = false;  // population statistics installed explicitly

  NormState() = default;
  NormState(std::size_t features, T momentum_, T eps_);

  std::size_t features() const noexcept { return running_mean.size(); }
  bool initialized() const noexcept { return update_count > 0 || loaded; }
};

/// mean <- (1 - a) mean + a batch_mean; var likewise.
template <typename T>
void ema_update(NormState<T>& state, std::span<const T> batch_mean, std::span<const T> batch_var);

/// Penalty weights of the regularized objective. Both distances are squared
/// Euclidean; the variance term compares standard deviations.
struct RegularizerConfig {
  double lambda = 0.0;
  double nu = 0.0;

  void validate() const;
  bool active() const noexcept { return lambda != 0.0 || nu != 0.0; }
};

/// Batch statistics of one train-mode forward as graph nodes, together with
/// the running statistics the layer held before this step's EMA update.
template <typename T>
struct BatchStatTrace {
  Var<T> batch_mean;    // [1 x d]
  Var<T> batch_var;     // [1 x d]
  Var<T> running_mean;  // [d]
  Var<T> running_var;   // [d]
  T eps = T(1e-5);
};

template <typename T>
struct BrnLimits {
  T r_max = T(1);
  T d_max = T(0);
};

/// Pure BN for `warmup_steps`, then r_max 1 -> r_final and d_max 0 -> d_final
/// linearly over `ramp_steps`.
struct BrnSchedule {
  std::size_t warmup_steps = 0;
  std::size_t ramp_steps = 0;
  double r_final = 3.0;
  double d_final = 5.0;

  template <typename T>
  BrnLimits<T> at(std::size_t step) const;
};

template <typename T>
struct Affine {
  Var<T> gamma;  // [d]
  Var<T> beta;   // [d]
};

template <typename T>
struct NormOutput {
  Var<T> out;
  BatchStatTrace<T> trace;
};

/// Indices of non-zero mask entries.
std::vector<std::size_t> valid_rows(std::span<const std::uint8_t> mask);

// The functions below take features shaped [..., d] whose leading axes
// flatten to one row per token; `mask` holds one entry per row. Padded rows
// are excluded from every statistic and come out as zeros.

template <typename T>
NormOutput<T> bn_forward_train(Var<T> x, std::span<const std::uint8_t> mask, NormState<T>& state,
                               bool update_stats = true, const Affine<T>* affine = nullptr);

template <typename T>
Var<T> bn_forward_inf(Var<T> x, std::span<const std::uint8_t> mask, const NormState<T>& state,
                      const Affine<T>* affine = nullptr);

template <typename T>
Var<T> ln_forward(Var<T> x, std::span<const std::uint8_t> mask, T eps,
                  const Affine<T>* affine = nullptr);

/// Batch renormalization. The correction factors r and d are constants in
/// backward.
template <typename T>
NormOutput<T> brn_forward_train(Var<T> x, std::span<const std::uint8_t> mask, NormState<T>& state,
                                BrnLimits<T> limits, bool update_stats = true,
                                const Affine<T>* affine = nullptr);

/// sum_i lambda ||mu_B - mu||^2 + nu ||sigma_B - sigma||^2 with the running
/// statistics behind a stop-gradient.
template <typename T>
Var<T> rbn_penalty(Graph<T>& graph, std::span<const BatchStatTrace<T>> traces,
                   const RegularizerConfig& cfg);

/// Largest |lhs - rhs| of
///   (x - mu_B) / sigma_B  ==  ((x - mu) / sigma + (mu - mu_B) / sigma) * sigma / sigma_B
/// over a row-major [rows x d] sample.
double decomposition_check(std::span<const double> x, std::span<const double> mu_b,
                           std::span<const double> sigma_b, std::span<const double> mu,
                           std::span<const double> sigma);

enum class NormMode {
  train,         // batch statistics, EMA update
  frozen_batch,  // batch statistics, no EMA update
  inference,     // population statistics
};

template <typename T>
struct NormContext {
  NormMode mode = NormMode::train;
  BrnLimits<T> brn{};
  std::vector<BatchStatTrace<T>>* traces = nullptr;  // filled by batch-statistics layers
};

/// A normalization layer with trainable scale/shift (identity at init).
template <typename T>
class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(NormKind kind, std::size_t features, T momentum, T eps);

  Var<T> forward(ParamBinder<T>& params, Var<T> x, std::span<const std::uint8_t> mask,
                 NormContext<T>& ctx);

  NormKind kind() const noexcept { return kind_; }
  bool batch_statistics() const noexcept { return uses_batch_statistics(kind_); }
  NormState<T>& state() noexcept { return state_; }
  const NormState<T>& state() const noexcept { return state_; }
  Tensor<T>& gamma() noexcept { return gamma_; }
  Tensor<T>& beta() noexcept { return beta_; }

 private:
  NormKind kind_ = NormKind::ln;
  NormState<T> state_;
  Tensor<T> gamma_;
  Tensor<T> beta_;
};

extern template struct NormState<float>;
extern template struct NormState<double>;
extern template class NormLayer<float>;
extern template class NormLayer<double>;

}  // namespace normbench
