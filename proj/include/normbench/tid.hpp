#pragma once

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <ranges>
#include <string_view>
#include <vector>

#include "normbench/errors.hpp"
#include "normbench/tensor.hpp"

namespace normbench {

/// Per-feature mean and (biased) variance of one batch-statistics layer.
struct LayerStats {
  std::vector<double> mean;
  std::vector<double> var;
};

enum class StatsProvenance { ema, exact_average, reestimated };

std::string_view to_string(StatsProvenance p);

struct PopulationSnapshot {
  std::vector<LayerStats> layers;
  StatsProvenance provenance = StatsProvenance::exact_average;

  /// Standard deviations of layer `i` (no stabilizer).
  std::vector<double> sigma(std::size_t i) const;
};

struct LayerTid {
  std::size_t layer_index = 0;
  double mean_tid = 0.0;
  double var_tid = 0.0;

  double total() const noexcept { return mean_tid + var_tid; }
};

struct TIDReport {
  int epoch = 0;
  std::vector<LayerTid> per_layer;
  double avg_mean_tid = 0.0;
  double avg_var_tid = 0.0;
  double last_layer_total_tid = 0.0;
};

struct LayerDeviation {
  std::size_t layer_index = 0;
  double mean_deviation = 0.0;  // avg_j |mu_B - mu| / (sigma + c)
  double var_deviation = 0.0;   // avg_j |var_B - var| / (var + c)
};

inline constexpr double kTidGuard = 1e-8;

/// Batch-statistics layers of a model, in forward order, for one batch.
template <typename M>
concept StatisticsModel = requires(M& m, const typename M::batch_type& b) {
  { m.batch_statistics(b) } -> std::convertible_to<std::vector<LayerStats>>;
};

// Cores over precomputed statistics: stats[batch][layer].
PopulationSnapshot average_statistics(const std::vector<std::vector<LayerStats>>& stats);
TIDReport tid_from_statistics(const std::vector<std::vector<LayerStats>>& stats,
                              const PopulationSnapshot& snapshot, int epoch = 0);
std::vector<LayerDeviation> deviations_from_statistics(const std::vector<std::vector<LayerStats>>& stats,
                                                       const PopulationSnapshot& snapshot);

template <StatisticsModel M, std::ranges::input_range R>
std::vector<std::vector<LayerStats>> collect_statistics(M& model, const R& batches) {
  std::vector<std::vector<LayerStats>> out;
  for (const auto& b : batches) out.push_back(model.batch_statistics(b));
  if (out.empty()) throw ShapeError("empty dataset");
  if (out.front().empty()) throw StateError("model has no batch-statistics layers");
  return out;
}

/// Exact average of batch means and batch variances over one pass.
template <StatisticsModel M, std::ranges::input_range R>
PopulationSnapshot estimate_population(M& model, const R& batches) {
  return average_statistics(collect_statistics(model, batches));
}

template <StatisticsModel M, std::ranges::input_range R>
TIDReport compute_tid(M& model, const R& batches, const PopulationSnapshot& snapshot, int epoch = 0) {
  return tid_from_statistics(collect_statistics(model, batches), snapshot, epoch);
}

template <StatisticsModel M, std::ranges::input_range R>
std::vector<LayerDeviation> deviation_curves(M& model, const R& batches, const PopulationSnapshot& snapshot) {
  return deviations_from_statistics(collect_statistics(model, batches), snapshot);
}

/// Stack of fixed bias-free projections with optional ReLU between them. Each
/// projection output counts as one batch-statistics layer. Positively
/// homogeneous in its input.
class LinearProbeModel {
 public:
  using batch_type = Tensor<double>;  // [n x d_in]

  LinearProbeModel(std::vector<std::size_t> widths, std::uint64_t seed, bool relu = true);

  std::vector<LayerStats> batch_statistics(const Tensor<double>& batch) const;
  const std::vector<Tensor<double>>& weights() const noexcept { return weights_; }

 private:
  std::vector<Tensor<double>> weights_;
  bool relu_;
};

}  // namespace normbench
