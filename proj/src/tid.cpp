#include "normbench/tid.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace normbench {

std::string_view to_string(StatsProvenance p) {
  switch (p) {
    case StatsProvenance::ema: return "ema";
    case StatsProvenance::exact_average: return "exact-average";
    case StatsProvenance::reestimated: return "reestimated";
  }
  return "?";
}

std::vector<double> PopulationSnapshot::sigma(std::size_t i) const {
  const auto& v = layers.at(i).var;
  std::vector<double> s(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) s[j] = std::sqrt(v[j]);
  return s;
}

namespace {

void check_alignment(const std::vector<LayerStats>& batch, const PopulationSnapshot& snap) {
  if (batch.size() != snap.layers.size())
    throw ShapeError("snapshot has " + std::to_string(snap.layers.size()) + " layers, model has " +
                     std::to_string(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (batch[i].mean.size() != snap.layers[i].mean.size() || batch[i].var.size() != snap.layers[i].var.size())
      throw ShapeError("snapshot layer " + std::to_string(i) + " has the wrong feature count");
}

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

PopulationSnapshot average_statistics(const std::vector<std::vector<LayerStats>>& stats) {
  if (stats.empty()) throw ShapeError("empty dataset");
  PopulationSnapshot snap;
  snap.provenance = StatsProvenance::exact_average;
  snap.layers = stats.front();
  for (auto& l : snap.layers) {
    std::fill(l.mean.begin(), l.mean.end(), 0.0);
    std::fill(l.var.begin(), l.var.end(), 0.0);
  }
  for (const auto& batch : stats) {
    check_alignment(batch, snap);
    for (std::size_t i = 0; i < batch.size(); ++i)
      for (std::size_t j = 0; j < batch[i].mean.size(); ++j) {
        snap.layers[i].mean[j] += batch[i].mean[j];
        snap.layers[i].var[j] += batch[i].var[j];
      }
  }
  const double n = static_cast<double>(stats.size());
  for (std::size_t i = 0; i < snap.layers.size(); ++i)
    for (std::size_t j = 0; j < snap.layers[i].mean.size(); ++j) {
      snap.layers[i].mean[j] /= n;
      snap.layers[i].var[j] /= n;
      if (!(snap.layers[i].var[j] > 0.0) || !std::isfinite(snap.layers[i].mean[j]))
        throw NumericError("population variance of layer " + std::to_string(i) + " feature " + std::to_string(j) +
                           " is not positive");
    }
  return snap;
}

TIDReport tid_from_statistics(const std::vector<std::vector<LayerStats>>& stats, const PopulationSnapshot& snapshot,
                              int epoch) {
  if (stats.empty()) throw ShapeError("empty dataset");
  const std::size_t layers = snapshot.layers.size();
  TIDReport rep;
  rep.epoch = epoch;
  rep.per_layer.resize(layers);
  std::vector<std::vector<double>> sigma(layers);
  std::vector<double> denom(layers);
  for (std::size_t i = 0; i < layers; ++i) {
    sigma[i] = snapshot.sigma(i);
    denom[i] = norm2(sigma[i]) + kTidGuard;
    rep.per_layer[i].layer_index = i;
  }
  for (const auto& batch : stats) {
    check_alignment(batch, snapshot);
    for (std::size_t i = 0; i < layers; ++i) {
      const auto& mu = snapshot.layers[i].mean;
      double dm = 0.0, dv = 0.0;
      for (std::size_t j = 0; j < mu.size(); ++j) {
        dm += std::pow(batch[i].mean[j] - mu[j], 2);
        dv += std::pow(std::sqrt(batch[i].var[j]) - sigma[i][j], 2);
      }
      rep.per_layer[i].mean_tid += std::sqrt(dm) / denom[i];
      rep.per_layer[i].var_tid += std::sqrt(dv) / denom[i];
    }
  }
  const double n = static_cast<double>(stats.size());
  for (auto& l : rep.per_layer) {
    l.mean_tid /= n;
    l.var_tid /= n;
    rep.avg_mean_tid += l.mean_tid;
    rep.avg_var_tid += l.var_tid;
  }
  if (layers > 0) {
    rep.avg_mean_tid /= static_cast<double>(layers);
    rep.avg_var_tid /= static_cast<double>(layers);
    rep.last_layer_total_tid = rep.per_layer.back().total();
  }
  return rep;
}

std::vector<LayerDeviation> deviations_from_statistics(const std::vector<std::vector<LayerStats>>& stats,
                                                       const PopulationSnapshot& snapshot) {
  if (stats.empty()) throw ShapeError("empty dataset");
  const std::size_t layers = snapshot.layers.size();
  std::vector<LayerDeviation> out(layers);
  for (std::size_t i = 0; i < layers; ++i) out[i].layer_index = i;
  for (const auto& batch : stats) {
    check_alignment(batch, snapshot);
    for (std::size_t i = 0; i < layers; ++i) {
      const auto& pop = snapshot.layers[i];
      const std::size_t d = pop.mean.size();
      double dm = 0.0, dv = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dm += std::abs(batch[i].mean[j] - pop.mean[j]) / (std::sqrt(pop.var[j]) + kTidGuard);
        dv += std::abs(batch[i].var[j] - pop.var[j]) / (pop.var[j] + kTidGuard);
      }
      out[i].mean_deviation += dm / static_cast<double>(d);
      out[i].var_deviation += dv / static_cast<double>(d);
    }
  }
  for (auto& l : out) {
    l.mean_deviation /= static_cast<double>(stats.size());
    l.var_deviation /= static_cast<double>(stats.size());
  }
  return out;
}

LinearProbeModel::LinearProbeModel(std::vector<std::size_t> widths, std::uint64_t seed, bool relu) : relu_(relu) {
  if (widths.size() < 2) throw ShapeError("probe model needs an input width and at least one layer");
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const double bound = std::sqrt(3.0 / static_cast<double>(widths[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<double> w(Shape{widths[l], widths[l + 1]});
    for (auto& v : w.storage()) v = u(rng);
    weights_.push_back(std::move(w));
  }
}

std::vector<LayerStats> LinearProbeModel::batch_statistics(const Tensor<double>& batch) const {
  if (batch.rank() != 2 || batch.dim(1) != weights_.front().dim(0))
    throw ShapeError("probe batch must be [n x " + std::to_string(weights_.front().dim(0)) + "]");
  const std::size_t n = batch.dim(0);
  std::vector<double> h(batch.storage());
  std::size_t width = batch.dim(1);
  std::vector<LayerStats> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const auto& w = weights_[l];
    const std::size_t next = w.dim(1);
    if (l > 0 && relu_)
      for (auto& v : h) v = std::max(v, 0.0);
    std::vector<double> z(n * next, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < width; ++k) {
        const double a = h[r * width + k];
        for (std::size_t c = 0; c < next; ++c) z[r * next + c] += a * w[k * next + c];
      }
    LayerStats s{std::vector<double>(next, 0.0), std::vector<double>(next, 0.0)};
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < next; ++c) s.mean[c] += z[r * next + c];
    for (auto& m : s.mean) m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < next; ++c) s.var[c] += std::pow(z[r * next + c] - s.mean[c], 2);
    for (auto& v : s.var) v /= static_cast<double>(n);
    out.push_back(std::move(s));
    h = std::move(z);
    width = next;
  }
  return out;
}

}  // namespace normbench
