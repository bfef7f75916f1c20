#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "normbench/autodiff.hpp"
#include "normbench/checkpoint.hpp"
#include "normbench/norm_layers.hpp"
#include "normbench/tasks.hpp"
#include "normbench/tid.hpp"

namespace normbench {

enum class NormPlacement { pre, post };

std::string_view to_string(NormPlacement p);
NormPlacement parse_norm_placement(std::string_view name);

inline constexpr std::size_t kAllLayers = std::numeric_limits<std::size_t>::max();

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t d_model = 16;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 32;
  NormKind norm_kind = NormKind::bn;
  NormPlacement placement = NormPlacement::pre;
  /// Bottom blocks that use norm_kind; the rest use LN. kAllLayers means every
  /// block and the final norm.
  std::size_t mixed_norm_count = kAllLayers;
  std::size_t vocab = 16;
  std::size_t num_classes = 16;
  std::size_t max_seq_len = 64;
  bool causal = false;
  double momentum = 0.1;
  double eps = 1e-5;
  double dropout = 0.0;

  void validate() const;
  std::size_t replaced_blocks() const;
};

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct FfnParams {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct EncoderBlock {
  AttentionParams<T> attn;
  FfnParams<T> ffn;
  NormLayer<T> norm1;
  NormLayer<T> norm2;
};

/// Encoder-only transformer with a per-token classification head. Features
/// flow as [B*T x d] row blocks.
template <typename T>
class Transformer {
 public:
  using batch_type = SequenceBatch;

  Transformer(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return cfg_; }

  /// Logits [B*T x num_classes]. Block inputs are appended to `block_inputs`
  /// when given.
  Var<T> forward(ParamBinder<T>& params, const SequenceBatch& batch, NormContext<T>& ctx,
                 std::vector<Tensor<T>>* block_inputs = nullptr, std::mt19937_64* dropout_rng = nullptr);

  Var<T> block_forward(ParamBinder<T>& params, std::size_t index, Var<T> x, const SequenceBatch& batch,
                       NormContext<T>& ctx, std::mt19937_64* dropout_rng = nullptr);

  /// Trainable tensors in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters();
  /// Every normalization layer in forward order.
  std::vector<std::pair<std::string, NormLayer<T>*>> norm_layers();
  /// Only layers that use batch statistics, in forward order.
  std::vector<std::pair<std::string, NormLayer<T>*>> batch_norm_layers();

  /// Frozen-batch statistics of every batch-statistics layer for one batch.
  std::vector<LayerStats> batch_statistics(const SequenceBatch& batch);

  /// Installs population statistics into the batch-statistics layers.
  void load_snapshot(const PopulationSnapshot& snap);
  /// Current running statistics as a snapshot.
  PopulationSnapshot running_snapshot() const;

  BrnLimits<T> brn_limits{};

  Checkpoint to_checkpoint(StatsProvenance provenance) const;
  /// Returns the stored provenance. Throws CheckpointError naming the first
  /// array or layer that does not fit.
  StatsProvenance load_checkpoint(const Checkpoint& ck);

  EncoderBlock<T>& block(std::size_t i) { return blocks_.at(i); }
  Tensor<T>& token_embedding() noexcept { return token_embed_; }
  Tensor<T>& position_embedding() noexcept { return pos_embed_; }

 private:
  Var<T> attention(ParamBinder<T>& params, AttentionParams<T>& a, Var<T> x, const SequenceBatch& batch);
  Var<T> ffn(ParamBinder<T>& params, FfnParams<T>& f, Var<T> x);
  Var<T> dropout(Var<T> x, std::mt19937_64* rng, const NormContext<T>& ctx);

  ModelConfig cfg_;
  Tensor<T> token_embed_;
  Tensor<T> pos_embed_;
  std::vector<EncoderBlock<T>> blocks_;
  std::optional<NormLayer<T>> final_norm_;
  Tensor<T> head_w_;
  Tensor<T> head_b_;
};

template <typename T>
struct LossTerms {
  Var<T> ce;
  Var<T> penalty;  // invalid when the regularizer is inactive
  Var<T> total;
};

/// Cross-entropy over valid positions plus the RBN penalty of every
/// batch-statistics layer.
template <typename T>
LossTerms<T> training_objective(Transformer<T>& model, ParamBinder<T>& params, const SequenceBatch& batch,
                                NormContext<T>& ctx, const RegularizerConfig& reg,
                                std::vector<Tensor<T>>* block_inputs = nullptr,
                                std::mt19937_64* dropout_rng = nullptr);

struct OptimConfig {
  double lr = 3e-3;
  std::size_t warmup = 100;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;

  void validate() const;
};

/// base * min(t / warmup, sqrt(warmup / t)) for step t >= 1.
double inverse_sqrt_lr(double base, std::size_t warmup, std::size_t step);

template <typename T>
class Adam {
 public:
  explicit Adam(OptimConfig cfg) : cfg_(cfg) {}

  void update(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  OptimConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainerConfig {
  OptimConfig optim;
  RegularizerConfig reg;
  BrnSchedule brn;
  bool update_parameters = true;
};

struct StepResult {
  double ce = 0.0;
  double penalty = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

template <typename T>
class Trainer {
 public:
  Trainer(Transformer<T>& model, TrainerConfig cfg, std::uint64_t seed);

  /// One optimizer update on `batch`. Throws NumericError on a non-finite loss.
  StepResult train_step(const SequenceBatch& batch, std::vector<Tensor<T>>* block_inputs = nullptr);
  std::size_t step() const noexcept { return step_; }

 private:
  Transformer<T>* model_;
  TrainerConfig cfg_;
  Adam<T> adam_;
  std::mt19937_64 dropout_rng_;
  std::size_t step_ = 0;
};

enum class EvalMode { population, batch_stats };

struct EvalResult {
  double loss = 0.0;      // mean CE per valid token
  double accuracy = 0.0;  // argmax token accuracy
  std::size_t tokens = 0;
};

/// Population mode normalizes with the stored statistics and is independent of
/// sequence order and batching. Batch-stats mode normalizes each batch of
/// `batch_size` sequences with its own statistics.
template <typename T>
EvalResult evaluate(Transformer<T>& model, const Dataset& data, EvalMode mode, std::size_t batch_size);

extern template class Transformer<float>;
extern template class Transformer<double>;
extern template class Adam<float>;
extern template class Adam<double>;
extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace normbench
