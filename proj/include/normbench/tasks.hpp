#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace normbench {

enum class TaskKind { copy, parity, char_lm };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

/// Token 0 is padding for every task.
struct TaskSpec {
  TaskKind kind = TaskKind::copy;
  std::size_t vocab = 16;
  std::size_t min_len = 8;
  std::size_t max_len = 8;
  std::size_t train_size = 2048;
  std::size_t valid_size = 256;

  void validate() const;
  /// Input vocabulary seen by the embedding.
  std::size_t input_vocab() const;
  /// Number of output classes.
  std::size_t num_classes() const;
};

struct Sequence {
  std::vector<int> tokens;
  std::vector<int> targets;
};

struct Dataset {
  std::vector<Sequence> sequences;
  std::size_t size() const noexcept { return sequences.size(); }
  bool empty() const noexcept { return sequences.empty(); }
};

struct TaskData {
  Dataset train;
  Dataset valid;
};

/// Padded [B x T] batch; row-major token grids.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;

  std::size_t rows() const noexcept { return batch * length; }
  std::size_t valid_count() const;
};

/// Train and valid splits drawn from disjoint seed streams.
TaskData make_task(const TaskSpec& spec, std::uint64_t seed);

SequenceBatch make_batch(const Dataset& data, std::span<const std::size_t> indices);

/// Consecutive batches in dataset order. Without drop_last the final batch
/// may be smaller.
std::vector<SequenceBatch> batches_in_order(const Dataset& data, std::size_t batch_size, bool drop_last = false);

/// Row-stochastic transition matrix over tokens 1..vocab-1 used by char-lm.
struct MarkovChain {
  std::size_t states = 0;
  std::vector<double> transition;  // [states x states]
  std::vector<double> initial;

  std::vector<int> sample(std::size_t length, std::mt19937_64& rng) const;
};

MarkovChain make_markov_chain(std::size_t vocab, std::uint64_t seed);

/// Prefix parity of 0/1 bits.
std::vector<int> prefix_parity(std::span<const int> bits);

}  // namespace normbench
