#include "normbench/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "normbench/errors.hpp"

namespace normbench {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy: return "copy";
    case TaskKind::parity: return "parity";
    case TaskKind::char_lm: return "char-lm";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "copy") return TaskKind::copy;
  if (name == "parity") return TaskKind::parity;
  if (name == "char-lm") return TaskKind::char_lm;
  throw ConfigError("unknown task kind '" + std::string(name) + "' (expected copy, parity or char-lm)");
}

void TaskSpec::validate() const {
  if (min_len < 1 || max_len < min_len) throw ConfigError("task lengths need 1 <= min_len <= max_len");
  if (kind != TaskKind::parity && vocab < 3) throw ConfigError("task.vocab must be at least 3");
  if (train_size == 0 || valid_size == 0) throw ConfigError("task sizes must be positive");
}

std::size_t TaskSpec::input_vocab() const { return kind == TaskKind::parity ? 3 : vocab; }

std::size_t TaskSpec::num_classes() const { return kind == TaskKind::parity ? 2 : vocab; }

std::size_t SequenceBatch::valid_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

std::vector<int> prefix_parity(std::span<const int> bits) {
  std::vector<int> out(bits.size());
  int acc = 0;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    acc ^= bits[i] & 1;
    out[i] = acc;
  }
  return out;
}

MarkovChain make_markov_chain(std::size_t vocab, std::uint64_t seed) {
  if (vocab < 3) throw ConfigError("char-lm needs a vocabulary of at least 3");
  MarkovChain c;
  c.states = vocab - 1;
  c.transition.resize(c.states * c.states);
  c.initial.assign(c.states, 1.0 / static_cast<double>(c.states));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  for (std::size_t i = 0; i < c.states; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c.states; ++j) s += c.transition[i * c.states + j] = std::exp(1.5 * z(rng));
    for (std::size_t j = 0; j < c.states; ++j) c.transition[i * c.states + j] /= s;
  }
  return c;
}

namespace {

std::size_t draw(std::span<const double> probs, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

Dataset generate(const TaskSpec& spec, std::size_t count, std::mt19937_64& rng, const MarkovChain* chain) {
  Dataset d;
  d.sequences.reserve(count);
  std::uniform_int_distribution<std::size_t> len(spec.min_len, spec.max_len);
  std::uniform_int_distribution<int> sym(1, static_cast<int>(spec.vocab) - 1);
  std::uniform_int_distribution<int> bit(0, 1);
  std::vector<int> corpus;
  std::size_t cursor = 0;
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t L = len(rng);
    Sequence s;
    switch (spec.kind) {
      case TaskKind::copy:
        for (std::size_t t = 0; t < L; ++t) s.tokens.push_back(sym(rng));
        s.targets = s.tokens;
        break;
      case TaskKind::parity: {
        std::vector<int> bits(L);
        for (auto& b : bits) b = bit(rng);
        s.targets = prefix_parity(bits);
        for (int b : bits) s.tokens.push_back(b + 1);
        break;
      }
      case TaskKind::char_lm:
        if (corpus.size() < cursor + L + 1) {
          corpus.erase(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(cursor));
          cursor = 0;
          const auto more = chain->sample(std::max<std::size_t>(4096, L + 1), rng);
          corpus.insert(corpus.end(), more.begin(), more.end());
        }
        s.tokens.assign(corpus.begin() + static_cast<std::ptrdiff_t>(cursor),
                        corpus.begin() + static_cast<std::ptrdiff_t>(cursor + L));
        s.targets.assign(corpus.begin() + static_cast<std::ptrdiff_t>(cursor + 1),
                         corpus.begin() + static_cast<std::ptrdiff_t>(cursor + L + 1));
        cursor += L + 1;
        break;
    }
    d.sequences.push_back(std::move(s));
  }
  return d;
}

}  // namespace

std::vector<int> MarkovChain::sample(std::size_t length, std::mt19937_64& rng) const {
  std::vector<int> out;
  out.reserve(length);
  if (length == 0) return out;
  std::size_t state = draw(initial, rng);
  out.push_back(static_cast<int>(state) + 1);
  for (std::size_t i = 1; i < length; ++i) {
    state = draw(std::span<const double>(transition).subspan(state * states, states), rng);
    out.push_back(static_cast<int>(state) + 1);
  }
  return out;
}

TaskData make_task(const TaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto lo = static_cast<std::uint32_t>(seed), hi = static_cast<std::uint32_t>(seed >> 32);
  std::seed_seq chain_seq{lo, hi, 0u}, train_seq{lo, hi, 1u}, valid_seq{lo, hi, 2u};
  std::mt19937_64 chain_rng(chain_seq), train_rng(train_seq), valid_rng(valid_seq);
  MarkovChain chain;
  if (spec.kind == TaskKind::char_lm) chain = make_markov_chain(spec.vocab, chain_rng());
  TaskData out;
  out.train = generate(spec, spec.train_size, train_rng, &chain);
  out.valid = generate(spec, spec.valid_size, valid_rng, &chain);
  return out;
}

SequenceBatch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("empty batch");
  SequenceBatch b;
  b.batch = indices.size();
  for (auto i : indices) b.length = std::max(b.length, data.sequences.at(i).tokens.size());
  b.tokens.assign(b.rows(), 0);
  b.targets.assign(b.rows(), 0);
  b.mask.assign(b.rows(), 0);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Sequence& s = data.sequences[indices[r]];
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      b.tokens[r * b.length + t] = s.tokens[t];
      b.targets[r * b.length + t] = s.targets[t];
      b.mask[r * b.length + t] = 1;
    }
  }
  return b;
}

std::vector<SequenceBatch> batches_in_order(const Dataset& data, std::size_t batch_size, bool drop_last) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<SequenceBatch> out;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    if (drop_last && start + batch_size > data.size()) break;
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(start + batch_size, data.size()); ++i) idx.push_back(i);
    out.push_back(make_batch(data, idx));
  }
  return out;
}

}  // namespace normbench
