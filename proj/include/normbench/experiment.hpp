#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "normbench/tasks.hpp"
#include "normbench/tid.hpp"
#include "normbench/transformer.hpp"

namespace normbench {

struct MeasureConfig {
  bool tid = true;
  std::size_t conditioning_every = 50;  // 0 disables
  std::size_t log_every = 50;
  std::size_t eval_batch_size = 64;
};

/// Everything one training run needs. Keys and defaults are listed by
/// config_keys(); model vocabulary, class count and sequence limit follow the
/// task.
struct ExperimentConfig {
  ModelConfig model;
  std::optional<bool> causal;  // unset: causal for parity and char-lm
  TaskSpec task;
  OptimConfig optim;
  std::size_t batch_size = 16;
  std::size_t steps = 1000;
  RegularizerConfig reg;
  double brn_warmup_epochs = 1.0;
  double brn_ramp_epochs = 5.0;
  double brn_r_max = 3.0;
  double brn_d_max = 5.0;
  MeasureConfig measure;
  std::uint64_t seed = 0;
  std::string preset;
  std::filesystem::path out = "normbench-run";

  /// Copies task-derived fields into `model` and checks every constraint.
  void validate();
  ModelConfig resolved_model() const;
  std::size_t steps_per_epoch() const;
  BrnSchedule brn_schedule() const;

  void set(std::string_view key, std::string_view value);
  /// Sorted key/value pairs of the fully resolved config.
  std::vector<std::pair<std::string, std::string>> canonical() const;
  /// FNV-1a over the canonical pairs, excluding run.out and run.seed.
  std::string hash() const;
  std::string to_text() const;
};

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string doc;
};

const std::vector<ConfigKey>& config_keys();

/// Parses `key = value` lines; `#` starts a comment. Unknown or repeated keys
/// throw ConfigError naming the key.
std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text);

struct Preset {
  std::string name;
  NormPlacement placement;
  double lambda;
  double nu;
};

const std::vector<Preset>& presets();
inline constexpr std::string_view kPresetNote =
    "preset weights were tuned on full-scale datasets and are a starting point at toy scale";
void apply_preset(ExperimentConfig& cfg, std::string_view name);

/// Overrides applied on top of the file, in precedence order.
struct ConfigOverrides {
  std::optional<std::string> preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<double> lambda;
  std::optional<double> nu;
  std::vector<std::pair<std::string, std::string>> sets;
};

/// defaults < file < preset < overrides; validated.
ExperimentConfig load_config(const std::optional<std::filesystem::path>& file, const ConfigOverrides& ov = {});

struct RunSummary {
  double final_train_loss = 0.0;
  double final_valid_loss = 0.0;
  double final_valid_metric = 0.0;
  double best_valid_loss = 0.0;
  double best_valid_metric = 0.0;
  std::optional<TIDReport> final_tid;
  double wall_clock_seconds = 0.0;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::size_t steps_completed = 0;
  bool diverged = false;
  std::string failure;
};

/// Trains one model and writes train_log.csv, tid.csv, conditioning.csv,
/// summary.json, config.txt and checkpoint.nbck into cfg.out. A non-finite
/// loss writes a diverged summary, keeps the logs, and rethrows.
RunSummary run_experiment(const ExperimentConfig& cfg);

struct SweepPoint {
  double lambda = 0.0;
  double nu = 0.0;
  std::uint64_t seed = 0;
  RunSummary summary;
};

struct SweepResult {
  std::vector<SweepPoint> runs;  // sorted by (lambda, nu, seed)
  std::optional<std::pair<double, double>> best;
};

/// Runs every (lambda, nu, seed) as an RBN model under `base.out`. Picks the
/// grid point with the lowest mean final validation loss among points with no
/// diverged seed; ties go to the smaller (lambda, nu).
SweepResult sweep(const ExperimentConfig& base, const std::vector<double>& lambdas, const std::vector<double>& nus,
                  const std::vector<std::uint64_t>& seeds, std::size_t threads);

/// Frozen-parameter forward passes over the training set in train mode so the
/// running statistics keep averaging. epochs = 0 returns the checkpoint as is.
Checkpoint reestimate(const ExperimentConfig& cfg, const Checkpoint& ck, std::size_t epochs);

/// Re-derived summary of a run or sweep directory, as JSON text.
std::string report(const std::filesystem::path& dir);

/// Threads for sweeps: NORMBENCH_THREADS when set, else hardware concurrency.
std::size_t default_threads();

std::string format_number(double v);

/// Command-line entry point. Returns the process exit code.
int cli_main(int argc, const char* const* argv);

}  // namespace normbench
