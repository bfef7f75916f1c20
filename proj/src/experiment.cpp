#include "normbench/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>
#include <tuple>

#include <json.hpp>

#include "normbench/conditioning.hpp"
#include "normbench/errors.hpp"

namespace normbench {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError("invalid value '" + std::string(value) + "' for key '" + std::string(key) + "' (expected " +
                    std::string(expected) + ")");
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t to_size(std::string_view key, std::string_view v) { return static_cast<std::size_t>(to_u64(key, v)); }

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::string exact(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Entry {
  const char* key;
  const char* doc;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename F>
Entry size_entry(const char* key, const char* doc, F field) {
  return {key, doc, [=](ExperimentConfig& c, std::string_view v) { field(c) = to_size(key, v); },
          [=](const ExperimentConfig& c) { return std::to_string(field(const_cast<ExperimentConfig&>(c))); }};
}

template <typename F>
Entry double_entry(const char* key, const char* doc, F field) {
  return {key, doc, [=](ExperimentConfig& c, std::string_view v) { field(c) = to_double(key, v); },
          [=](const ExperimentConfig& c) { return exact(field(const_cast<ExperimentConfig&>(c))); }};
}

const std::vector<Entry>& entries() {
  using C = ExperimentConfig;
  static const std::vector<Entry> table = {
      size_entry("model.num_layers", "encoder blocks", [](C& c) -> auto& { return c.model.num_layers; }),
      size_entry("model.d_model", "feature width", [](C& c) -> auto& { return c.model.d_model; }),
      size_entry("model.num_heads", "attention heads, must divide d_model",
                 [](C& c) -> auto& { return c.model.num_heads; }),
      size_entry("model.ffn_dim", "hidden width of the feed-forward sublayer",
                 [](C& c) -> auto& { return c.model.ffn_dim; }),
      {"model.placement", "pre or post",
       [](C& c, std::string_view v) { c.model.placement = parse_norm_placement(v); },
       [](const C& c) { return std::string(to_string(c.model.placement)); }},
      double_entry("model.dropout", "dropout rate in [0, 1)", [](C& c) -> auto& { return c.model.dropout; }),
      {"model.causal", "auto, true or false; auto is causal for parity and char-lm",
       [](C& c, std::string_view v) {
         if (v == "auto")
           c.causal.reset();
         else
           c.causal = to_bool("model.causal", v);
       },
       [](const C& c) { return c.causal ? std::string(*c.causal ? "true" : "false") : std::string("auto"); }},
      {"task.kind", "copy, parity or char-lm", [](C& c, std::string_view v) { c.task.kind = parse_task_kind(v); },
       [](const C& c) { return std::string(to_string(c.task.kind)); }},
      size_entry("task.vocab", "token alphabet size including padding", [](C& c) -> auto& { return c.task.vocab; }),
      size_entry("task.min_len", "shortest sequence", [](C& c) -> auto& { return c.task.min_len; }),
      size_entry("task.max_len", "longest sequence", [](C& c) -> auto& { return c.task.max_len; }),
      size_entry("task.train_size", "training sequences", [](C& c) -> auto& { return c.task.train_size; }),
      size_entry("task.valid_size", "validation sequences", [](C& c) -> auto& { return c.task.valid_size; }),
      double_entry("optim.lr", "peak learning rate", [](C& c) -> auto& { return c.optim.lr; }),
      size_entry("optim.warmup", "warmup steps of the inverse-sqrt schedule",
                 [](C& c) -> auto& { return c.optim.warmup; }),
      double_entry("optim.beta1", "Adam beta1", [](C& c) -> auto& { return c.optim.beta1; }),
      double_entry("optim.beta2", "Adam beta2", [](C& c) -> auto& { return c.optim.beta2; }),
      double_entry("optim.eps", "Adam epsilon", [](C& c) -> auto& { return c.optim.eps; }),
      size_entry("optim.batch_size", "sequences per training batch", [](C& c) -> auto& { return c.batch_size; }),
      size_entry("optim.steps", "optimizer updates", [](C& c) -> auto& { return c.steps; }),
      {"norm.kind", "bn, ln, rbn or brn", [](C& c, std::string_view v) { c.model.norm_kind = parse_norm_kind(v); },
       [](const C& c) { return std::string(to_string(c.model.norm_kind)); }},
      {"norm.mixed_count", "bottom blocks using norm.kind, the rest LN; all replaces the final norm too",
       [](C& c, std::string_view v) {
         c.model.mixed_norm_count = v == "all" ? kAllLayers : to_size("norm.mixed_count", v);
       },
       [](const C& c) {
         return c.model.mixed_norm_count == kAllLayers ? std::string("all") : std::to_string(c.model.mixed_norm_count);
       }},
      double_entry("norm.momentum", "EMA factor alpha of the running statistics",
                   [](C& c) -> auto& { return c.model.momentum; }),
      double_entry("norm.eps", "variance stabilizer", [](C& c) -> auto& { return c.model.eps; }),
      double_entry("norm.lambda", "mean penalty weight (rbn only)", [](C& c) -> auto& { return c.reg.lambda; }),
      double_entry("norm.nu", "standard-deviation penalty weight (rbn only)", [](C& c) -> auto& { return c.reg.nu; }),
      double_entry("norm.brn_warmup_epochs", "brn epochs with r and d pinned to 1 and 0",
                   [](C& c) -> auto& { return c.brn_warmup_epochs; }),
      double_entry("norm.brn_ramp_epochs", "brn epochs to reach the final limits",
                   [](C& c) -> auto& { return c.brn_ramp_epochs; }),
      double_entry("norm.brn_r_max", "final brn r limit", [](C& c) -> auto& { return c.brn_r_max; }),
      double_entry("norm.brn_d_max", "final brn d limit", [](C& c) -> auto& { return c.brn_d_max; }),
      {"measure.tid", "TID before training and after every epoch",
       [](C& c, std::string_view v) { c.measure.tid = to_bool("measure.tid", v); },
       [](const C& c) { return std::string(c.measure.tid ? "true" : "false"); }},
      size_entry("measure.conditioning_every", "steps between conditioning reports, 0 disables",
                 [](C& c) -> auto& { return c.measure.conditioning_every; }),
      size_entry("measure.log_every", "steps between train_log rows with validation",
                 [](C& c) -> auto& { return c.measure.log_every; }),
      size_entry("measure.eval_batch_size", "sequences per validation batch",
                 [](C& c) -> auto& { return c.measure.eval_batch_size; }),
      {"run.seed", "seed of data, initialization and shuffling",
       [](C& c, std::string_view v) { c.seed = to_u64("run.seed", v); },
       [](const C& c) { return std::to_string(c.seed); }},
      {"run.preset", "named (lambda, nu, placement) preset, empty for none",
       [](C& c, std::string_view v) { c.preset = std::string(v); }, [](const C& c) { return c.preset; }},
      {"run.out", "output directory", [](C& c, std::string_view v) { c.out = std::string(v); },
       [](const C& c) { return c.out.string(); }},
  };
  return table;
}

const Entry& find_entry(std::string_view key) {
  for (const auto& e : entries())
    if (key == e.key) return e;
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, std::string_view header) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error("cannot write '" + path.string() + "'");
    out_ << header << '\n';
    out_.flush();
  }
  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << fields[i];
    out_ << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

std::string csv_quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out(1);
  bool in_quotes = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_quotes) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"')
        out.back() += '"', ++i;
      else if (c == '"')
        in_quotes = false;
      else
        out.back() += c;
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      out.emplace_back();
    } else if (c != '\r') {
      out.back() += c;
    }
  }
  return out;
}

/// Rows of a CSV file as header-keyed maps.
std::vector<std::map<std::string, std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw Error("'" + path.string() + "' has no header");
  const auto header = split_csv(line);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split_csv(line);
    if (f.size() != header.size())
      throw Error("'" + path.string() + "' row " + std::to_string(rows.size() + 1) + " has " +
                  std::to_string(f.size()) + " fields, header has " + std::to_string(header.size()));
    auto& r = rows.emplace_back();
    for (std::size_t i = 0; i < f.size(); ++i) r[header[i]] = f[i];
  }
  return rows;
}

double csv_number(const std::map<std::string, std::string>& row, const std::string& key) {
  const auto it = row.find(key);
  if (it == row.end()) throw Error("missing CSV column '" + key + "'");
  const std::string& v = it->second;
  if (v == "inf") return std::numeric_limits<double>::infinity();
  if (v == "-inf") return -std::numeric_limits<double>::infinity();
  if (v == "nan" || v == "-nan") return std::numeric_limits<double>::quiet_NaN();
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw Error("non-numeric CSV field '" + v + "' in '" + key + "'");
  return out;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json tid_json(const TIDReport& r) {
  json layers = json::array();
  for (const auto& l : r.per_layer)
    layers.push_back({{"layer_index", l.layer_index},
                      {"mean_tid", number_or_null(l.mean_tid)},
                      {"var_tid", number_or_null(l.var_tid)},
                      {"total_tid", number_or_null(l.total())}});
  return {{"epoch", r.epoch},
          {"avg_mean_tid", number_or_null(r.avg_mean_tid)},
          {"avg_var_tid", number_or_null(r.avg_var_tid)},
          {"last_layer_total_tid", number_or_null(r.last_layer_total_tid)},
          {"per_layer", layers}};
}

json summary_json(const RunSummary& s, const ExperimentConfig& cfg) {
  json j = {{"final_train_loss", number_or_null(s.final_train_loss)},
            {"final_valid_loss", number_or_null(s.final_valid_loss)},
            {"final_valid_metric", number_or_null(s.final_valid_metric)},
            {"best_valid_loss", number_or_null(s.best_valid_loss)},
            {"best_valid_metric", number_or_null(s.best_valid_metric)},
            {"valid_metric", "token_accuracy"},
            {"final_tid", s.final_tid ? tid_json(*s.final_tid) : json(nullptr)},
            {"wall_clock_seconds", s.wall_clock_seconds},
            {"config_hash", s.config_hash},
            {"seed", s.seed},
            {"steps_completed", s.steps_completed},
            {"diverged", s.diverged},
            {"failure", s.failure},
            {"stats_provenance", "ema"}};
  if (!cfg.preset.empty()) j["preset_note"] = std::string(kPresetNote);
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

void run_into(const ExperimentConfig& cfg, RunSummary& summary) {
  const auto t0 = std::chrono::steady_clock::now();
  summary = RunSummary{};
  summary.config_hash = cfg.hash();
  summary.seed = cfg.seed;
  fs::create_directories(cfg.out);
  write_text(cfg.out / "config.txt", cfg.to_text());

  const TaskData data = make_task(cfg.task, cfg.seed);
  Transformer<float> model(cfg.model, cfg.seed);
  Trainer<float> trainer(model, TrainerConfig{cfg.optim, cfg.reg, cfg.brn_schedule(), true}, cfg.seed);
  const auto measure_batches = batches_in_order(data.train, cfg.batch_size, true);
  const std::size_t per_epoch = measure_batches.size();
  const bool has_stats = !model.batch_norm_layers().empty();

  CsvWriter log(cfg.out / "train_log.csv", "step,epoch,lr,ce_loss,penalty,total_loss,valid_loss,valid_metric");
  CsvWriter tid(cfg.out / "tid.csv", "epoch,layer_index,mean_tid,var_tid,avg");
  CsvWriter cond(cfg.out / "conditioning.csv", "step,layer_index,c_50,c_80,c_max");

  auto measure_tid = [&](int epoch) {
    if (!cfg.measure.tid || !has_stats) return;
    const auto snap = estimate_population(model, measure_batches);
    const auto rep = compute_tid(model, measure_batches, snap, epoch);
    const std::string e = std::to_string(epoch);
    for (const auto& l : rep.per_layer)
      tid.row({e, std::to_string(l.layer_index), format_number(l.mean_tid), format_number(l.var_tid), "0"});
    tid.row({e, "-1", format_number(rep.avg_mean_tid), format_number(rep.avg_var_tid), "1"});
    summary.final_tid = rep;
  };

  auto finish = [&] {
    summary.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_text(cfg.out / "summary.json", summary_json(summary, cfg).dump(2) + "\n");
  };

  try {
    measure_tid(0);
    const std::uint64_t lo = cfg.seed & 0xffffffffu, hi = cfg.seed >> 32;
    std::seed_seq shuffle_seq{static_cast<std::uint32_t>(lo), static_cast<std::uint32_t>(hi), 3u};
    std::mt19937_64 shuffle_rng(shuffle_seq);
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    summary.best_valid_loss = std::numeric_limits<double>::infinity();
    std::size_t step = 0;
    int epoch = 0;
    while (step < cfg.steps) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      std::size_t b = 0;
      for (; b < per_epoch && step < cfg.steps; ++b) {
        const auto batch =
            make_batch(data.train, std::span<const std::size_t>(order).subspan(b * cfg.batch_size, cfg.batch_size));
        const std::size_t s = step + 1;
        const bool want_cond =
            cfg.measure.conditioning_every > 0 && (s == 1 || s % cfg.measure.conditioning_every == 0);
        std::vector<Tensor<float>> inputs;
        const StepResult r = trainer.train_step(batch, want_cond ? &inputs : nullptr);
        step = s;
        summary.steps_completed = s;
        summary.final_train_loss = r.ce;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          const DenseMatrix m = reshape_tokens(inputs[i], batch.mask);
          if (m.rows <= m.cols) continue;
          const auto rep = condition_report(m, i, s);
          cond.row({std::to_string(s), std::to_string(i), format_number(rep.c_50), format_number(rep.c_80),
                    format_number(rep.c_max)});
        }
        if (s % cfg.measure.log_every == 0 || s == cfg.steps) {
          const auto ev = evaluate(model, data.valid, EvalMode::population, cfg.measure.eval_batch_size);
          log.row({std::to_string(s), format_number(static_cast<double>(s) / static_cast<double>(per_epoch)),
                   format_number(r.lr), format_number(r.ce), format_number(r.penalty), format_number(r.total),
                   format_number(ev.loss), format_number(ev.accuracy)});
          summary.final_valid_loss = ev.loss;
          summary.final_valid_metric = ev.accuracy;
          if (ev.loss < summary.best_valid_loss) summary.best_valid_loss = ev.loss;
          summary.best_valid_metric = std::max(summary.best_valid_metric, ev.accuracy);
        }
      }
      ++epoch;
      measure_tid(epoch);
    }
  } catch (const NumericError& e) {
    summary.diverged = true;
    summary.failure = e.what();
    finish();
    throw;
  }
  model.to_checkpoint(StatsProvenance::ema).save(cfg.out / "checkpoint.nbck");
  finish();
}

struct GroupOutcome {
  double lambda, nu;
  std::size_t seeds = 0;
  double mean_valid_loss = 0.0;
  std::string excluded;
};

struct SweepRow {
  double lambda, nu;
  std::uint64_t seed;
  std::string status, reason;
  double valid_loss;
};

/// Groups rows sorted by (lambda, nu, seed) and applies the selection rule.
std::vector<GroupOutcome> group_rows(const std::vector<SweepRow>& rows, std::optional<std::size_t>& best) {
  std::vector<GroupOutcome> groups;
  for (const auto& r : rows) {
    if (groups.empty() || groups.back().lambda != r.lambda || groups.back().nu != r.nu)
      groups.push_back({r.lambda, r.nu, 0, 0.0, ""});
    auto& g = groups.back();
    ++g.seeds;
    if (r.status != "ok" && g.excluded.empty())
      g.excluded = "seed " + std::to_string(r.seed) + " " + r.status + ": " + r.reason;
    g.mean_valid_loss += r.valid_loss;
  }
  best.reset();
  for (std::size_t i = 0; i < groups.size(); ++i) {
    auto& g = groups[i];
    g.mean_valid_loss /= static_cast<double>(g.seeds);
    if (g.excluded.empty() && !std::isfinite(g.mean_valid_loss)) g.excluded = "non-finite validation loss";
    if (!g.excluded.empty()) continue;
    if (!best || g.mean_valid_loss < groups[*best].mean_valid_loss) best = i;
  }
  return groups;
}

std::string run_dir_name(double lambda, double nu, std::uint64_t seed) {
  return "lambda_" + format_number(lambda) + "_nu_" + format_number(nu) + "_seed_" + std::to_string(seed);
}

}  // namespace

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void ExperimentConfig::validate() {
  task.validate();
  optim.validate();
  if (batch_size == 0) throw ConfigError("optim.batch_size must be positive");
  if (steps == 0) throw ConfigError("optim.steps must be positive");
  if (task.train_size < batch_size) throw ConfigError("task.train_size is smaller than optim.batch_size");
  if (!(reg.lambda >= 0.0 && reg.nu >= 0.0)) throw ConfigError("norm.lambda and norm.nu must be non-negative");
  if ((reg.lambda != 0.0 || reg.nu != 0.0) && model.norm_kind != NormKind::rbn)
    throw ConfigError("norm.lambda and norm.nu must be 0 unless norm.kind = rbn");
  if (!(brn_warmup_epochs >= 0.0 && brn_ramp_epochs >= 0.0))
    throw ConfigError("brn warmup and ramp epochs must be non-negative");
  if (!(brn_r_max >= 1.0 && brn_d_max >= 0.0)) throw ConfigError("norm.brn_r_max must be >= 1 and norm.brn_d_max >= 0");
  if (measure.log_every == 0) throw ConfigError("measure.log_every must be positive");
  if (measure.eval_batch_size == 0) throw ConfigError("measure.eval_batch_size must be positive");
  if (!preset.empty() && std::none_of(presets().begin(), presets().end(), [&](const Preset& p) { return p.name == preset; }))
    throw ConfigError("unknown preset '" + preset + "'");
  model = resolved_model();
  model.validate();
}

ModelConfig ExperimentConfig::resolved_model() const {
  ModelConfig m = model;
  m.vocab = task.input_vocab();
  m.num_classes = task.num_classes();
  m.max_seq_len = task.max_len;
  m.causal = causal.value_or(task.kind != TaskKind::copy);
  return m;
}

std::size_t ExperimentConfig::steps_per_epoch() const { return task.train_size / batch_size; }

BrnSchedule ExperimentConfig::brn_schedule() const {
  const double per = static_cast<double>(steps_per_epoch());
  return BrnSchedule{static_cast<std::size_t>(std::llround(brn_warmup_epochs * per)),
                     static_cast<std::size_t>(std::llround(brn_ramp_epochs * per)), brn_r_max, brn_d_max};
}

void ExperimentConfig::set(std::string_view key, std::string_view value) { find_entry(key).set(*this, trim(value)); }

std::vector<std::pair<std::string, std::string>> ExperimentConfig::canonical() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : entries()) out.emplace_back(e.key, e.get(*this));
  std::sort(out.begin(), out.end());
  return out;
}

std::string ExperimentConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
  };
  for (const auto& [k, v] : canonical()) {
    if (k == "run.out" || k == "run.seed") continue;
    mix(k);
    mix("=");
    mix(v);
    mix("\n");
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : canonical()) out += k + " = " + v + "\n";
  return out;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    const ExperimentConfig defaults;
    for (const auto& e : entries()) out.push_back({e.key, e.get(defaults), e.doc});
    return out;
  }();
  return keys;
}

std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + std::string(line) + "'");
    const std::string key(trim(line.substr(0, eq)));
    find_entry(key);
    for (const auto& [k, v] : out)
      if (k == key) throw ConfigError("key '" + key + "' given twice");
    out.emplace_back(key, std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

const std::vector<Preset>& presets() {
  using P = NormPlacement;
  static const std::vector<Preset> table = {
      {"iwslt14-postnorm", P::post, 10, 0},       {"iwslt14-prenorm", P::pre, 0.1, 0.01},
      {"wmt16-postnorm", P::post, 100, 0},        {"wmt16-prenorm", P::pre, 0.1, 0},
      {"ptb-postnorm", P::post, 0.1, 0.01},       {"ptb-prenorm", P::pre, 0.01, 0},
      {"wt103-postnorm", P::post, 0.1, 0.01},     {"wt103-prenorm", P::pre, 0.1, 0},
      {"resume-postnorm", P::post, 0.01, 0},      {"resume-prenorm", P::pre, 0.01, 0},
      {"conll-postnorm", P::post, 0.01, 0},       {"conll-prenorm", P::pre, 0.01, 0},
      {"imdb-postnorm", P::post, 0.1, 0},         {"imdb-prenorm", P::pre, 0, 0.01},
      {"sogou-postnorm", P::post, 0.1, 0.01},     {"sogou-prenorm", P::pre, 0.1, 0.01},
      {"dbpedia-postnorm", P::post, 0.1, 0.01},   {"dbpedia-prenorm", P::pre, 0.1, 0.01},
      {"yelp-postnorm", P::post, 0, 0.1},         {"yelp-prenorm", P::pre, 0.1, 0.01},
      {"paper-postnorm-nmt", P::post, 10, 0},
  };
  return table;
}

void apply_preset(ExperimentConfig& cfg, std::string_view name) {
  for (const auto& p : presets())
    if (p.name == name) {
      cfg.preset = p.name;
      cfg.model.norm_kind = NormKind::rbn;
      cfg.model.placement = p.placement;
      cfg.reg = {p.lambda, p.nu};
      return;
    }
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

ExperimentConfig load_config(const std::optional<fs::path>& file, const ConfigOverrides& ov) {
  ExperimentConfig cfg;
  if (file)
    for (const auto& [k, v] : parse_config_text(read_file(*file))) cfg.set(k, v);
  const std::string preset = ov.preset.value_or(cfg.preset);
  if (!preset.empty()) apply_preset(cfg, preset);
  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.out) cfg.out = *ov.out;
  if (ov.lambda) cfg.reg.lambda = *ov.lambda;
  if (ov.nu) cfg.reg.nu = *ov.nu;
  for (const auto& [k, v] : ov.sets) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

RunSummary run_experiment(const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = cfg_in;
  cfg.validate();
  RunSummary summary;
  run_into(cfg, summary);
  return summary;
}

SweepResult sweep(const ExperimentConfig& base_in, const std::vector<double>& lambdas, const std::vector<double>& nus,
                  const std::vector<std::uint64_t>& seeds, std::size_t threads) {
  if (lambdas.empty() || nus.empty() || seeds.empty()) throw ConfigError("sweep grids must be non-empty");
  ExperimentConfig base = base_in;
  if (base.model.norm_kind != NormKind::bn && base.model.norm_kind != NormKind::rbn)
    throw ConfigError("sweeps train rbn models; norm.kind must be bn or rbn");
  base.model.norm_kind = NormKind::rbn;
  auto ls = lambdas, ns = nus;
  auto ss = seeds;
  for (auto* v : {&ls, &ns}) {
    std::sort(v->begin(), v->end());
    v->erase(std::unique(v->begin(), v->end()), v->end());
  }
  std::sort(ss.begin(), ss.end());
  ss.erase(std::unique(ss.begin(), ss.end()), ss.end());

  SweepResult result;
  std::vector<ExperimentConfig> configs;
  for (double l : ls)
    for (double n : ns)
      for (std::uint64_t s : ss) {
        ExperimentConfig c = base;
        c.reg = {l, n};
        c.seed = s;
        c.out = base.out / run_dir_name(l, n, s);
        c.validate();
        configs.push_back(c);
        result.runs.push_back({l, n, s, {}});
      }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      RunSummary& out = result.runs[i].summary;
      try {
        run_into(configs[i], out);
      } catch (const NumericError&) {
      } catch (const std::exception& e) {
        out.failure = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::max<std::size_t>(1, std::min(threads, configs.size())); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  std::vector<SweepRow> rows;
  fs::create_directories(base.out);
  CsvWriter csv(base.out / "sweep.csv",
                "lambda,nu,seed,status,final_train_loss,final_valid_loss,final_valid_metric,last_layer_total_tid,reason");
  for (const auto& r : result.runs) {
    const auto& s = r.summary;
    const std::string status = s.diverged ? "diverged" : (s.failure.empty() ? "ok" : "failed");
    rows.push_back({r.lambda, r.nu, r.seed, status, s.failure, s.final_valid_loss});
    csv.row({format_number(r.lambda), format_number(r.nu), std::to_string(r.seed), status,
             format_number(s.final_train_loss), format_number(s.final_valid_loss), format_number(s.final_valid_metric),
             format_number(s.final_tid ? s.final_tid->last_layer_total_tid : std::nan("")), csv_quote(s.failure)});
  }
  std::optional<std::size_t> best;
  const auto groups = group_rows(rows, best);
  CsvWriter table(base.out / "sweep_summary.csv", "lambda,nu,seeds,mean_valid_loss,best,excluded_reason");
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& g = groups[i];
    table.row({format_number(g.lambda), format_number(g.nu), std::to_string(g.seeds), format_number(g.mean_valid_loss),
               best == i ? "1" : "0", csv_quote(g.excluded)});
  }
  if (best) result.best = std::make_pair(groups[*best].lambda, groups[*best].nu);
  return result;
}

Checkpoint reestimate(const ExperimentConfig& cfg_in, const Checkpoint& ck, std::size_t epochs) {
  ExperimentConfig cfg = cfg_in;
  cfg.validate();
  Transformer<float> model(cfg.model, cfg.seed);
  model.load_checkpoint(ck);
  if (model.batch_norm_layers().empty()) throw StateError("no batch-statistics layers");
  if (epochs == 0) return ck;
  const auto sched = cfg.brn_schedule();
  model.brn_limits = sched.at<float>(sched.warmup_steps + sched.ramp_steps + 1);
  const auto batches = batches_in_order(make_task(cfg.task, cfg.seed).train, cfg.batch_size, true);
  for (std::size_t e = 0; e < epochs; ++e)
    for (const auto& b : batches) {
      Graph<float> g;
      ParamBinder<float> p(g, true);
      NormContext<float> ctx{NormMode::train, model.brn_limits, nullptr};
      model.forward(p, b, ctx);
    }
  return model.to_checkpoint(StatsProvenance::reestimated);
}

std::string report(const fs::path& dir) {
  json j;
  if (fs::exists(dir / "sweep.csv")) {
    std::vector<SweepRow> rows;
    for (const auto& r : read_csv(dir / "sweep.csv"))
      rows.push_back({csv_number(r, "lambda"), csv_number(r, "nu"), static_cast<std::uint64_t>(csv_number(r, "seed")),
                      r.at("status"), r.at("reason"), csv_number(r, "final_valid_loss")});
    std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
      return std::tie(a.lambda, a.nu, a.seed) < std::tie(b.lambda, b.nu, b.seed);
    });
    std::optional<std::size_t> best;
    const auto groups = group_rows(rows, best);
    json pts = json::array();
    for (const auto& g : groups)
      pts.push_back({{"lambda", g.lambda},
                     {"nu", g.nu},
                     {"seeds", g.seeds},
                     {"mean_valid_loss", number_or_null(g.mean_valid_loss)},
                     {"excluded_reason", g.excluded}});
    j["kind"] = "sweep";
    j["runs"] = rows.size();
    j["points"] = pts;
    j["best"] = best ? json{{"lambda", groups[*best].lambda}, {"nu", groups[*best].nu}} : json(nullptr);
    return j.dump(2) + "\n";
  }

  const auto log = read_csv(dir / "train_log.csv");
  j["kind"] = "run";
  j["logged_rows"] = log.size();
  if (!log.empty()) {
    const auto& last = log.back();
    j["steps"] = static_cast<std::size_t>(csv_number(last, "step"));
    j["final_train_loss"] = number_or_null(csv_number(last, "ce_loss"));
    j["final_valid_loss"] = number_or_null(csv_number(last, "valid_loss"));
    j["final_valid_metric"] = number_or_null(csv_number(last, "valid_metric"));
    double best_loss = std::numeric_limits<double>::infinity(), best_metric = 0.0;
    for (const auto& r : log) {
      best_loss = std::min(best_loss, csv_number(r, "valid_loss"));
      best_metric = std::max(best_metric, csv_number(r, "valid_metric"));
    }
    j["best_valid_loss"] = number_or_null(best_loss);
    j["best_valid_metric"] = number_or_null(best_metric);
  }
  if (fs::exists(dir / "tid.csv")) {
    const auto tid = read_csv(dir / "tid.csv");
    if (!tid.empty()) {
      const double epoch = csv_number(tid.back(), "epoch");
      json layers = json::array();
      double last_total = 0.0;
      for (const auto& r : tid) {
        if (csv_number(r, "epoch") != epoch) continue;
        const double m = csv_number(r, "mean_tid"), v = csv_number(r, "var_tid");
        if (csv_number(r, "avg") == 1.0) {
          j["final_tid"]["avg_mean_tid"] = number_or_null(m);
          j["final_tid"]["avg_var_tid"] = number_or_null(v);
          continue;
        }
        layers.push_back({{"layer_index", static_cast<std::size_t>(csv_number(r, "layer_index"))},
                          {"mean_tid", number_or_null(m)},
                          {"var_tid", number_or_null(v)}});
        last_total = m + v;
      }
      j["final_tid"]["epoch"] = static_cast<int>(epoch);
      j["final_tid"]["per_layer"] = layers;
      j["final_tid"]["last_layer_total_tid"] = number_or_null(last_total);
    }
  }
  if (fs::exists(dir / "conditioning.csv")) {
    std::map<std::size_t, json> latest;
    for (const auto& r : read_csv(dir / "conditioning.csv"))
      latest[static_cast<std::size_t>(csv_number(r, "layer_index"))] = {
          {"step", static_cast<std::size_t>(csv_number(r, "step"))},
          {"c_50", number_or_null(csv_number(r, "c_50"))},
          {"c_80", number_or_null(csv_number(r, "c_80"))},
          {"c_max", number_or_null(csv_number(r, "c_max"))}};
    json arr = json::array();
    for (auto& [layer, v] : latest) {
      v["layer_index"] = layer;
      arr.push_back(v);
    }
    j["final_conditioning"] = arr;
  }
  return j.dump(2) + "\n";
}

std::size_t default_threads() {
  if (const char* env = std::getenv("NORMBENCH_THREADS"); env && *env) {
    const std::size_t n = to_size("NORMBENCH_THREADS", env);
    if (n == 0) throw ConfigError("NORMBENCH_THREADS must be positive");
    return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace normbench
