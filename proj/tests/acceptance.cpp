// Acceptance runner: one PASS/FAIL line per criterion. Exit status is the
// number of failing criteria outside kDocumentedFailures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "model_support.hpp"
#include "normbench/conditioning.hpp"
#include "normbench/errors.hpp"
#include "normbench/experiment.hpp"
#include "normbench/norm_layers.hpp"
#include "normbench/tid.hpp"
#include "test_support.hpp"

using namespace normbench;
using namespace normbench::testing;
namespace fs = std::filesystem;

namespace {

// Criteria known to fail at toy scale. They still print FAIL.
constexpr std::size_t kDocumentedFailures[] = {8};

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("normbench_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome decomposition_identity() {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-5, 5), s(0.1, 5);
  std::uniform_int_distribution<std::size_t> dim(1, 16);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = dim(rng), d = dim(rng);
    std::vector<double> x(rows * d), mb(d), sb(d), m(d), sd(d);
    for (auto& v : x) v = u(rng);
    for (std::size_t j = 0; j < d; ++j) mb[j] = u(rng), m[j] = u(rng), sb[j] = s(rng), sd[j] = s(rng);
    worst = std::max(worst, decomposition_check(x, mb, sb, m, sd));
  }
  double stress = 0.0;
  std::uniform_real_distribution<double> unit(-1, 1);
  for (double small : {1e-3, 1e-4}) {
    for (double big : {1e2, 1e3}) {
      for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> x(32), mb(4), sb(4), m(4), sd(4);
        for (auto& v : x) v = unit(rng);
        for (std::size_t j = 0; j < 4; ++j) {
          mb[j] = unit(rng), m[j] = unit(rng);
          const bool flip = trial % 2 == 1;
          sb[j] = flip ? small : big;
          sd[j] = flip ? big : small;
        }
        stress = std::max(stress, decomposition_check(x, mb, sb, m, sd));
      }
    }
  }
  return {worst < 1e-12 && stress < 1e-9, fmt("random residual %.3g, stress residual %.3g", worst, stress)};
}

Outcome gradient_suite() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    for (auto placement : {NormPlacement::pre, NormPlacement::post})
      worst = std::max(worst, transformer_gradient_error(NormKind::rbn, placement, seed, {0.5, 0.5}, 24));
  return {worst < 1e-4, fmt("max relative error %.3g over 5 seeds x 26 coordinates x pre/post", worst)};
}

Outcome stop_gradient_check() {
  std::mt19937_64 rng(3);
  bool ok = true;
  double value_change = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor({12, 3}, rng);
    const std::vector<std::uint8_t> mask(12, 1);
    double penalty[2];
    for (int perturb = 0; perturb < 2; ++perturb) {
      Graph<double> g;
      auto xv = g.leaf(x);
      NormState<double> st(3, 0.1, 1e-5);
      auto history = g.leaf(Tensor<double>::vector({0.2, -0.1, 0.4}));
      auto o = bn_forward_train(xv, std::span<const std::uint8_t>(mask), st, false);
      // stored statistics that depend on a graph leaf, shifted in the second pass
      auto shifted = add_scalar(history, perturb ? 0.7 : 0.0);
      o.trace.running_mean = shifted;
      o.trace.running_var = add_scalar(square(shifted), 1.0);
      std::vector<BatchStatTrace<double>> traces{o.trace};
      auto p = rbn_penalty(g, std::span<const BatchStatTrace<double>>(traces), {1.0, 1.0});
      g.backward(p);
      penalty[perturb] = p.value().item();
      const auto gh = g.grad(history);
      for (double v : gh.data()) ok = ok && v == 0.0;
      const auto gx = g.grad(xv);
      ok = ok && std::any_of(gx.data().begin(), gx.data().end(), [](double v) { return v != 0.0; });
    }
    value_change = std::max(value_change, std::abs(penalty[1] - penalty[0]));
    ok = ok && penalty[1] != penalty[0];
  }
  return {ok, fmt("gradient on stored statistics exactly 0; penalty moved by up to %.3g", value_change)};
}

Outcome tid_zero_and_scale() {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> z;
  Tensor<double> full(Shape{256, 4});
  for (std::size_t i = 0; i < full.numel(); ++i) full[i] = 3.0 * z(rng) + static_cast<double>(i % 4);
  LinearProbeModel probe({4, 8, 8, 4}, 5);
  const std::vector<Tensor<double>> one{full};
  const auto zero = compute_tid(probe, one, estimate_population(probe, one));
  double worst_zero = 0.0;
  for (const auto& l : zero.per_layer) worst_zero = std::max({worst_zero, l.mean_tid, l.var_tid});

  Transformer<double> model(tiny_model(NormKind::bn, 3), 6);
  const std::vector<SequenceBatch> batch{random_batch(8, 7, 10, rng)};
  const auto model_zero = compute_tid(model, batch, estimate_population(model, batch));
  for (const auto& l : model_zero.per_layer) worst_zero = std::max({worst_zero, l.mean_tid, l.var_tid});

  auto scale_drift = [&](double data_sd) {
    std::vector<Tensor<double>> batches, scaled;
    for (int b = 0; b < 8; ++b) {
      Tensor<double> t(Shape{16, 4});
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = data_sd * z(rng) + static_cast<double>(i % 4);
      batches.push_back(t);
      for (auto& v : t.storage()) v *= 10.0;
      scaled.push_back(t);
    }
    const auto a = compute_tid(probe, batches, estimate_population(probe, batches));
    const auto b = compute_tid(probe, scaled, estimate_population(probe, scaled));
    double drift = 0.0;
    for (std::size_t i = 0; i < a.per_layer.size(); ++i)
      drift = std::max({drift, std::abs(a.per_layer[i].mean_tid - b.per_layer[i].mean_tid),
                        std::abs(a.per_layer[i].var_tid - b.per_layer[i].var_tid)});
    return drift;
  };
  const double drift = scale_drift(40.0), unit_drift = scale_drift(1.0);
  return {worst_zero < 1e-6 && drift < 1e-9, fmt("zero-law max TID %.3g, x10 drift %.3g", worst_zero, drift) +
                                                      fmt(" (data sd 40; %.3g at data sd 1)", unit_drift)};
}

Outcome tid_oracle() {
  const PopulationSnapshot snap{{LayerStats{{0, 0}, {1, 1}}}, StatsProvenance::exact_average};
  const std::vector<std::vector<LayerStats>> batches{{LayerStats{{0.3, -0.4}, {1, 1}}}};
  const double got = tid_from_statistics(batches, snap).per_layer[0].mean_tid;
  const double oracle = std::sqrt(0.3 * 0.3 + 0.4 * 0.4) / std::sqrt(1.0 + 1.0);
  const bool pass = std::abs(got - oracle) <= 1e-6 && std::round(got * 1e5) / 1e5 == 0.35355;
  return {pass, fmt("mean TID %.8f, direct formula %.8f", got, oracle)};
}

Outcome ema_estimation() {
  const double alpha = 0.1, truth = 2.0, sd = 1.0;
  const int batch = 64;
  const double se = std::sqrt(alpha / (2.0 - alpha)) * sd / std::sqrt(static_cast<double>(batch));
  int inside = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::normal_distribution<double> z(truth, sd);
    NormState<double> st(1, alpha, 1e-5);
    for (int step = 0; step < 500; ++step) {
      double s = 0.0, s2 = 0.0;
      for (int i = 0; i < batch; ++i) {
        const double v = z(rng);
        s += v;
        s2 += v * v;
      }
      const double m = s / batch;
      const std::vector<double> mean{m}, var{s2 / batch - m * m};
      ema_update(st, std::span<const double>(mean), std::span<const double>(var));
    }
    inside += std::abs(st.running_mean[0] - truth) < 3.0 * se;
  }
  return {inside >= 38, fmt("%.0f of 40 seeds within 3 standard errors", inside)};
}

Outcome conditioning_oracle() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> z;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    DenseMatrix m(128, 32);
    for (auto& v : m.data) v = z(rng);
    const auto got = singular_values(m);
    const auto want = power_iteration_singular_values(m.data, 128, 32, 100 + trial);
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, rel_err(got[i], want[i]));
  }
  const std::vector<double> spectrum{4, 2, 1};
  DenseMatrix axis(5, 3);
  axis(0, 0) = 4;
  axis(1, 1) = 2;
  axis(2, 2) = 1;
  const bool exact = c_p(std::span<const double>(spectrum), 0.5) == 2.0 &&
                     c_p(std::span<const double>(spectrum), 0.8) == 4.0 && c_p(axis, 0.5) == 2.0 &&
                     c_p(axis, 0.8) == 4.0;
  return {worst < 1e-6 && exact, fmt("max relative error %.3g; C50 = 2 and C80 = 4 ", worst) +
                                     (exact ? "exact" : "NOT exact")};
}

Outcome directional_rbn() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = scratch("directional");
  int tid_wins = 0, loss_wins = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RunSummary res[2];
    for (int rbn = 0; rbn < 2; ++rbn) {
      ExperimentConfig c;
      c.model.num_layers = 4;
      c.model.placement = NormPlacement::pre;
      c.model.norm_kind = rbn ? NormKind::rbn : NormKind::bn;
      c.reg = rbn ? RegularizerConfig{0.1, 0.1} : RegularizerConfig{};
      c.task.kind = TaskKind::copy;
      c.steps = 3000;
      c.seed = seed;
      c.measure.conditioning_every = 0;
      c.measure.log_every = 500;
      c.out = dir / ((rbn ? "rbn_" : "bn_") + std::to_string(seed));
      res[rbn] = run_experiment(c);
    }
    const double tid_bn = res[0].final_tid->last_layer_total_tid, tid_rbn = res[1].final_tid->last_layer_total_tid;
    tid_wins += tid_rbn <= tid_bn;
    loss_wins += res[1].final_valid_loss <= res[0].final_valid_loss;
    detail += " | seed " + std::to_string(seed) + fmt(": TID bn %.4g rbn %.4g", tid_bn, tid_rbn) +
              fmt(", valid loss bn %.4g rbn %.4g", res[0].final_valid_loss, res[1].final_valid_loss);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool pass = tid_wins >= 2 && loss_wins >= 2 && secs <= 300.0;
  return {pass, fmt("TID wins %.0f/3, ", tid_wins) + fmt("valid-loss wins %.0f/3, ", loss_wins) +
                    fmt("%.1f s", secs) + detail};
}

Outcome rbn_zero_equivalence() {
  const auto dir = scratch("equivalence");
  std::string files[2][2];
  for (int rbn = 0; rbn < 2; ++rbn) {
    ExperimentConfig c;
    c.model.norm_kind = rbn ? NormKind::rbn : NormKind::bn;
    c.steps = 500;
    c.seed = 11;
    c.measure.log_every = 1;
    c.measure.conditioning_every = 0;
    c.measure.tid = false;
    c.out = dir / (rbn ? "rbn" : "bn");
    run_experiment(c);
    files[rbn][0] = slurp(c.out / "train_log.csv");
    files[rbn][1] = slurp(c.out / "checkpoint.nbck");
  }
  const bool same = files[0][0] == files[1][0] && files[0][1] == files[1][1];
  return {same, same ? "500 per-step losses and final parameters/statistics bit-identical"
                     : "training trajectories differ"};
}

Outcome reestimation() {
  const auto dir = scratch("reestimate");
  ExperimentConfig c;
  c.steps = 1000;
  c.seed = 12;
  c.measure.conditioning_every = 0;
  c.measure.tid = false;
  c.measure.log_every = 500;
  c.out = dir / "run";
  c.validate();
  run_experiment(c);
  const auto ck = Checkpoint::load(c.out / "checkpoint.nbck");
  const auto re = reestimate(c, ck, 2);
  bool params_same = true;
  for (const auto& a : ck.arrays()) {
    const bool is_stat = a.name.ends_with(".running_mean") || a.name.ends_with(".running_var") ||
                         a.name.ends_with(".update_count") || a.name == "meta.stats_provenance";
    if (!is_stat) params_same = params_same && a.data == re.at(a.name).data;
  }

  Transformer<float> model(c.model, c.seed);
  model.load_checkpoint(re);
  const auto data = make_task(c.task, c.seed);
  const auto batches = batches_in_order(data.train, c.batch_size, true);
  const auto per_batch = collect_statistics(model, batches);
  const auto exact = average_statistics(per_batch);
  const auto ema = model.running_snapshot();
  const double k = std::sqrt(c.model.momentum / (2.0 - c.model.momentum));
  std::size_t features = 0, inside = 0;
  double worst_z = 0.0;
  for (std::size_t l = 0; l < exact.layers.size(); ++l)
    for (std::size_t j = 0; j < exact.layers[l].mean.size(); ++j) {
      double m = 0.0, v = 0.0;
      for (const auto& b : per_batch) m += b[l].mean[j];
      m /= static_cast<double>(per_batch.size());
      for (const auto& b : per_batch) v += std::pow(b[l].mean[j] - m, 2);
      const double se = k * std::sqrt(v / static_cast<double>(per_batch.size() - 1));
      const double zscore = std::abs(ema.layers[l].mean[j] - exact.layers[l].mean[j]) / se;
      worst_z = std::max(worst_z, zscore);
      ++features;
      inside += zscore <= 3.0;
    }

  Transformer<float> full(c.model, c.seed);
  full.load_checkpoint(ck);
  const auto whole = batches_in_order(data.valid, data.valid.size());
  full.load_snapshot(estimate_population(full, whole));
  const double pop = evaluate(full, data.valid, EvalMode::population, 16).loss;
  const double bs = evaluate(full, data.valid, EvalMode::batch_stats, data.valid.size()).loss;
  const bool pass = params_same && inside == features && std::abs(pop - bs) <= 1e-4;
  return {pass, std::string(params_same ? "parameters bitwise unchanged" : "PARAMETERS CHANGED") +
                    fmt(", %.0f/", inside) + fmt("%.0f features within 3 SE", features) +
                    fmt(" (max z %.3g)", worst_z) + fmt(", full-batch eval gap %.3g", std::abs(pop - bs))};
}

Outcome tooling() {
  const auto dir = scratch("tooling");
  {
    std::ofstream(dir / "run.cfg") << "task.train_size = 256\ntask.valid_size = 64\noptim.steps = 60\n"
                                      "measure.log_every = 20\nmeasure.conditioning_every = 20\n";
    std::ofstream(dir / "bad.cfg") << "optim.steps = 60\nlambada = 0.1\n";
  }
  auto cli = [](std::vector<std::string> args) {
    args.insert(args.begin(), "normbench");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli_main(static_cast<int>(argv.size()), argv.data());
  };
  const std::string cfg = (dir / "run.cfg").string();
  bool ok = true;
  for (const char* out : {"a", "b"}) ok = ok && cli({"run", "--config", cfg, "--out", (dir / out).string()}) == 0;
  for (const char* f : {"train_log.csv", "tid.csv", "conditioning.csv"})
    ok = ok && slurp(dir / "a" / f) == slurp(dir / "b" / f) && !slurp(dir / "a" / f).empty();
  const bool run_det = ok;

  for (const char* out : {"sa", "sb"})
    ok = ok && cli({"sweep", "--config", cfg, "--lambdas", "0,0.1", "--nus", "0", "--seeds", "0", "--threads", "2",
                    "--out", (dir / out).string()}) == 0;
  ok = ok && slurp(dir / "sa" / "sweep.csv") == slurp(dir / "sb" / "sweep.csv");
  for (const char* point : {"lambda_0_nu_0_seed_0", "lambda_0.1_nu_0_seed_0"})
    ok = ok && slurp(dir / "sa" / point / "train_log.csv") == slurp(dir / "sb" / point / "train_log.csv");
  const bool sweep_det = ok && run_det;

  bool strict = cli({"run", "--config", (dir / "bad.cfg").string(), "--out", (dir / "bad").string()}) == 2;
  try {
    parse_config_text("lambada = 0.1\n");
    strict = false;
  } catch (const ConfigError& e) {
    strict = strict && std::string(e.what()).find("lambada") != std::string::npos;
  }

  const std::string bytes = slurp(dir / "a" / "checkpoint.nbck");
  const auto ck = Checkpoint::load(dir / "a" / "checkpoint.nbck");
  ck.save(dir / "resaved.nbck");
  Transformer<float> model(load_config(dir / "run.cfg").model, 99);
  model.load_checkpoint(ck);
  model.to_checkpoint(StatsProvenance::ema).save(dir / "from_model.nbck");
  const bool round = slurp(dir / "resaved.nbck") == bytes && slurp(dir / "from_model.nbck") == bytes;

  return {run_det && sweep_det && strict && round,
          std::string("run determinism ") + (run_det ? "ok" : "FAILED") + ", sweep determinism " +
              (sweep_det ? "ok" : "FAILED") + ", strict config " + (strict ? "ok" : "FAILED") +
              ", checkpoint round trip " + (round ? "ok" : "FAILED")};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"decomposition identity", decomposition_identity},
      {"gradient suite", gradient_suite},
      {"stop-gradient", stop_gradient_check},
      {"TID zero law and scale invariance", tid_zero_and_scale},
      {"TID arithmetic oracle", tid_oracle},
      {"EMA estimation", ema_estimation},
      {"conditioning oracle", conditioning_oracle},
      {"directional RBN", directional_rbn},
      {"RBN(0,0) equals BN", rbn_zero_equivalence},
      {"re-estimation and batch-stats evaluation", reestimation},
      {"tooling", tooling},
  };
  int failures = 0;
  std::string documented;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const bool known = std::ranges::find(kDocumentedFailures, i + 1) != std::end(kDocumentedFailures);
    if (!o.pass && known) documented += " " + std::to_string(i + 1);
    failures += !o.pass && !known;
    std::printf("criterion %2zu %-42s %s  %s\n", i + 1, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  if (!documented.empty()) std::printf("documented failures:%s\n", documented.c_str());
  std::printf("%d undocumented failure(s)\n", failures);
  return failures;
}
