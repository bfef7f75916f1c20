#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "normbench/errors.hpp"
#include "normbench/experiment.hpp"

namespace normbench {

namespace {

namespace fs = std::filesystem;

struct CommonFlags {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<double> lambda;
  std::optional<double> nu;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd, bool with_out = true) {
    cmd->add_option("--config", config, "key = value config file");
    cmd->add_option("--preset", preset, "named (lambda, nu, placement) preset");
    cmd->add_option("--seed", seed, "run seed");
    if (with_out) cmd->add_option("--out", out, "output directory");
    cmd->add_option("--lambda", lambda, "mean penalty weight");
    cmd->add_option("--nu", nu, "standard-deviation penalty weight");
    cmd->add_option("--set", sets, "extra key=value override, repeatable");
  }

  ExperimentConfig load(const std::optional<fs::path>& fallback = std::nullopt) const {
    ConfigOverrides ov;
    if (!preset.empty()) ov.preset = preset;
    ov.seed = seed;
    if (!out.empty()) ov.out = out;
    ov.lambda = lambda;
    ov.nu = nu;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      ov.sets.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    std::optional<fs::path> file;
    if (!config.empty())
      file = config;
    else
      file = fallback;
    return load_config(file, ov);
  }
};

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"normalization benchmark: train, sweep, re-estimate and report"};
  app.require_subcommand(1);

  CommonFlags run_flags;
  auto* run_cmd = app.add_subcommand("run", "train one model and write its metric streams");
  run_flags.attach(run_cmd);

  CommonFlags sweep_flags;
  std::vector<double> lambdas{0.0, 0.01, 0.1, 1.0}, nus{0.0, 0.01, 0.1, 1.0};
  std::vector<std::uint64_t> seeds;
  std::size_t threads = 0;
  auto* sweep_cmd = app.add_subcommand("sweep", "train an rbn model for every (lambda, nu, seed)");
  sweep_flags.attach(sweep_cmd);
  sweep_cmd->add_option("--lambdas", lambdas, "lambda grid")->delimiter(',');
  sweep_cmd->add_option("--nus", nus, "nu grid")->delimiter(',');
  sweep_cmd->add_option("--seeds", seeds, "seeds (default: run.seed)")->delimiter(',');
  sweep_cmd->add_option("--threads", threads, "parallel runs (default: NORMBENCH_THREADS or cores)");

  CommonFlags re_flags;
  std::string re_run, re_ckpt, re_out;
  std::size_t re_epochs = 2;
  auto* re_cmd = app.add_subcommand("reestimate", "refresh running statistics with parameters frozen");
  re_flags.attach(re_cmd, false);
  re_cmd->add_option("--run", re_run, "run directory holding config.txt and checkpoint.nbck");
  re_cmd->add_option("--checkpoint", re_ckpt, "input checkpoint");
  re_cmd->add_option("--epochs", re_epochs, "passes over the training set")->capture_default_str();
  re_cmd->add_option("--out", re_out, "output checkpoint (default: <run>/checkpoint_reestimated.nbck)");

  std::string report_dir;
  auto* report_cmd = app.add_subcommand("report", "re-derive a summary from a run or sweep directory's CSVs");
  report_cmd->add_option("dir", report_dir, "run or sweep directory")->required();

  CommonFlags cfg_flags;
  auto* cfg_cmd = app.add_subcommand("config", "print the resolved config, or every key with its default");
  cfg_flags.attach(cfg_cmd);
  bool list_keys = false;
  cfg_cmd->add_flag("--keys", list_keys, "list keys, defaults and descriptions");

  auto* presets_cmd = app.add_subcommand("presets", "list the bundled (lambda, nu) presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*run_cmd) {
    const auto cfg = run_flags.load();
    const auto s = run_experiment(cfg);
    std::cout << "run finished: " << s.steps_completed << " steps, valid loss " << format_number(s.final_valid_loss)
              << ", valid accuracy " << format_number(s.final_valid_metric) << ", output in " << cfg.out.string()
              << "\n";
    return 0;
  }
  if (*sweep_cmd) {
    const auto cfg = sweep_flags.load();
    if (seeds.empty()) seeds.push_back(cfg.seed);
    const auto res = sweep(cfg, lambdas, nus, seeds, threads ? threads : default_threads());
    for (const auto& r : res.runs)
      std::cout << "lambda=" << format_number(r.lambda) << " nu=" << format_number(r.nu) << " seed=" << r.seed << " "
                << (r.summary.diverged ? "diverged" : r.summary.failure.empty() ? "ok" : "failed")
                << " valid_loss=" << format_number(r.summary.final_valid_loss) << "\n";
    if (res.best)
      std::cout << "best: lambda=" << format_number(res.best->first) << " nu=" << format_number(res.best->second)
                << "\n";
    else
      std::cout << "best: none (every grid point excluded)\n";
    return 0;
  }
  if (*re_cmd) {
    std::optional<fs::path> cfg_file;
    fs::path in = re_ckpt, out = re_out;
    if (!re_run.empty()) {
      cfg_file = fs::path(re_run) / "config.txt";
      if (in.empty()) in = fs::path(re_run) / "checkpoint.nbck";
      if (out.empty()) out = fs::path(re_run) / "checkpoint_reestimated.nbck";
    }
    if (in.empty() || out.empty()) throw ConfigError("reestimate needs --run or both --checkpoint and --out");
    if (!cfg_file && re_flags.config.empty()) throw ConfigError("reestimate needs --run or --config");
    const auto cfg = re_flags.load(cfg_file);
    reestimate(cfg, Checkpoint::load(in), re_epochs).save(out);
    std::cout << "wrote " << out.string() << "\n";
    return 0;
  }
  if (*report_cmd) {
    const std::string text = report(report_dir);
    std::ofstream(fs::path(report_dir) / "report.json", std::ios::binary) << text;
    std::cout << text;
    return 0;
  }
  if (*cfg_cmd) {
    if (list_keys) {
      for (const auto& k : config_keys()) std::cout << k.key << " = " << k.default_value << "  # " << k.doc << "\n";
      return 0;
    }
    std::cout << cfg_flags.load().to_text();
    return 0;
  }
  if (*presets_cmd) {
    for (const auto& p : presets())
      std::cout << p.name << ": placement=" << to_string(p.placement) << " lambda=" << format_number(p.lambda)
                << " nu=" << format_number(p.nu) << "\n";
    std::cout << "note: " << kPresetNote << "\n";
    return 0;
  }
  return 1;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace normbench
