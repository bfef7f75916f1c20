#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstdint>
#include <string>
#include <vector>

#include "normbench/checkpoint.hpp"
#include "normbench/conditioning.hpp"
#include "normbench/errors.hpp"
#include "normbench/experiment.hpp"
#include "normbench/norm_layers.hpp"
#include "normbench/tid.hpp"

namespace py = pybind11;
using namespace normbench;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vector(const Array& a) { return std::vector<double>(a.data(), a.data() + a.size()); }

Array to_array(const std::vector<double>& v, std::vector<py::ssize_t> shape) {
  Array out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

DenseMatrix to_matrix(const Array& x) {
  if (x.ndim() != 2) throw ShapeError("expected a 2-D array");
  DenseMatrix m(static_cast<std::size_t>(x.shape(0)), static_cast<std::size_t>(x.shape(1)));
  m.data = to_vector(x);
  return m;
}

Tensor<double> to_tensor(const Array& x) {
  Shape shape;
  for (py::ssize_t i = 0; i < x.ndim(); ++i) shape.push_back(static_cast<std::size_t>(x.shape(i)));
  return Tensor<double>(shape, to_vector(x));
}

std::vector<std::uint8_t> mask_or_all(const std::optional<py::array_t<std::uint8_t>>& mask, std::size_t rows) {
  if (!mask) return std::vector<std::uint8_t>(rows, 1);
  const auto& m = *mask;
  if (static_cast<std::size_t>(m.size()) != rows) throw ShapeError("mask needs one entry per row");
  return std::vector<std::uint8_t>(m.data(), m.data() + m.size());
}

std::vector<std::vector<LayerStats>> to_stats(const std::vector<std::vector<std::pair<Array, Array>>>& batches) {
  std::vector<std::vector<LayerStats>> out;
  for (const auto& b : batches) {
    auto& layers = out.emplace_back();
    for (const auto& [m, v] : b) layers.push_back({to_vector(m), to_vector(v)});
  }
  return out;
}

py::dict tid_dict(const TIDReport& r) {
  py::list layers;
  for (const auto& l : r.per_layer) {
    py::dict d;
    d["layer_index"] = l.layer_index;
    d["mean_tid"] = l.mean_tid;
    d["var_tid"] = l.var_tid;
    d["total_tid"] = l.total();
    layers.append(d);
  }
  py::dict out;
  out["epoch"] = r.epoch;
  out["per_layer"] = layers;
  out["avg_mean_tid"] = r.avg_mean_tid;
  out["avg_var_tid"] = r.avg_var_tid;
  out["last_layer_total_tid"] = r.last_layer_total_tid;
  return out;
}

}  // namespace

PYBIND11_MODULE(_normbench, m) {
  m.doc() = "Normalization benchmark core: BN/LN layers, TID and conditioning diagnostics, training runs.";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);

  m.def(
      "decomposition_check",
      [](const Array& x, const Array& mu_b, const Array& sigma_b, const Array& mu, const Array& sigma) {
        return decomposition_check(to_vector(x), to_vector(mu_b), to_vector(sigma_b), to_vector(mu), to_vector(sigma));
      },
      py::arg("x"), py::arg("mu_b"), py::arg("sigma_b"), py::arg("mu"), py::arg("sigma"),
      "Largest residual of the batch/population normalization identity over a [rows, d] sample.");

  m.def(
      "singular_values", [](const Array& x) { return singular_values(to_matrix(x)); }, py::arg("x"),
      "Singular values of a [N, d] matrix (N > d), descending.");
  m.def(
      "c_p", [](const Array& x, double p) { return c_p(to_matrix(x), p); }, py::arg("x"), py::arg("p"),
      "sigma_1 / sigma_ceil(p d); inf when that singular value is 0.");
  m.def(
      "c_max", [](const Array& x) { return c_max(to_matrix(x)); }, py::arg("x"));

  m.def(
      "ema_update",
      [](const Array& mean, const Array& var, const Array& batch_mean, const Array& batch_var, double alpha) {
        NormState<double> st(static_cast<std::size_t>(mean.size()), alpha, 1e-5);
        st.running_mean = to_vector(mean);
        st.running_var = to_vector(var);
        const auto bm = to_vector(batch_mean), bv = to_vector(batch_var);
        ema_update(st, std::span<const double>(bm), std::span<const double>(bv));
        return py::make_tuple(to_array(st.running_mean, {mean.size()}), to_array(st.running_var, {var.size()}));
      },
      py::arg("mean"), py::arg("var"), py::arg("batch_mean"), py::arg("batch_var"), py::arg("alpha") = 0.1,
      "One running-statistics update; returns (mean, var).");

  m.def(
      "bn_forward",
      [](const Array& x, std::optional<Array> mean, std::optional<Array> var, double eps,
         std::optional<py::array_t<std::uint8_t>> mask) {
        if (x.ndim() != 2) throw ShapeError("expected a [rows, d] array");
        const auto rows = static_cast<std::size_t>(x.shape(0)), d = static_cast<std::size_t>(x.shape(1));
        const auto mk = mask_or_all(mask, rows);
        Graph<double> g;
        NormState<double> st(d, 0.1, eps);
        if (mean.has_value() != var.has_value()) throw StateError("pass both mean and var, or neither");
        Tensor<double> y;
        if (mean) {
          st.running_mean = to_vector(*mean);
          st.running_var = to_vector(*var);
          st.loaded = true;
          y = bn_forward_inf(g.constant(to_tensor(x)), std::span<const std::uint8_t>(mk), st).value();
        } else {
          y = bn_forward_train(g.constant(to_tensor(x)), std::span<const std::uint8_t>(mk), st, false).out.value();
        }
        return to_array(std::vector<double>(y.data().begin(), y.data().end()), {x.shape(0), x.shape(1)});
      },
      py::arg("x"), py::arg("mean") = py::none(), py::arg("var") = py::none(), py::arg("eps") = 1e-5,
      py::arg("mask") = py::none(),
      "Batch normalization without affine: batch statistics, or the given population statistics.");

  m.def(
      "ln_forward",
      [](const Array& x, double eps, std::optional<py::array_t<std::uint8_t>> mask) {
        if (x.ndim() != 2) throw ShapeError("expected a [rows, d] array");
        const auto mk = mask_or_all(mask, static_cast<std::size_t>(x.shape(0)));
        Graph<double> g;
        const auto y = ln_forward(g.constant(to_tensor(x)), std::span<const std::uint8_t>(mk), eps).value();
        return to_array(std::vector<double>(y.data().begin(), y.data().end()), {x.shape(0), x.shape(1)});
      },
      py::arg("x"), py::arg("eps") = 1e-5, py::arg("mask") = py::none());

  m.def(
      "average_statistics",
      [](const std::vector<std::vector<std::pair<Array, Array>>>& batches) {
        const auto snap = average_statistics(to_stats(batches));
        py::list out;
        for (const auto& l : snap.layers)
          out.append(py::make_tuple(to_array(l.mean, {static_cast<py::ssize_t>(l.mean.size())}),
                                    to_array(l.var, {static_cast<py::ssize_t>(l.var.size())})));
        return out;
      },
      py::arg("batches"), "Exact average of per-batch (mean, var) pairs, per layer.");

  m.def(
      "tid",
      [](const std::vector<std::vector<std::pair<Array, Array>>>& batches,
         const std::vector<std::pair<Array, Array>>& population, int epoch) {
        PopulationSnapshot snap;
        for (const auto& [mu, var] : population) snap.layers.push_back({to_vector(mu), to_vector(var)});
        return tid_dict(tid_from_statistics(to_stats(batches), snap, epoch));
      },
      py::arg("batches"), py::arg("population"), py::arg("epoch") = 0,
      "TID report from per-batch statistics [batch][layer] = (mean, var) and population (mean, var) per layer.");

  m.def(
      "run",
      [](std::optional<std::filesystem::path> config, std::optional<std::string> out, std::optional<std::uint64_t> seed,
         std::optional<std::string> preset, std::vector<std::pair<std::string, std::string>> sets) {
        ConfigOverrides ov;
        ov.out = out;
        ov.seed = seed;
        ov.preset = preset;
        ov.sets = std::move(sets);
        const auto cfg = load_config(config, ov);
        RunSummary s;
        {
          py::gil_scoped_release release;
          s = run_experiment(cfg);
        }
        py::dict d;
        d["final_train_loss"] = s.final_train_loss;
        d["final_valid_loss"] = s.final_valid_loss;
        d["final_valid_metric"] = s.final_valid_metric;
        d["best_valid_loss"] = s.best_valid_loss;
        d["best_valid_metric"] = s.best_valid_metric;
        d["final_tid"] = s.final_tid ? py::object(tid_dict(*s.final_tid)) : py::object(py::none());
        d["wall_clock_seconds"] = s.wall_clock_seconds;
        d["config_hash"] = s.config_hash;
        d["seed"] = s.seed;
        d["steps_completed"] = s.steps_completed;
        d["out"] = cfg.out.string();
        return d;
      },
      py::arg("config") = py::none(), py::arg("out") = py::none(), py::arg("seed") = py::none(),
      py::arg("preset") = py::none(), py::arg("sets") = std::vector<std::pair<std::string, std::string>>{},
      "Train one model; returns the run summary.");

  m.def(
      "cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "normbench");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        py::gil_scoped_release release;
        return cli_main(static_cast<int>(argv.size()), argv.data());
      },
      py::arg("args"), "Run the command-line tool in-process; returns its exit code.");

  m.def(
      "load_checkpoint",
      [](const std::filesystem::path& path) {
        const auto ck = Checkpoint::load(path);
        py::dict out;
        for (const auto& a : ck.arrays()) {
          std::vector<py::ssize_t> shape(a.shape.begin(), a.shape.end());
          py::array_t<float> arr(shape);
          std::copy(a.data.begin(), a.data.end(), arr.mutable_data());
          out[py::str(a.name)] = arr;
        }
        return out;
      },
      py::arg("path"), "Named float32 arrays of a checkpoint file.");

  m.attr("config_keys") = [] {
    py::list keys;
    for (const auto& k : config_keys()) keys.append(py::make_tuple(k.key, k.default_value, k.doc));
    return keys;
  }();
}
