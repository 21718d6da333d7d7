/* Copyright 2026 The divens Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "divens/data.hpp"
#include "divens/ensemble.hpp"
#include "divens/errors.hpp"
#include "divens/experiment.hpp"
#include "divens/gradcheck.hpp"
#include "divens/metrics.hpp"
#include "divens/regularizers.hpp"
#include "divens/training.hpp"

namespace py = pybind11;
using namespace divens;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  const auto r = static_cast<std::size_t>(a.shape(0));
  const auto c = static_cast<std::size_t>(a.shape(1));
  return Matrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

Array to_array(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

std::vector<Matrix> to_matrices(const std::vector<Array>& arrays) {
  std::vector<Matrix> out;
  for (const auto& a : arrays) out.push_back(to_matrix(a));
  return out;
}

// Evaluates a differentiable score on constant member matrices.
template <typename F>
double score_of(const std::vector<Array>& members, F&& f) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const auto& m : members) vars.push_back(tape.constant(to_matrix(m)));
  return f(std::span<const ad::Var>(vars)).value().item();
}

py::dict dataset_dict(const Dataset& ds) {
  py::dict d;
  d["inputs"] = to_array(ds.inputs);
  d["labels"] = ds.labels;
  d["classes"] = ds.classes;
  return d;
}

}  // namespace

PYBIND11_MODULE(_divens, m) {
  m.doc() = "Diversity-regularized ensembles: models, regularizers, metrics and runner";

  // Translators are tried newest first, so the base class goes first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  py::class_<EnsembleModel>(m, "Ensemble")
      .def(py::init([](std::vector<std::size_t> widths, const std::string& activation,
                       const std::string& scheme, std::size_t members, std::uint64_t seed) {
             return init_ensemble(MlpSpec{std::move(widths), parse_activation(activation)},
                                  parse_scheme(scheme), members, seed);
           }),
           py::arg("widths"), py::arg("activation") = "relu", py::arg("scheme") = "independent",
           py::arg("members") = 5, py::arg("seed") = 0)
      .def_property_readonly("members", [](const EnsembleModel& e) { return e.members; })
      .def_property_readonly("scheme", [](const EnsembleModel& e) { return to_string(e.scheme); })
      .def("parameter_count", &EnsembleModel::parameter_count)
      .def("shared_parameter_count", &EnsembleModel::shared_parameter_count)
      .def("member_parameter_vector", &member_parameter_vector)
      .def(
          "forward",
          [](const EnsembleModel& e, const Array& x) {
            const EnsemblePrediction p = forward_all(e, to_matrix(x));
            py::dict d;
            py::list logits, probs;
            for (const auto& z : p.logits) logits.append(to_array(z));
            for (const auto& q : p.probs) probs.append(to_array(q));
            d["logits"] = logits;
            d["probs"] = probs;
            d["mean_prob"] = to_array(p.mean_prob);
            return d;
          },
          py::arg("x"))
      .def("save", [](const EnsembleModel& e, const std::string& path) { save_checkpoint(e, path); })
      .def_static("load", &load_checkpoint);

  m.def(
      "make_blobs",
      [](std::size_t classes, std::size_t dim, std::size_t per_class, double spread,
         std::uint64_t seed) {
        BlobSpec s;
        s.classes = classes;
        s.dim = dim;
        s.per_class = per_class;
        s.spread = spread;
        s.seed = seed;
        return dataset_dict(make_blobs(s));
      },
      py::arg("classes") = 10, py::arg("dim") = 32, py::arg("per_class") = 200,
      py::arg("spread") = 1.0, py::arg("seed") = 0);
  m.def(
      "corrupt",
      [](const Array& x, const std::string& kind, int level, std::uint64_t seed) {
        Dataset ds;
        ds.inputs = to_matrix(x);
        ds.labels.assign(ds.inputs.rows(), 0);
        ds.classes = 1;
        return to_array(corrupt(ds, Corruption{parse_corruption(kind), level, std::nullopt}, seed)
                            .inputs);
      },
      py::arg("x"), py::arg("kind"), py::arg("level"), py::arg("seed") = 0);
  m.def(
      "sample_uniform_ood",
      [](std::size_t dim, std::size_t n, std::uint64_t seed) {
        return to_array(sample_uniform_ood(dim, n, seed));
      },
      py::arg("dim"), py::arg("n"), py::arg("seed") = 0);

  m.def("neg_corr", [](const std::vector<Array>& probs) {
    return score_of(probs, [](auto v) { return neg_corr(v); });
  });
  m.def(
      "chi2_diversity",
      [](const std::vector<Array>& probs, bool literal) {
        return score_of(probs, [&](auto v) { return chi2_diversity(v, literal); });
      },
      py::arg("probs"), py::arg("literal") = false);
  m.def(
      "adp",
      [](const std::vector<Array>& probs, const std::vector<int>& labels, double alpha,
         double beta, double jitter) {
        return score_of(probs, [&](auto v) { return adp(v, labels, alpha, beta, jitter); });
      },
      py::arg("probs"), py::arg("labels"), py::arg("alpha") = 0.125, py::arg("beta") = 0.5,
      py::arg("jitter") = kDefaultGramJitter);
  m.def(
      "sample_diversity_from_logits",
      [](const std::vector<Array>& logits, double jitter) {
        return score_of(logits, [&](auto v) { return sample_diversity_from_logits(v, jitter); });
      },
      py::arg("logits"), py::arg("jitter") = kDefaultGramJitter);
  m.def("entropy", [](const std::vector<double>& p) { return entropy(p); });

  m.def("accuracy", [](const Array& p, const std::vector<int>& y) { return accuracy(to_matrix(p), y); });
  m.def("nll", [](const Array& p, const std::vector<int>& y) { return nll(to_matrix(p), y); });
  m.def(
      "ece",
      [](const Array& p, const std::vector<int>& y, std::size_t bins) {
        return ece(to_matrix(p), y, bins);
      },
      py::arg("probs"), py::arg("labels"), py::arg("bins") = kDefaultEceBins);
  m.def("auc_roc", [](const std::vector<double>& id, const std::vector<double>& ood) {
    return auc_roc(id, ood);
  });
  m.def("jsd", [](const std::vector<Array>& members, const Array& mean) {
    return jsd(to_matrices(members), to_matrix(mean));
  });
  m.def("oracle_nll", [](const std::vector<Array>& members, const std::vector<int>& y) {
    return oracle_nll(to_matrices(members), y);
  });
  m.def(
      "fit_temperature",
      [](const std::vector<Array>& logits, const std::vector<int>& y, std::size_t folds) {
        const TemperatureFit fit = fit_temperature(to_matrices(logits), y, folds);
        return py::make_tuple(fit.temperature, fit.fold_temperatures,
                              to_array(fit.held_out_probs));
      },
      py::arg("logits"), py::arg("labels"), py::arg("folds") = kDefaultTemperatureFolds);

  m.def(
      "gradcheck",
      [](std::size_t instances, std::uint64_t seed) {
        py::list out;
        for (const auto& c : run_gradcheck_suite(instances, seed)) {
          py::dict d;
          d["name"] = c.name;
          d["passed"] = c.passed;
          d["instances"] = c.instances;
          d["max_relative_error"] = c.max_relative_error;
          out.append(d);
        }
        return out;
      },
      py::arg("instances") = 20, py::arg("seed") = 0);

  m.def(
      "run",
      [](const std::string& config, const std::optional<std::string>& output_dir,
         std::int64_t seed_offset, std::size_t jobs, bool force) {
        RunOptions o;
        o.output_dir = output_dir;
        o.seed_offset = seed_offset;
        o.jobs = jobs;
        o.force = force;
        RunSummary s;
        {
          py::gil_scoped_release release;
          s = run_experiment(load_config(config), o);
        }
        return py::make_tuple(s.output_dir, s.exit_code);
      },
      py::arg("config"), py::arg("output_dir") = std::nullopt, py::arg("seed_offset") = 0,
      py::arg("jobs") = 1, py::arg("force") = false);
  m.def("config_canonical", [](const std::string& path) { return load_config(path).canonical(); });
  m.def("report", [](const std::string& dir) { return build_report(dir).to_text(); });
}
