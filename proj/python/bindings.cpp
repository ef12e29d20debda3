#include <sstream>
#include <string>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "partal/acquisition.hpp"
#include "partal/alcore.hpp"
#include "partal/data.hpp"
#include "partal/errors.hpp"
#include "partal/experiment.hpp"
#include "partal/uncertainty.hpp"

namespace py = pybind11;
using namespace partal;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<double> out(shape);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  std::vector<std::size_t> shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

const SampleRecord& record(const std::vector<SampleRecord>& split, py::ssize_t i) {
  if (i < 0 || static_cast<std::size_t>(i) >= split.size()) throw py::index_error("sample index out of range");
  return split[static_cast<std::size_t>(i)];
}

py::dict metrics_dict(const MetricsReport& report) {
  py::dict d;
  for (const auto& e : report.entries) d[py::str(e.name)] = e.value;
  return d;
}

}  // namespace

PYBIND11_MODULE(_partal_lab, m) {
  m.doc() = "Partial-label multi-task active learning on synthetic scenes";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("height", &Dataset::height)
      .def_readonly("width", &Dataset::width)
      .def_property_readonly("num_train", [](const Dataset& d) { return d.train.size(); })
      .def_property_readonly("num_test", [](const Dataset& d) { return d.test.size(); })
      .def_property_readonly("modalities",
                             [](const Dataset& d) {
                               std::vector<std::string> names;
                               for (const auto& s : d.modalities) names.push_back(s.name);
                               return names;
                             })
      .def("train_input", [](const Dataset& d, py::ssize_t i) { return to_numpy(record(d.train, i).input); })
      .def("train_target",
           [](const Dataset& d, py::ssize_t i, std::size_t k) { return to_numpy(record(d.train, i).targets.at(k)); })
      .def("test_input", [](const Dataset& d, py::ssize_t i) { return to_numpy(record(d.test, i).input); })
      .def("test_target",
           [](const Dataset& d, py::ssize_t i, std::size_t k) { return to_numpy(record(d.test, i).targets.at(k)); })
      .def("save", [](const Dataset& d, const std::string& stem) { save_dataset(d, stem); });

  m.def(
      "generate_dataset",
      [](const std::string& config_text) {
        const auto config = parse_config(config_text);
        return generate_dataset(config.generator, config.dataset_seed);
      },
      py::arg("config") = "", "Dataset described by the [dataset] section of an INI config.");
  m.def("load_dataset", [](const std::string& stem) { return load_dataset(stem); }, py::arg("stem"));

  m.def("default_config", [] { return serialize_config(ExperimentConfig{}); });
  m.def(
      "normalize_config", [](const std::string& text) { return serialize_config(parse_config(text)); },
      py::arg("text"), "Parse and re-serialize; raises ConfigError on unknown keys.");

  m.def(
      "shannon_entropy",
      [](const std::vector<double>& p) {
        return shannon_entropy_map(Tensor({p.size(), 1, 1}, p)).data[0];
      },
      py::arg("probabilities"));
  m.def(
      "gaussian_entropy",
      [](const std::vector<double>& variance) {
        return gaussian_entropy_map(Tensor({variance.size(), 1, 1}, variance)).data[0];
      },
      py::arg("variance"));

  m.def(
      "kcenter_greedy",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& features,
         const std::vector<std::size_t>& initial, std::size_t k) {
        if (features.ndim() != 2) throw py::value_error("features must be 2-D");
        return kcenter_greedy(from_numpy(features), initial, k);
      },
      py::arg("features"), py::arg("initial_centers"), py::arg("k"));
  m.def(
      "covering_radius",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& features,
         const std::vector<std::size_t>& centers) {
        if (features.ndim() != 2) throw py::value_error("features must be 2-D");
        return covering_radius(from_numpy(features), centers);
      },
      py::arg("features"), py::arg("centers"));

  m.def(
      "run_al",
      [](const Dataset& dataset, const std::string& strategy, const std::string& config_text, std::uint64_t seed) {
        const auto config = parse_config(config_text);
        const auto al = config.al_config(seed);
        ALRunRecord run;
        {
          py::gil_scoped_release release;
          run = run_al(dataset, parse_strategy(strategy), al);
        }
        py::list rows;
        for (const auto& it : run.iterations) {
          py::dict row;
          row["iteration"] = it.iteration;
          row["labels_used"] = it.labels_used;
          row["metrics"] = metrics_dict(it.metrics);
          rows.append(row);
        }
        return rows;
      },
      py::arg("dataset"), py::arg("strategy"), py::arg("config") = "", py::arg("seed") = 0);

  m.def(
      "reshape_long",
      [](const std::string& results_csv) {
        std::istringstream in(results_csv);
        std::ostringstream out;
        reshape_long(in, out);
        return out.str();
      },
      py::arg("results_csv"));
}
