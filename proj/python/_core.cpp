#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "pmpd/cli.hpp"
#include "pmpd/errors.hpp"
#include "pmpd/io.hpp"
#include "pmpd/metrics.hpp"
#include "pmpd/perf.hpp"
#include "pmpd/quant.hpp"
#include "pmpd/schedule.hpp"

namespace py = pybind11;
using namespace pmpd;
using nlohmann::json;

namespace {

schedule::PrecisionSchedule parse_schedule(const std::string& text) {
  return io::schedule_from_json(json::parse(text));
}

// Row-major float32 copy of a 2-D array.
struct Matrix {
  std::vector<float> data;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

Matrix to_matrix(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ValueError("expected a 2-D array");
  Matrix m;
  m.rows = static_cast<std::size_t>(a.shape(0));
  m.cols = static_cast<std::size_t>(a.shape(1));
  m.data.assign(a.data(), a.data() + a.size());
  return m;
}

template <typename T>
py::array_t<T> as_array(const std::vector<T>& v, std::size_t rows, std::size_t cols) {
  py::array_t<T> out({rows, cols});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the pmpd multi-precision decoding toolkit";

  // Python-side hierarchy mirrors errors.hpp; the translator below checks most-derived first.
  static py::exception<Error> error(m, "Error", PyExc_RuntimeError);
  static py::exception<ConfigError> config_error(m, "ConfigError", error.ptr());
  static py::exception<InputError> input_error(m, "InputError", error.ptr());
  static py::exception<OverflowError> overflow_error(m, "OverflowError", error.ptr());
  static py::exception<ContractViolation> contract(m, "ContractViolation", error.ptr());
  static py::exception<TrainingDiverged> diverged(m, "TrainingDiverged", error.ptr());
  static py::exception<ParseError> parse_error(m, "ParseError", input_error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ParseError& e) {
      parse_error(e.what());
    } catch (const TrainingDiverged& e) {
      diverged(e.what());
    } catch (const ContractViolation& e) {
      contract(e.what());
    } catch (const OverflowError& e) {
      overflow_error(e.what());
    } catch (const InputError& e) {
      input_error(e.what());
    } catch (const ConfigError& e) {
      config_error(e.what());
    } catch (const Error& e) {
      error(e.what());
    } catch (const json::exception& e) {
      input_error(e.what());
    }
  });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out;
        std::ostringstream err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run one pmpd command; returns (exit_code, stdout, stderr).");

  m.def("lcs_length", [](const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b) {
    return metrics::lcs_len(a, b);
  });
  m.def(
      "rouge_l",
      [](const std::vector<std::int32_t>& candidate, const std::vector<std::int32_t>& reference) {
        const auto s = metrics::rouge_l(candidate, reference);
        return py::make_tuple(s.precision, s.recall, s.f1);
      },
      py::arg("candidate"), py::arg("reference"), "(precision, recall, f1) of Rouge-L over token ids.");

  m.def("count_schedules", &schedule::count_schedules, py::arg("horizon"), py::arg("k"));
  m.def(
      "switch_grid", [](int n, int horizon) { return schedule::SwitchGrid::make(n, horizon).points; },
      py::arg("n"), py::arg("horizon"));
  m.def(
      "precision_at",
      [](const std::string& sched, std::size_t step) { return schedule::precision_at(parse_schedule(sched), step); },
      py::arg("schedule_json"), py::arg("step"));
  m.def(
      "avg_bitwidth",
      [](const std::string& sched, std::size_t tokens) { return schedule::avg_bitwidth(parse_schedule(sched), tokens); },
      py::arg("schedule_json"), py::arg("tokens_generated"));
  m.def(
      "schedule_violations",
      [](const std::string& sched) {
        // Built field by field: the JSON reader rejects exactly the schedules we want to describe.
        const auto j = json::parse(sched);
        schedule::PrecisionSchedule s;
        s.precisions = j.at("precisions").get<std::vector<int>>();
        s.switch_points = j.at("switch_points").get<std::vector<int>>();
        s.horizon = j.at("horizon").get<int>();
        s.prefill = j.value("prefill", 0);
        std::vector<std::string> messages;
        for (const auto& v : schedule::validate(s)) messages.push_back(v.message);
        return messages;
      },
      py::arg("schedule_json"));

  py::class_<quant::QuantizedTensor>(m, "QuantizedTensor")
      .def_readonly("rows", &quant::QuantizedTensor::rows)
      .def_readonly("cols", &quant::QuantizedTensor::cols)
      .def_readonly("group_size", &quant::QuantizedTensor::group_size)
      .def_readonly("p_max", &quant::QuantizedTensor::p_max)
      .def("codes",
           [](const quant::QuantizedTensor& qt, int p) {
             return as_array(quant::unpack_prefix(qt.store, p), qt.rows, qt.cols);
           },
           py::arg("p"), "Integer codes made of the top p bit planes.")
      .def("dequantize",
           [](const quant::QuantizedTensor& qt, int p) { return as_array(quant::dequantize(qt, p), qt.rows, qt.cols); },
           py::arg("p"));
  m.def(
      "quantize",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& weights, int p_max,
         std::size_t group_size) {
        const auto mat = to_matrix(weights);
        return quant::quantize_tensor(mat.data, mat.rows, mat.cols, p_max, group_size);
      },
      py::arg("weights"), py::arg("p_max"), py::arg("group_size") = quant::kDefaultGroupSize);

  m.def(
      "perf_report",
      [](const std::string& model, const std::string& hardware, const std::string& sched, std::int64_t prompt_len,
         std::int64_t gen_len) {
        const auto fp = perf::ModelFootprint::preset(model);
        const auto hw = perf::HardwareConfig::from_json(json::parse(hardware));
        return perf::pipeline_perf(fp, parse_schedule(sched), hw, prompt_len, gen_len).to_json().dump();
      },
      py::arg("model"), py::arg("hardware_json"), py::arg("schedule_json"), py::arg("prompt_len"),
      py::arg("gen_len"), "Perf report JSON for a preset footprint ('vicuna-7b', 'mobilellama-1.4b').");
}
