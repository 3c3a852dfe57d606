// Python surface: the pipeline commands plus the score arithmetic, driven by
// plain dict configs that share the C++ key registry and validation.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "ulab/errors.hpp"
#include "ulab/evalkit.hpp"
#include "ulab/pipeline.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

py::object json_to_py(const json& j) {
    switch (j.type()) {
        case json::value_t::null: return py::none();
        case json::value_t::boolean: return py::bool_(j.get<bool>());
        case json::value_t::number_integer: return py::int_(j.get<int64_t>());
        case json::value_t::number_unsigned: return py::int_(j.get<uint64_t>());
        case json::value_t::number_float: return py::float_(j.get<double>());
        case json::value_t::string: return py::str(j.get<std::string>());
        case json::value_t::array: {
            py::list out;
            for (const auto& v : j) out.append(json_to_py(v));
            return out;
        }
        case json::value_t::object: {
            py::dict out;
            for (auto it = j.begin(); it != j.end(); ++it)
                out[py::str(it.key())] = json_to_py(it.value());
            return out;
        }
        default: return py::none();
    }
}

ulab::pipeline::RunConfig config_from_dict(const py::dict& options) {
    ulab::pipeline::RunConfig cfg;
    for (auto item : options) {
        const auto key = py::cast<std::string>(item.first);
        std::string value;
        if (py::isinstance<py::bool_>(item.second))
            value = py::cast<bool>(item.second) ? "true" : "false";
        else
            value = py::cast<std::string>(py::str(item.second));
        ulab::pipeline::apply_key(cfg, key, value);
    }
    return cfg;
}

template <json (*Fn)(const ulab::pipeline::RunConfig&)>
py::object run_command(const py::dict& options) {
    return json_to_py(Fn(config_from_dict(options)));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "desk-scale unlearning laboratory";

    py::register_exception<ulab::ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ulab::ConvergenceError>(m, "ConvergenceError", PyExc_RuntimeError);
    py::register_exception<ulab::NumericError>(m, "NumericError", PyExc_ArithmeticError);

    m.def("generate", &run_command<ulab::pipeline::cmd_gen>, py::arg("config"),
          "Synthesize a knowledge world and QA dataset; returns the summary.");
    m.def("train", &run_command<ulab::pipeline::cmd_train>, py::arg("config"),
          "Train the micro model to memorize a dataset; returns the summary.");
    m.def("unlearn_eval", &run_command<ulab::pipeline::cmd_unlearn_eval>, py::arg("config"),
          "Run an unlearning method and evaluate it; returns the summary.");
    m.def("evaluate", &run_command<ulab::pipeline::cmd_eval>, py::arg("config"),
          "Evaluate a checkpoint (optionally against a baseline); returns the summary.");
    m.def("sweep", &run_command<ulab::pipeline::cmd_sweep>, py::arg("config"),
          "Fan out unlearn runs over one key and many seeds; returns the summary.");

    m.def("ma_from", &ulab::eval::ma_from, py::arg("ma_f"), py::arg("ma_t"),
          "Aggregate two-hop accuracies: ((100 - ma_f) + ma_t) / 2.");
    m.def("score_from", &ulab::eval::score_from, py::arg("ua_ext"), py::arg("ta"), py::arg("sa"),
          py::arg("ma"), "Total score: mean of (100 - ua_ext), ta, sa, ma.");

    m.def("config_keys", [] {
        py::dict out;
        for (const auto& spec : ulab::pipeline::config_keys()) out[py::str(spec.name)] = spec.help;
        return out;
    });

    m.attr("__version__") = "1.0";
}
