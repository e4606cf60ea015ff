#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

#include "modalfuse/config.hpp"
#include "modalfuse/engine.hpp"
#include "modalfuse/errors.hpp"
#include "modalfuse/experiments.hpp"
#include "modalfuse/mcrm.hpp"
#include "modalfuse/metrics.hpp"
#include "modalfuse/model.hpp"

namespace py = pybind11;
using namespace modalfuse;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

RunConfig parse_config(const std::string& text) {
  RunConfig c = config_from_json(Json::parse(text));
  c.validate();
  return c;
}

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.ptr(), t.ptr() + t.numel(), out.mutable_data());
  return out;
}

std::vector<std::int32_t> to_ids(const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& a) {
  return {a.data(), a.data() + a.size()};
}

class PyModel {
 public:
  PyModel(const std::string& config, std::uint64_t seed) {
    Rng rng(seed);
    model_ = std::make_unique<Model>(parse_config(config).model_config(), rng);
  }
  explicit PyModel(std::unique_ptr<Model> model) : model_(std::move(model)) {}

  Array predict(const Array& rgb, const Array& aux) const {
    Tensor logits;
    {
      py::gil_scoped_release release;
      logits = model_->predict(to_tensor(rgb), to_tensor(aux));
    }
    return to_array(logits);
  }

  bool has_aux_heads() const { return model_->aux_heads().has_value(); }

  std::int64_t parameter_count(bool trainable_only) const {
    std::int64_t n = 0;
    for (const auto& p : model_->parameters()) {
      if (!trainable_only || p.var.requires_grad()) n += p.var.value().numel();
    }
    return n;
  }

 private:
  std::unique_ptr<Model> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the modalfuse segmentation toolkit.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  m.def("default_config", [] { return default_config_json().dump(); });
  m.def(
      "resolve_config",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        Json doc = Json::parse(text);
        for (const auto& o : overrides) {
          auto [key, value] = parse_override(o);
          apply_override(doc, key, value);
        }
        return to_json(parse_config(doc.dump())).dump();
      },
      py::arg("config"), py::arg("overrides") = std::vector<std::string>{});
  m.def("param_report",
        [](const std::string& text) { return param_report_json(param_report(parse_config(text))).dump(); });
  m.def("lr_at", [](std::int64_t step, const std::string& text) {
    return lr_at(step, parse_config(text).schedule);
  });
  m.def("masked_sample_count", &masked_sample_count, py::arg("batch_size"), py::arg("ratio"));
  m.def(
      "metrics",
      [](const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& gt,
         std::int64_t num_classes, std::optional<std::vector<std::int64_t>> foreground,
         std::int32_t ignore_index) {
        if (pred.size() != gt.size()) throw ShapeError("metrics: prediction and label sizes differ");
        ConfusionMatrix cm = foreground ? ConfusionMatrix(num_classes, *foreground)
                                        : ConfusionMatrix(num_classes);
        cm.accumulate(to_ids(pred), to_ids(gt), ignore_index);
        return report_json(make_report(cm), -1);
      },
      py::arg("pred"), py::arg("gt"), py::arg("num_classes"), py::arg("foreground") = py::none(),
      py::arg("ignore_index") = -1);
  m.def(
      "train",
      [](const std::string& text, std::uint64_t seed, const std::filesystem::path& run_dir) {
        RunConfig c = parse_config(text);
        py::gil_scoped_release release;
        TrainArtifacts art = train_to_dir(c, seed, run_dir);
        return metrics_document(art.report, seed, art.trainable, art.total);
      },
      py::arg("config"), py::arg("seed"), py::arg("run_dir"));

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&, std::uint64_t>(), py::arg("config"), py::arg("seed"))
      .def_static(
          "from_checkpoint",
          [](const std::filesystem::path& path, bool drop_aux_heads) {
            return PyModel(model_from_checkpoint(read_checkpoint(path), drop_aux_heads));
          },
          py::arg("path"), py::arg("drop_aux_heads") = true)
      .def("predict", &PyModel::predict, py::arg("rgb"), py::arg("aux"))
      .def_property_readonly("has_aux_heads", &PyModel::has_aux_heads)
      .def("parameter_count", &PyModel::parameter_count, py::arg("trainable_only") = false);
}
