#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <stdexcept>
#include <string>
#include <utility>

#include "fel/data.hpp"
#include "fel/enhancer.hpp"
#include "fel/gradcheck.hpp"
#include "fel/tape.hpp"

namespace py = pybind11;
using namespace fel;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_array(const Array& a) {
  if (a.ndim() != 3)
    throw std::invalid_argument("expected a 3-d array (channels, height, "
                                "width), got " +
                                std::to_string(a.ndim()) + " dimensions");
  Shape shape(3);
  for (int i = 0; i < 3; ++i) shape[i] = static_cast<int>(a.shape(i));
  Tensor t = Tensor::zeros(shape);
  const double* src = a.data();
  std::copy(src, src + t.size(), t.data.begin());
  return t;
}

Array array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> dims(t.shape.begin(), t.shape.end());
  Array out(dims);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

EnhancerConfig make_config(std::pair<int, int> scale_pair, int blocks,
                           int channels, const std::string& downsample,
                           const std::string& aggregation_high,
                           const std::string& aggregation_low,
                           const std::string& value_source,
                           bool attention_scaling,
                           const std::string& projection, bool share_fen) {
  EnhancerConfig c;
  c.scale_pair = scale_pair;
  c.num_blocks = blocks;
  c.channels = channels;
  if (!parse_downsample(downsample, c.downsample_method))
    throw std::invalid_argument("unknown downsample method: " + downsample);
  if (!parse_aggregation(aggregation_high, c.aggregation_high))
    throw std::invalid_argument("unknown aggregation: " + aggregation_high);
  if (!parse_aggregation(aggregation_low, c.aggregation_low))
    throw std::invalid_argument("unknown aggregation: " + aggregation_low);
  if (!parse_value_source(value_source, c.value_source))
    throw std::invalid_argument("unknown value source: " + value_source);
  c.attention_scaling = attention_scaling;
  if (!parse_output_projection(projection, c.output_projection))
    throw std::invalid_argument("unknown projection: " + projection);
  c.share_fen = share_fen;
  c.validate();
  return c;
}

// makes the config keyword list reusable across the bindings below
#define FEL_CONFIG_ARGS                                                     \
  py::arg("scale_pair") = std::pair<int, int>{4, 8}, py::arg("blocks") = 8, \
  py::arg("channels") = 32, py::arg("downsample") = "conv",                 \
  py::arg("aggregation_high") = "safa", py::arg("aggregation_low") = "sc",  \
  py::arg("value_source") = "k", py::arg("attention_scaling") = false,      \
  py::arg("projection") = "to_rgb", py::arg("share_fen") = true

py::dict config_dict(const EnhancerConfig& c) {
  py::dict d;
  d["scale_pair"] = c.scale_pair;
  d["blocks"] = c.num_blocks;
  d["channels"] = c.channels;
  d["downsample"] = to_string(c.downsample_method);
  d["aggregation_high"] = to_string(c.aggregation_high);
  d["aggregation_low"] = to_string(c.aggregation_low);
  d["value_source"] = to_string(c.value_source);
  d["attention_scaling"] = c.attention_scaling;
  d["projection"] = to_string(c.output_projection);
  d["share_fen"] = c.share_fen;
  return d;
}

class PyEnhancer {
 public:
  PyEnhancer(EnhancerConfig cfg, std::uint64_t seed)
      : params_(EnhancerParams::init(cfg, seed)) {}

  Array enhance_array(const Array& image) {
    Tape tape;
    Var out = enhance(tape.leaf(tensor_from_array(image)), params_);
    return array_from_tensor(tape.value(out));
  }

  std::int64_t parameter_count() const { return param_count(params_.config); }

  py::dict config() const { return config_dict(params_.config); }

 private:
  EnhancerParams params_;
};

}  // namespace

PYBIND11_MODULE(_fel, m) {
  m.doc() = "multi-scale low-light feature enhancement core";

  py::class_<PyEnhancer>(m, "Enhancer",
                         "hierarchical enhancer with freshly initialized "
                         "weights; images are (3, h, w) float arrays in [0,1]")
      .def(py::init([](std::pair<int, int> scale_pair, int blocks,
                       int channels, const std::string& downsample,
                       const std::string& aggregation_high,
                       const std::string& aggregation_low,
                       const std::string& value_source, bool attention_scaling,
                       const std::string& projection, bool share_fen,
                       std::uint64_t seed) {
             return PyEnhancer(
                 make_config(scale_pair, blocks, channels, downsample,
                             aggregation_high, aggregation_low, value_source,
                             attention_scaling, projection, share_fen),
                 seed);
           }),
           FEL_CONFIG_ARGS, py::arg("seed") = 1)
      .def("enhance", &PyEnhancer::enhance_array, py::arg("image"),
           "run the full pipeline; height and width must be divisible by the "
           "coarse scale")
      .def_property_readonly("param_count", &PyEnhancer::parameter_count,
                             "trainable parameters excluding the output "
                             "projection")
      .def_property_readonly("config", &PyEnhancer::config);

  m.def(
      "param_count",
      [](std::pair<int, int> scale_pair, int blocks, int channels,
         const std::string& downsample, const std::string& aggregation_high,
         const std::string& aggregation_low, const std::string& value_source,
         bool attention_scaling, const std::string& projection,
         bool share_fen) {
        return param_count(make_config(
            scale_pair, blocks, channels, downsample, aggregation_high,
            aggregation_low, value_source, attention_scaling, projection,
            share_fen));
      },
      FEL_CONFIG_ARGS,
      "closed-form trainable parameter count for a configuration");

  m.def(
      "gradcheck",
      [](int size, std::uint64_t seed, double tol,
         std::pair<int, int> scale_pair, int blocks, int channels,
         const std::string& downsample, const std::string& aggregation_high,
         const std::string& aggregation_low, const std::string& value_source,
         bool attention_scaling, const std::string& projection,
         bool share_fen) {
        GradCheckReport r = gradcheck_pipeline(
            make_config(scale_pair, blocks, channels, downsample,
                        aggregation_high, aggregation_low, value_source,
                        attention_scaling, projection, share_fen),
            size, seed, tol);
        py::dict out;
        out["pass"] = r.pass;
        out["tolerance"] = r.tolerance;
        out["worst_err"] = r.worst_err;
        out["worst_name"] = r.worst_name;
        py::dict per;
        for (const auto& [name, err] : r.per_tensor) per[name.c_str()] = err;
        out["per_tensor"] = per;
        return out;
      },
      py::arg("size") = 16, py::arg("seed") = 5, py::arg("tol") = 1e-4,
      FEL_CONFIG_ARGS,
      "compare analytic gradients of a small train step against central "
      "differences");

  m.def(
      "render_shape",
      [](int label, int size, std::uint64_t seed) {
        Rng rng(seed);
        return array_from_tensor(render_shape(label, size, rng));
      },
      py::arg("label"), py::arg("size") = 64, py::arg("seed") = 1,
      "render one well-lit shape image as a (3, size, size) array");

  m.def(
      "darken",
      [](const Array& image, double gamma, double brightness,
         double noise_sigma, std::uint64_t noise_seed) {
        return array_from_tensor(darken(tensor_from_array(image), gamma,
                                        brightness, noise_sigma, noise_seed));
      },
      py::arg("image"), py::arg("gamma") = 3.0, py::arg("brightness") = 0.15,
      py::arg("noise_sigma") = 0.02, py::arg("noise_seed") = 1,
      "low-light degradation: clamp(brightness * img**gamma + noise, 0, 1)");

  m.def(
      "class_names",
      [] {
        std::vector<std::string> names;
        for (int i = 0; i < kNumShapeClasses; ++i)
          names.emplace_back(shape_class_name(i));
        return names;
      },
      "shape class names in label order");
}
