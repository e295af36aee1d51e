#include <cstring>
#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "headsvd/adaptation.hpp"
#include "headsvd/asset_io.hpp"
#include "headsvd/cli.hpp"
#include "headsvd/head_algebra.hpp"
#include "headsvd/pipeline.hpp"
#include "headsvd/sparse_coding.hpp"

namespace py = pybind11;
using namespace headsvd;

namespace {

py::array_t<float> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<float> a(shape);
  std::memcpy(a.mutable_data(), t.data.data(), t.data.size() * sizeof(float));
  return a;
}

Tensor from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  Tensor t;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) t.shape.push_back(static_cast<std::size_t>(a.shape(i)));
  t.data.assign(a.data(), a.data() + a.size());
  return t;
}

py::dict decomposition_dict(const Decomposition& d) {
  py::dict out;
  out["method"] = to_string(d.method);
  out["lambda"] = d.lambda;
  out["support"] = d.support;
  out["coefficients"] = d.coefficients;
  out["residual_norm"] = d.residual_norm;
  out["orientation"] = d.orientation;
  out["residual_trace"] = d.residual_trace;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Weight-space interpretation and editing of vision-transformer attention heads";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<JudgeError>(m, "JudgeError", PyExc_RuntimeError);

  m.def(
      "read_tensor_file",
      [](const std::filesystem::path& path) {
        const TensorFile f = read_tensor_file(path);
        py::dict tensors;
        for (const auto& [name, t] : f.tensors) tensors[py::str(name)] = to_array(t);
        return py::make_tuple(f.metadata, tensors);
      },
      py::arg("path"), "Returns (metadata, {name: float32 array}).");

  m.def(
      "write_tensor_file",
      [](const std::filesystem::path& path, const py::dict& tensors, const std::map<std::string, std::string>& metadata) {
        TensorFile f;
        f.metadata = metadata;
        for (const auto& [k, v] : tensors)
          f.tensors[k.cast<std::string>()] = from_array(v.cast<py::array_t<float, py::array::c_style | py::array::forcecast>>());
        write_tensor_file(f, path);
      },
      py::arg("path"), py::arg("tensors"), py::arg("metadata") = std::map<std::string, std::string>{});

  m.def(
      "model_id", [](const std::filesystem::path& path) { return model_id(load_weight_bundle(path)); },
      py::arg("bundle"));

  m.def(
      "inspect", [](const std::filesystem::path& path) { return inspect_bundle(load_weight_bundle(path)).dump(); },
      py::arg("bundle"), "Bundle summary as a JSON string.");

  m.def(
      "head_svd",
      [](const std::filesystem::path& path, int layer) {
        py::list out;
        for (const HeadSVD& s : analyze_layer(load_weight_bundle(path), layer)) {
          py::dict d;
          d["head"] = s.head;
          d["sigma"] = s.sigma;
          d["u"] = s.u;
          d["v_t"] = s.v_t;
          d["w_vo"] = s.w_vo;
          out.append(d);
        }
        return out;
      },
      py::arg("bundle"), py::arg("layer"), "Per-head SVD of the folded value-output matrices of one layer.");

  m.def("nnls", &nnls, py::arg("basis"), py::arg("target"));

  m.def(
      "decompose",
      [](const Vector& target, const Matrix& dictionary, const std::string& method, int k, double lam) {
        return decomposition_dict(decompose(target, dictionary, method_from_string(method), k, lam));
      },
      py::arg("target"), py::arg("dictionary"), py::arg("method") = "comp", py::arg("k") = kDefaultSparsity,
      py::arg("lam") = kDefaultLambda);

  m.def(
      "spectral_similarity",
      [](const Matrix& w_pre, const Matrix& w_ft, int rank) {
        return greedy_spectral_match(svd_head(w_pre, 0, 0, rank), svd_head(w_ft, 0, 0, rank)).similarity;
      },
      py::arg("w_pre"), py::arg("w_ft"), py::arg("rank"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line front end in-process; returns (exit_code, stdout, stderr).");
}
