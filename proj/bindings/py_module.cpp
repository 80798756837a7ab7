// Python bindings for the THIN numerical core: tensors, the differentiable
// tree gate, the training losses, config digests, and the gradient battery.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "thin/experiment.hpp"

namespace py = pybind11;
using namespace thin;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& a) {
  Shape shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i)
    shape[static_cast<std::size_t>(i)] = static_cast<std::size_t>(a.shape(i));
  std::vector<double> values(a.data(), a.data() + a.size());
  return Tensor::from(std::move(shape), std::move(values));
}

py::array_t<double> tensor_to_array(const Tensor& t) {
  if (!t.defined()) throw std::runtime_error("tensor is undefined");
  std::vector<py::ssize_t> dims(t.shape().begin(), t.shape().end());
  py::array_t<double> out(dims);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

using NpArray =
    py::array_t<double, py::array::c_style | py::array::forcecast>;

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() =
      "THIN core: exogenous tree-gated deep ensembles with a dispelling "
      "objective (f64 numerics, reverse-mode autodiff)";

  py::class_<Tensor>(m, "Tensor")
      .def(py::init([](const NpArray& a) { return tensor_from_array(a); }),
           py::arg("array"))
      .def_property_readonly(
          "shape",
          [](const Tensor& t) {
            return std::vector<std::size_t>(t.shape().begin(), t.shape().end());
          })
      .def("numpy", &tensor_to_array)
      .def("item", &Tensor::item)
      .def("__repr__", [](const Tensor& t) {
        return "Tensor(shape=" + shape_str(t.shape()) + ")";
      });

  // Elementwise / linear-algebra operations (eager, f64).
  m.def("matmul", [](const NpArray& a, const NpArray& b) {
    return tensor_to_array(matmul(tensor_from_array(a), tensor_from_array(b)));
  });
  m.def("add", [](const NpArray& a, const NpArray& b) {
    return tensor_to_array(add(tensor_from_array(a), tensor_from_array(b)));
  });
  m.def("mul", [](const NpArray& a, const NpArray& b) {
    return tensor_to_array(mul(tensor_from_array(a), tensor_from_array(b)));
  });
  m.def("sigmoid", [](const NpArray& a) {
    return tensor_to_array(sigmoid(tensor_from_array(a)));
  });
  m.def("relu", [](const NpArray& a) {
    return tensor_to_array(relu(tensor_from_array(a)));
  });
  m.def("reduce_mean", [](const NpArray& a) {
    return reduce(ReduceOp::mean, tensor_from_array(a)).item();
  });
  m.def("reduce_sum", [](const NpArray& a) {
    return reduce(ReduceOp::sum, tensor_from_array(a)).item();
  });

  // Losses.
  m.def(
      "cross_entropy",
      [](const NpArray& logits, const std::vector<int>& labels) {
        Tensor z = tensor_from_array(logits);
        return cross_entropy(z, one_hot(labels, z.dim(1))).item();
      },
      py::arg("logits"), py::arg("labels"),
      "Mean negative log-likelihood of [B,K] logits against integer labels");
  m.def(
      "dispel_loss",
      [](const NpArray& frozen_logits, const NpArray& probed_logits) {
        return dispel_loss(tensor_from_array(frozen_logits),
                           tensor_from_array(probed_logits))
            .item();
      },
      py::arg("frozen_logits"), py::arg("probed_logits"),
      "Mean |cosine| between matching rows (the dispelling objective)");
  m.def("mix_logits", [](const std::vector<NpArray>& expert_logits,
                         const NpArray& gate) {
    std::vector<Tensor> zs;
    zs.reserve(expert_logits.size());
    for (const auto& z : expert_logits) zs.push_back(tensor_from_array(z));
    return tensor_to_array(mix_logits(zs, tensor_from_array(gate)));
  });

  // Soft decision tree gate.
  py::class_<GateTree>(m, "GateTree")
      .def(py::init([](std::size_t in_dim, std::size_t depth,
                       std::uint64_t seed) {
             RngStream rng(seed, "tree_init");
             return GateTree(in_dim, depth, rng);
           }),
           py::arg("in_dim"), py::arg("depth"), py::arg("seed") = 1)
      .def_property_readonly("nodes", &GateTree::nodes)
      .def_property_readonly("leaves", &GateTree::leaves)
      .def("decisions",
           [](const GateTree& t, const NpArray& h) {
             return tensor_to_array(t.decisions(tensor_from_array(h)));
           })
      .def("forward",
           [](const GateTree& t, const NpArray& h) {
             return tensor_to_array(t.forward(tensor_from_array(h)));
           })
      .def_static("leaf_probabilities", [](const NpArray& d, std::size_t depth) {
        return tensor_to_array(
            GateTree::leaf_probabilities(tensor_from_array(d), depth));
      });

  // Experiment identity.
  m.def(
      "run_digest",
      [](const std::string& dataset, const std::string& variant, double lambda,
         std::uint64_t seed, std::size_t epochs) {
        ExperimentConfig cfg;
        cfg.dataset = dataset_from_string(dataset);
        cfg.variant = variant_from_string(variant);
        cfg.lambda = lambda;
        cfg.seed = seed;
        cfg.epochs = epochs;
        return run_digest(cfg);
      },
      py::arg("dataset"), py::arg("variant"), py::arg("lambda_") = -1.0,
      py::arg("seed") = 1, py::arg("epochs") = 15,
      "Canonical SHA-256 identity of a run configuration");
  m.def("config_identity", [](const std::string& dataset,
                              const std::string& variant) {
    ExperimentConfig cfg;
    cfg.dataset = dataset_from_string(dataset);
    cfg.variant = variant_from_string(variant);
    cfg.finalize();
    return cfg.identity_json().dump();
  });

  // Gradient battery.
  m.def(
      "gradcheck_battery",
      [](bool negative_control) {
        py::list out;
        for (const GradcheckEntry& e : gradcheck_battery(negative_control)) {
          py::dict d;
          d["op"] = e.op;
          d["max_rel_err"] = e.max_rel_err;
          d["checked"] = e.checked;
          d["skipped"] = e.skipped;
          d["pass"] = e.pass;
          out.append(d);
        }
        return out;
      },
      py::arg("negative_control") = true,
      "Finite-difference check of every operation; the negative-control "
      "entry passes iff a deliberately corrupted backward is detected");

  m.attr("__version__") = "1.0.0";
}
