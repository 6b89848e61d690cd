// SPDX-License-Identifier: Apache-2.0
#include "histomask/maskproc.hpp"
#include "histomask/metrics.hpp"
#include "histomask/pipeline.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace histomask;

namespace {

py::dict schedule_dict(const VisibilitySchedule& s) {
  py::dict d;
  d["kind"] = to_string(s.kind);
  d["T"] = s.T;
  d["zeta"] = s.zeta;
  d["alpha_bar"] = s.alpha_bar;
  d["drop"] = s.drop;
  d["revive"] = s.revive;
  d["weight"] = s.weight;
  d["source_t"] = s.source_t;
  return d;
}

VisibilitySchedule make_schedule(const std::string& kind, int T, double zeta) {
  return build_schedule(parse_schedule_kind(kind), T, zeta);
}

py::dict report_dict(const RunReport& r) {
  return py::module_::import("json").attr("loads")(r.to_json().dump());
}

py::dict dataset_dict(const Dataset& ds) {
  py::list slices;
  for (const auto& s : ds.slices) {
    py::dict d;
    d["index"] = s.index;
    d["row"] = s.row;
    d["col"] = s.col;
    d["expr"] = s.expr;
    d["cond"] = s.cond;
    slices.append(d);
  }
  py::dict out;
  out["genes"] = ds.gene_names;
  out["cond_columns"] = ds.cond_names;
  out["slices"] = slices;
  out["bayes_pcc"] = ds.oracle.bayes_pcc();
  out["oracle_exact"] = ds.oracle.exact;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Masked-diffusion expression prediction toolkit";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<MissingPrerequisite>(m, "MissingPrerequisite", PyExc_FileNotFoundError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  // schedules
  m.def(
      "build_schedule", [](const std::string& kind, int T, double zeta) { return schedule_dict(make_schedule(kind, T, zeta)); },
      py::arg("kind"), py::arg("T"), py::arg("zeta") = 1.0);
  m.def(
      "subsample_schedule",
      [](const std::string& kind, int T, double zeta, int K) {
        return schedule_dict(subsample_schedule(make_schedule(kind, T, zeta), K));
      },
      py::arg("kind"), py::arg("T"), py::arg("zeta"), py::arg("K"));
  m.def("log_gene_zeta", &log_gene_zeta, py::arg("T"), py::arg("G"));
  m.def(
      "check_schedule_invariants",
      [](const std::string& kind, int T, double zeta, double tol) {
        return check_schedule_invariants(make_schedule(kind, T, zeta), tol);
      },
      py::arg("kind"), py::arg("T"), py::arg("zeta"), py::arg("tol") = 1e-12);
  m.def("schedule_dump", &cmd_schedule_dump, py::arg("kind"), py::arg("T"), py::arg("zeta"));
  m.def(
      "chain_total_variation",
      [](const std::string& kind, int T, double zeta, int G, int t) {
        const auto s = make_schedule(kind, T, zeta);
        return total_variation(exact_chain_marginal(s, G, t), product_bernoulli(G, s.alpha_bar.at(t)));
      },
      py::arg("kind"), py::arg("T"), py::arg("zeta"), py::arg("G"), py::arg("t"));

  // metrics
  m.def("pearson", &pearson);
  m.def("per_gene_pearson", &per_gene_pearson);
  m.def("pcc_topk", &pcc_topk, py::arg("pred"), py::arg("truth"), py::arg("k"));
  m.def("mse_mae", [](const MatD& p, const MatD& t) {
    const auto e = mse_mae(p, t);
    return py::make_tuple(e.mse, e.mae);
  });
  m.def("ssim_gene_map", &ssim_gene_map);
  m.def("corr_matrix_compare", [](const MatD& p, const MatD& t) {
    const auto c = corr_matrix_compare(p, t);
    return py::make_tuple(c.frobenius, c.upper_tri_pcc);
  });
  m.def("wilcoxon_paired", &wilcoxon_paired);

  // configuration
  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static("from_text", &RunConfig::from_text)
      .def_static("from_file", &RunConfig::from_file)
      .def("set", &RunConfig::set)
      .def("get", &RunConfig::get)
      .def("to_text", &RunConfig::to_text)
      .def("hash", &RunConfig::hash)
      .def("validate", &RunConfig::validate)
      .def("__repr__", [](const RunConfig& c) { return "<RunConfig " + c.hash() + ">"; });
  m.def("config_keys", &describe_config_keys);

  // data and stages
  m.def(
      "generate_dataset", [](const RunConfig& cfg) { return dataset_dict(generate_dataset(cfg.generator())); },
      py::arg("config"));
  m.def("gen_data", &cmd_gen_data, py::arg("config"), py::arg("out"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "pretrain", [](const RunConfig& c, const std::filesystem::path& d, const std::filesystem::path& r) { cmd_pretrain(c, d, RunPaths(r)); },
      py::arg("config"), py::arg("data"), py::arg("run"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "finetune", [](const RunConfig& c, const std::filesystem::path& d, const std::filesystem::path& r) { cmd_finetune(c, d, RunPaths(r)); },
      py::arg("config"), py::arg("data"), py::arg("run"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "sample",
      [](const RunConfig& c, const std::filesystem::path& d, const std::filesystem::path& r, int steps) {
        return cmd_sample(c, d, RunPaths(r), steps);
      },
      py::arg("config"), py::arg("data"), py::arg("run"), py::arg("steps"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "evaluate",
      [](const RunConfig& c, const std::filesystem::path& d, const std::filesystem::path& r,
         const std::filesystem::path& p) { return report_dict(cmd_evaluate(c, d, RunPaths(r), p)); },
      py::arg("config"), py::arg("data"), py::arg("run"), py::arg("predictions"));
}
