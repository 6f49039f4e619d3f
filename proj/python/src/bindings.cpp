#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "synref/cli.hpp"
#include "synref/config.hpp"
#include "synref/losses.hpp"
#include "synref/tensor.hpp"
#include "synref/world.hpp"

namespace py = pybind11;
using namespace synref;

namespace {

int run(const std::vector<std::string>& args) {
  std::vector<std::string> owned = args;
  owned.insert(owned.begin(), "synref");
  std::vector<char*> argv;
  argv.reserve(owned.size());
  for (std::string& a : owned) argv.push_back(a.data());
  return cli::run_main(static_cast<int>(argv.size()), argv.data());
}

double iou_cells(double ax_tl, double ay_tl, double ax_br, double ay_br,
                 double bx_tl, double by_tl, double bx_br, double by_br) {
  const world::BoundingBox a{ax_tl, ay_tl, ax_br, ay_br};
  const world::BoundingBox b{bx_tl, by_tl, bx_br, by_br};
  return world::iou(a, b);
}

double contrastive(const std::vector<double>& anchor,
                   const std::vector<std::vector<double>>& positives,
                   const std::vector<std::vector<double>>& negatives,
                   double tau) {
  TapeSuspend suspend;
  auto tens = [](const std::vector<double>& v) {
    return Tensor::from_values({v.size()}, std::vector<double>(v));
  };
  std::vector<Tensor> pos, neg;
  for (const auto& p : positives) pos.push_back(tens(p));
  for (const auto& n : negatives) neg.push_back(tens(n));
  return losses::contrastive_loss(tens(anchor), pos, neg, tau).scalar_value();
}

std::map<std::string, std::string> datasets_jsonl(
    const std::string& config_json, std::optional<std::uint64_t> seed) {
  config::RunConfig cfg =
      config::config_from_json_text(config_json.empty() ? "{}" : config_json);
  if (seed) cfg.data_seed = *seed;
  std::vector<world::Dataset> sets =
      world::make_datasets(cfg.data_seed, cfg.data, config::config_hash_hex(cfg));
  std::map<std::string, std::string> out;
  for (const world::Dataset& ds : sets) out[ds.name] = world::dataset_to_jsonl(ds);
  return out;
}

}  // namespace

PYBIND11_MODULE(_synref, m) {
  m.doc() = "referring-expression grounding on synthetic scenes";
  m.def("run", &run, py::arg("args"),
        "Run one CLI invocation in-process and return its exit code.");
  m.def("iou", &iou_cells, py::arg("ax_tl"), py::arg("ay_tl"), py::arg("ax_br"),
        py::arg("ay_br"), py::arg("bx_tl"), py::arg("by_tl"), py::arg("bx_br"),
        py::arg("by_br"),
        "IoU of two cell-grid boxes given as (x_tl, y_tl, x_br, y_br) corners.");
  m.def("contrastive_loss", &contrastive, py::arg("anchor"), py::arg("positives"),
        py::arg("negatives"), py::arg("tau") = 0.1,
        "Multi-positive contrastive loss over unit-norm feature vectors.");
  m.def("datasets_jsonl", &datasets_jsonl, py::arg("config_json") = "",
        py::arg("seed") = py::none(),
        "Generate every configured dataset; returns {name: jsonl text}.");
}
