#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsiseg/cube.hpp"
#include "hsiseg/error.hpp"
#include "hsiseg/eval.hpp"
#include "hsiseg/graph.hpp"
#include "hsiseg/pipeline.hpp"
#include "hsiseg/quality.hpp"
#include "hsiseg/synth.hpp"
#include "hsiseg/tiling.hpp"

namespace py = pybind11;
using namespace hsiseg;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

// JSON crosses the boundary as text; the Python side parses it.
py::object to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_py(const py::object& o) {
  if (o.is_none()) return nullptr;
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

HsiCube cube_from_array(const FloatArray& a, std::vector<float> wavelengths) {
  if (a.ndim() != 3) throw ShapeError("cube array must be (height, width, channels)");
  const auto h = static_cast<std::size_t>(a.shape(0)), w = static_cast<std::size_t>(a.shape(1)),
             c = static_cast<std::size_t>(a.shape(2));
  if (wavelengths.empty()) {
    for (std::size_t k = 0; k < c; ++k)
      wavelengths.push_back(468.0F + (790.0F - 468.0F) * static_cast<float>(k) / static_cast<float>(std::max<std::size_t>(c - 1, 1)));
  }
  return HsiCube(w, h, c, std::move(wavelengths), std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> cube_to_array(const HsiCube& cube) {
  py::array_t<float> out({cube.height(), cube.width(), cube.channels()});
  std::memcpy(out.mutable_data(), cube.data().data(), cube.data().size() * sizeof(float));
  return out;
}

template <typename T>
py::array_t<T> image_array(const std::vector<T>& v, std::size_t h, std::size_t w) {
  py::array_t<T> out({h, w});
  std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(T));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hyperspectral tile segmentation core";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());
  py::register_exception<NumericalError>(m, "NumericalError", base.ptr());

  m.def(
      "load_cube",
      [](const std::filesystem::path& path) {
        const auto r = load_cube(path);
        return py::make_tuple(cube_to_array(r.cube), std::vector<float>(r.cube.wavelengths().begin(), r.cube.wavelengths().end()));
      },
      py::arg("path"), "Reads an HSC1 file; returns (array[h, w, c], wavelengths).");

  m.def(
      "save_cube",
      [](const std::filesystem::path& path, const FloatArray& cube, std::vector<float> wavelengths) {
        save_cube(cube_from_array(cube, std::move(wavelengths)), path);
      },
      py::arg("path"), py::arg("cube"), py::arg("wavelengths") = std::vector<float>{});

  m.def(
      "slic",
      [](const FloatArray& cube, std::size_t target, const std::string& distance, std::optional<double> compactness,
         std::size_t max_iters) {
        SlicParams p;
        p.target_pixels_per_tile = target;
        p.distance = parse_distance(distance);
        p.compactness = compactness;
        p.max_iters = max_iters;
        const auto c = cube_from_array(cube, {});
        const auto r = slic_segment(c, p);
        return image_array(r.map.assignment, r.map.height, r.map.width);
      },
      py::arg("cube"), py::arg("target_pixels_per_tile") = 200, py::arg("distance") = "sam",
      py::arg("compactness") = py::none(), py::arg("max_iters") = 10,
      "Superpixel tiling; returns the per-pixel tile id map.");

  m.def(
      "tile_quality",
      [](const FloatArray& cube, const py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>& ids) {
        const auto c = cube_from_array(cube, {});
        if (static_cast<std::size_t>(ids.size()) != c.num_pixels()) throw ShapeError("tile map size differs from cube");
        const auto tiles = compute_tile_stats(c, std::span<const std::uint32_t>(ids.data(), ids.size()));
        py::dict out;
        std::vector<double> i, l2, sam, w;
        for (const auto& t : tiles) {
          const auto q = compute_quality(c, t);
          i.push_back(q.intensity);
          l2.push_back(q.l2);
          sam.push_back(q.sam);
          w.push_back(loss_weight(q));
        }
        out["intensity"] = py::array_t<double>(i.size(), i.data());
        out["l2"] = py::array_t<double>(l2.size(), l2.data());
        out["sam"] = py::array_t<double>(sam.size(), sam.data());
        out["weight"] = py::array_t<double>(w.size(), w.data());
        return out;
      },
      py::arg("cube"), py::arg("tiles"), "Per-tile intensity, L2 and SAM spread and loss weight.");

  m.def(
      "loss_weight",
      [](double intensity, double l2, double sam) { return loss_weight(TileQuality{intensity, l2, sam, false}); },
      py::arg("intensity"), py::arg("l2"), py::arg("sam"));

  m.def(
      "knn_graph",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& points, std::size_t k) {
        if (points.ndim() != 2 || points.shape(1) != 2) throw ShapeError("points must be (n, 2)");
        std::vector<Point2> pts;
        for (py::ssize_t i = 0; i < points.shape(0); ++i) pts.push_back({points.at(i, 0), points.at(i, 1)});
        const auto edges = build_knn_graph(pts, k);
        py::array_t<std::uint32_t> out({edges.size(), std::size_t{2}});
        auto o = out.mutable_unchecked<2>();
        for (std::size_t e = 0; e < edges.size(); ++e) {
          o(e, 0) = edges[e].first;
          o(e, 1) = edges[e].second;
        }
        return out;
      },
      py::arg("points"), py::arg("k") = 2, "Undirected kNN edges (i < j).");

  m.def(
      "roc_auc",
      [](std::vector<double> scores, std::vector<int> labels) { return roc_auc(scores, labels); },
      py::arg("scores"), py::arg("labels"));

  m.def(
      "metrics",
      [](std::vector<int> truth, std::vector<int> predicted) {
        return to_py(metrics_json(per_class_metrics(ConfusionMatrix::from_labels(truth, predicted, 3)),
                                  std::nullopt));
      },
      py::arg("truth"), py::arg("predicted"), "Per-class accuracy, F1 and IoU.");

  m.def(
      "generate_phantom",
      [](const py::object& spec, std::uint64_t seed) {
        PhantomSpec s = spec.is_none() ? PhantomSpec{} : resolve_run_config({{"synth", from_py(spec)}})
                                                              .at("synth")
                                                              .get<PhantomSpec>();
        s.validate();
        const auto ph = generate_phantom(s, seed);
        return py::make_tuple(cube_to_array(ph.cube), image_array(ph.labels, s.height, s.width),
                              image_array(ph.degradation, s.height, s.width));
      },
      py::arg("spec") = py::none(), py::arg("seed") = 0,
      "Returns (cube[h, w, c], labels[h, w], degradation[h, w]).");

  m.def("default_config", [] { return to_py(default_run_config()); });

  m.def(
      "resolve_config", [](const py::object& user) { return to_py(resolve_run_config(from_py(user))); },
      py::arg("config"));

  m.def(
      "run_pipeline",
      [](const py::object& config, const std::filesystem::path& out) {
        const auto user = from_py(config);
        nlohmann::json report;
        {
          py::gil_scoped_release release;
          report = run_pipeline(user, out);
        }
        return to_py(report);
      },
      py::arg("config"), py::arg("out"), "Synthesize, train, evaluate; returns the report.");
}
