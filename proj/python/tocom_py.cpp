// Python bindings: the coder, the synthetic world, the baseline, metrics,
// training and evaluation.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "tocom/harness.hpp"
#include "tocom/range_coder.hpp"

namespace py = pybind11;
using namespace tocom;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<rangecoder::CdfTable> tables_for(const std::vector<double>& mu, const std::vector<double>& sigma) {
  if (mu.size() != sigma.size()) throw ShapeError("mu and sigma lengths differ");
  const Shape s{mu.size()};
  return rangecoder::build_coding_tables({Tensor(s, mu), Tensor(s, sigma)});
}

inference::OccupancyGrid to_grid(const F64Array& a) {
  const auto buf = a.request();
  if (buf.ndim != 2 || buf.shape[0] != buf.shape[1]) throw ShapeError("occupancy grid must be a square 2-D array");
  inference::OccupancyGrid g(static_cast<std::size_t>(buf.shape[0]));
  std::copy_n(static_cast<const double*>(buf.ptr), g.cells.size(), g.cells.begin());
  return g;
}

const sim::Slice& pick_split(const sim::Splits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw Error("split must be train, val or test");
}

py::dict record_dict(const harness::RateDistortionRecord& r) {
  py::dict d;
  d["config_id"] = r.config_id;
  d["seed"] = r.seed;
  d["tau1"] = r.tau1;
  d["tau2"] = r.tau2;
  d["beta"] = r.beta;
  d["r_bit"] = r.r_bit;
  d["bits_measured"] = r.bits_measured;
  d["bits_estimated"] = r.bits_estimated;
  d["bce"] = r.bce;
  d["moda"] = r.moda;
  d["latency_ms"] = r.latency_ms;
  return d;
}

}  // namespace

PYBIND11_MODULE(_tocom, m) {
  m.doc() = "Task-oriented feature coding on a synthetic multi-camera world";

  py::register_exception<Error>(m, "TocomError", PyExc_RuntimeError);

  m.def("gu_pmf", &entropy::gu_pmf, py::arg("k"), py::arg("mu"), py::arg("sigma"),
        "Mass of integer k under a Gaussian convolved with a unit uniform.");

  m.def(
      "encode_symbols",
      [](const std::vector<std::int64_t>& symbols, const std::vector<double>& mu, const std::vector<double>& sigma) {
        if (symbols.size() != mu.size()) throw ShapeError("one (mu, sigma) pair per symbol");
        const auto tables = tables_for(mu, sigma);
        const auto s = rangecoder::rc_encode(symbols, tables);
        return py::bytes(reinterpret_cast<const char*>(s.bytes.data()), s.bytes.size());
      },
      py::arg("symbols"), py::arg("mu"), py::arg("sigma"));
  m.def(
      "decode_symbols",
      [](const py::bytes& data, const std::vector<double>& mu, const std::vector<double>& sigma) {
        const std::string raw = data;
        const auto tables = tables_for(mu, sigma);
        rangecoder::Bitstream s{{raw.begin(), raw.end()}};
        return rangecoder::rc_decode(s, tables, mu.size());
      },
      py::arg("data"), py::arg("mu"), py::arg("sigma"));

  py::class_<sim::WorldSpec>(m, "WorldSpec")
      .def(py::init<>())
      .def_readwrite("cameras", &sim::WorldSpec::cameras)
      .def_readwrite("agents", &sim::WorldSpec::agents)
      .def_readwrite("frames", &sim::WorldSpec::frames)
      .def_readwrite("grid", &sim::WorldSpec::grid)
      .def_readwrite("height", &sim::WorldSpec::height)
      .def_readwrite("width", &sim::WorldSpec::width)
      .def_readwrite("speed", &sim::WorldSpec::speed)
      .def_readwrite("jitter", &sim::WorldSpec::jitter)
      .def_readwrite("blob_radius", &sim::WorldSpec::blob_radius)
      .def_readwrite("blob_intensity", &sim::WorldSpec::blob_intensity)
      .def_readwrite("pixel_noise", &sim::WorldSpec::pixel_noise)
      .def_readwrite("background_contrast", &sim::WorldSpec::background_contrast)
      .def_readwrite("occlusion", &sim::WorldSpec::occlusion)
      .def_readwrite("seed", &sim::WorldSpec::seed)
      .def_static("from_yaml", &harness::parse_world_spec, py::arg("text"));

  py::class_<sim::Dataset>(m, "Dataset")
      .def_readonly("cameras", &sim::Dataset::cameras)
      .def_readonly("height", &sim::Dataset::height)
      .def_readonly("width", &sim::Dataset::width)
      .def_readonly("grid", &sim::Dataset::grid)
      .def("__len__", &sim::Dataset::size)
      .def("image",
           [](const sim::Dataset& d, std::size_t t, std::size_t k) {
             if (t >= d.size() || k >= d.cameras) throw py::index_error("frame or camera out of range");
             U8Array out({d.height, d.width});
             std::copy(d.frames[t].images[k].begin(), d.frames[t].images[k].end(), out.mutable_data());
             return out;
           },
           py::arg("t"), py::arg("k"), "Camera k's image at frame t as a (h, w) uint8 array.")
      .def("truth",
           [](const sim::Dataset& d, std::size_t t) {
             if (t >= d.size()) throw py::index_error("frame out of range");
             U8Array out({d.grid, d.grid});
             std::copy(d.frames[t].truth.begin(), d.frames[t].truth.end(), out.mutable_data());
             return out;
           },
           py::arg("t"))
      .def("save", [](const sim::Dataset& d, const std::string& path) { sim::save_dataset(path, d); })
      .def_static("load", &sim::load_dataset, py::arg("path"));

  m.def("gen_dataset", &sim::gen_dataset, py::arg("spec"));

  m.def(
      "baseline_encode",
      [](const U8Array& image, int q) {
        const auto buf = image.request();
        const std::span<const std::uint8_t> px(static_cast<const std::uint8_t*>(buf.ptr),
                                               static_cast<std::size_t>(buf.size));
        const auto f = harness::baseline_encode_frame(px, q);
        U8Array recon(buf.shape);
        std::copy(f.recon.begin(), f.recon.end(), recon.mutable_data());
        return py::make_tuple(f.bits, recon);
      },
      py::arg("image"), py::arg("q"), "Returns (bits, reconstruction).");

  m.def(
      "moda",
      [](const F64Array& pred, const F64Array& truth, double threshold, std::size_t radius) {
        return inference::moda_score(to_grid(pred), to_grid(truth), threshold, radius);
      },
      py::arg("pred"), py::arg("truth"), py::arg("threshold") = 0.5, py::arg("radius") = 0);
  m.def(
      "bce",
      [](const F64Array& pred, const F64Array& truth) {
        return inference::bce_distortion(to_grid(pred), to_grid(truth));
      },
      py::arg("pred"), py::arg("truth"));
  m.def("latency_ms", &harness::latency_ms, py::arg("bits"), py::arg("bandwidth_bps"));

  py::class_<training::Bundle>(m, "Checkpoint")
      .def_readonly("devices", &training::Bundle::devices)
      .def_readonly("grid", &training::Bundle::grid)
      .def_property_readonly("phase2_done", &training::Bundle::phase2_done)
      .def("save", [](const training::Bundle& b, const std::string& path) { training::save_bundle(path, b); })
      .def_static("load", &training::load_bundle, py::arg("path"));

  m.def(
      "train",
      [](const sim::Dataset& data, const std::string& config_yaml) {
        const auto cfg = harness::parse_train_config(config_yaml);
        const auto s = sim::split(data);
        py::gil_scoped_release release;
        return training::train_phase2(s.train, training::train_phase1(s.train, cfg), cfg);
      },
      py::arg("data"), py::arg("config_yaml") = "",
      "Runs both training phases on the train split; config keys as in the train section.");
  m.def(
      "evaluate",
      [](const training::Bundle& b, const sim::Dataset& data, const std::string& split, bool hierarchical_only,
         std::size_t moda_radius) {
        const auto s = sim::split(data);
        harness::EvalOptions opt;
        opt.moda_radius = moda_radius;
        if (hierarchical_only) opt.policy = pipeline::ModePolicy::hierarchical_only;
        return record_dict(harness::evaluate_run(b, pick_split(s, split), opt));
      },
      py::arg("checkpoint"), py::arg("data"), py::arg("split") = "test", py::arg("hierarchical_only") = false,
      py::arg("moda_radius") = 0);
  m.def(
      "run_sweep",
      [](const std::string& grid_yaml) {
        const auto g = harness::parse_sweep_grid(grid_yaml);
        std::vector<harness::RateDistortionRecord> records;
        {
          py::gil_scoped_release release;
          records = harness::run_sweep(g);
        }
        return harness::to_csv(records);
      },
      py::arg("grid_yaml"), "Runs a sweep grid and returns the CSV text.");
}
