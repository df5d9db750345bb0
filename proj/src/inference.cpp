#include "tocom/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "tocom/error.hpp"

namespace tocom::inference {

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_grid(const OccupancyGrid& a, const OccupancyGrid& b) {
  if (a.g != b.g || a.cells.size() != b.cells.size() || a.cells.size() != a.g * a.g) {
    throw ShapeError("occupancy grids differ in shape: " + std::to_string(a.g) + " vs " + std::to_string(b.g));
  }
}

}  // namespace

Predictor make_predictor(const Shape& input_shape, std::size_t grid, std::size_t hidden, std::mt19937_64& rng) {
  using namespace diffcore;
  if (input_shape.size() != 3) throw ShapeError("predictor expects (C,h,w) input");
  const std::size_t narrow = 4;  // bottleneck channels before the dense map
  const std::size_t flat = narrow * input_shape[1] * input_shape[2];
  Predictor p;
  p.spec.input_shape = input_shape;
  p.spec.layers = {conv2d(input_shape[0], hidden, 3, 1, 1), leaky_relu(), conv2d(hidden, narrow, 1, 1, 0),
                   leaky_relu(), reshape({flat}), dense(flat, grid * grid)};
  p.params = init_params(p.spec, rng);
  set_output_layer(p.spec, p.params, {});
  return p;
}

OccupancyGrid grid_from_logits(const Tensor& logits, std::size_t grid) {
  if (logits.size() != grid * grid) throw ShapeError("logit count does not match grid " + std::to_string(grid));
  OccupancyGrid out(grid);
  for (std::size_t i = 0; i < logits.size(); ++i) out.cells[i] = sigmoid(logits[i]);
  return out;
}

OccupancyGrid auxiliary_predict(std::span<const Tensor> features, const Predictor& predictor, std::size_t grid) {
  if (features.empty()) throw ShapeError("auxiliary_predict: no features");
  for (const auto& f : features) {
    if (f.shape != features.front().shape) throw ShapeError("auxiliary_predict: device features differ in shape");
  }
  return grid_from_logits(diffcore::graph_forward(predictor.spec, predictor.params, concat_channels(features)), grid);
}

Shape fusion_input_shape(const Shape& feature_shape, std::size_t devices, std::size_t tau1) {
  return {devices * feature_shape[0] * (tau1 + 1) + tau1, feature_shape[1], feature_shape[2]};
}

Tensor assemble_fusion_input(const FusionInput& input) {
  if (input.slots.empty() || input.valid.size() != input.slots.size()) {
    throw ShapeError("fusion input: slot/validity mismatch");
  }
  const std::size_t k_count = input.slots.front().size();
  if (k_count == 0) throw ShapeError("fusion input: no devices");
  const Shape& fshape = input.slots.front().front().shape;
  for (const auto& slot : input.slots) {
    if (slot.size() != k_count) throw ShapeError("fusion input: inconsistent device count across offsets");
    for (const auto& f : slot) {
      if (f.shape != fshape) throw ShapeError("fusion input: feature shapes differ");
    }
  }
  const std::size_t tau1 = input.tau1();
  const std::size_t plane = fshape[1] * fshape[2];
  const std::size_t fsize = numel(fshape);
  Tensor out(fusion_input_shape(fshape, k_count, tau1));
  auto it = out.data.begin();
  for (std::size_t k = 0; k < k_count; ++k) {
    for (std::size_t off = 0; off <= tau1; ++off) {
      if (input.valid[off]) {
        std::copy(input.slots[off][k].data.begin(), input.slots[off][k].data.end(), it);
      }
      it += static_cast<std::ptrdiff_t>(fsize);
    }
  }
  for (std::size_t off = 1; off <= tau1; ++off) {
    std::fill(it, it + static_cast<std::ptrdiff_t>(plane), input.valid[off] ? 1.0 : 0.0);
    it += static_cast<std::ptrdiff_t>(plane);
  }
  return out;
}

OccupancyGrid fuse_predict(const FusionInput& input, const Predictor& predictor, std::size_t grid) {
  return grid_from_logits(diffcore::graph_forward(predictor.spec, predictor.params, assemble_fusion_input(input)),
                          grid);
}

double bce_distortion(const OccupancyGrid& pred, const OccupancyGrid& truth) {
  check_grid(pred, truth);
  double total = 0.0;
  for (std::size_t i = 0; i < pred.cells.size(); ++i) {
    const double p = std::clamp(pred.cells[i], kProbClamp, 1.0 - kProbClamp);
    const double y = truth.cells[i];
    total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  return total;
}

LogitLoss bce_from_logits(const Tensor& logits, const OccupancyGrid& truth) {
  if (logits.size() != truth.cells.size()) throw ShapeError("bce_from_logits: size mismatch");
  LogitLoss out{0.0, Tensor(logits.shape)};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = sigmoid(logits[i]);
    const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    const double y = truth.cells[i];
    out.nats -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
    out.d_logits[i] = p - y;
  }
  return out;
}

DetectionCounts count_detections(const OccupancyGrid& pred, const OccupancyGrid& truth, double threshold,
                                 std::size_t radius) {
  check_grid(pred, truth);
  const std::size_t g = pred.g;
  std::vector<bool> gt_taken(truth.cells.size(), false);
  DetectionCounts c;
  for (double y : truth.cells) c.ground_truth += y >= 0.5 ? 1 : 0;
  const auto r = static_cast<std::ptrdiff_t>(radius);
  for (std::size_t i = 0; i < pred.cells.size(); ++i) {
    if (pred.cells[i] < threshold) continue;
    const auto py = static_cast<std::ptrdiff_t>(i / g), px = static_cast<std::ptrdiff_t>(i % g);
    std::ptrdiff_t best = -1;
    std::ptrdiff_t best_dist = r + 1;
    for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
      for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
        const auto y = py + dy, x = px + dx;
        if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(g) || x >= static_cast<std::ptrdiff_t>(g)) continue;
        const auto j = static_cast<std::size_t>(y) * g + static_cast<std::size_t>(x);
        if (truth.cells[j] < 0.5 || gt_taken[j]) continue;
        const auto d = std::max(std::abs(dy), std::abs(dx));
        if (d < best_dist) {
          best_dist = d;
          best = static_cast<std::ptrdiff_t>(j);
        }
      }
    }
    if (best >= 0) {
      gt_taken[static_cast<std::size_t>(best)] = true;
    } else {
      ++c.false_positive;
    }
  }
  for (std::size_t j = 0; j < truth.cells.size(); ++j) {
    if (truth.cells[j] >= 0.5 && !gt_taken[j]) ++c.missed;
  }
  return c;
}

double moda_from_counts(const DetectionCounts& c) {
  return 1.0 - static_cast<double>(c.missed + c.false_positive) /
                   static_cast<double>(std::max<std::size_t>(1, c.ground_truth));
}

double moda_score(const OccupancyGrid& pred, const OccupancyGrid& truth, double threshold, std::size_t radius) {
  return moda_from_counts(count_detections(pred, truth, threshold, radius));
}

void write_pgm(const std::string& path, std::size_t width, std::size_t height, std::span<const double> values,
               double lo, double hi) {
  if (values.size() != width * height) throw ShapeError("write_pgm: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  const double span = hi > lo ? hi - lo : 1.0;
  for (double v : values) {
    const double s = std::clamp((v - lo) / span, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(s * 255.0))));
  }
}

void write_feature_pgm(const std::string& path, const Tensor& map) {
  if (map.rank() != 3) throw ShapeError("write_feature_pgm: expected (C,h,w)");
  const std::size_t c = map.shape[0], h = map.shape[1], w = map.shape[2];
  std::vector<double> tiled(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) tiled[y * (c * w) + ch * w + x] = map[(ch * h + y) * w + x];
    }
  }
  const double hi = map.empty() ? 1.0 : *std::max_element(map.data.begin(), map.data.end());
  write_pgm(path, c * w, h, tiled, 0.0, hi);
}

}  // namespace tocom::inference
