#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "tocom/diffcore.hpp"
#include "tocom/quantizer.hpp"
#include "tocom/tensor.hpp"

namespace tocom::inference {

inline constexpr double kProbClamp = 1e-7;

// G x G occupancy values, row-major.
struct OccupancyGrid {
  std::size_t g = 0;
  std::vector<double> cells;

  OccupancyGrid() = default;
  explicit OccupancyGrid(std::size_t side, double fill = 0.0) : g(side), cells(side * side, fill) {}
  std::size_t size() const { return cells.size(); }
};

// Conv trunk + dense head producing G*G logits; the head starts at zero so
// an untrained predictor outputs 0.5 everywhere.
struct Predictor {
  diffcore::NetSpec spec;
  diffcore::ParamStore params;
};

Predictor make_predictor(const Shape& input_shape, std::size_t grid, std::size_t hidden, std::mt19937_64& rng);

OccupancyGrid grid_from_logits(const Tensor& logits, std::size_t grid);

// y_hat_{t+tau} from the K current features; one Predictor per offset tau.
OccupancyGrid auxiliary_predict(std::span<const Tensor> features, const Predictor& predictor, std::size_t grid);

// Features from K devices at offsets 0..tau1 (slots[offset][k]). Slots for
// offsets before the sequence start are marked invalid and zero-filled.
struct FusionInput {
  std::vector<std::vector<Tensor>> slots;
  std::vector<bool> valid;

  std::size_t tau1() const { return slots.empty() ? 0 : slots.size() - 1; }
};

// Channel layout: for each device k, offsets 0..tau1; then one validity plane
// per offset 1..tau1.
Tensor assemble_fusion_input(const FusionInput& input);
Shape fusion_input_shape(const Shape& feature_shape, std::size_t devices, std::size_t tau1);

OccupancyGrid fuse_predict(const FusionInput& input, const Predictor& predictor, std::size_t grid);

// Sum over cells of binary cross-entropy in nats, predictions clamped to
// [1e-7, 1 - 1e-7].
double bce_distortion(const OccupancyGrid& pred, const OccupancyGrid& truth);

// BCE of sigmoid(logits) against the truth and its gradient w.r.t. the logits.
struct LogitLoss {
  double nats = 0.0;
  Tensor d_logits;
};
LogitLoss bce_from_logits(const Tensor& logits, const OccupancyGrid& truth);

struct DetectionCounts {
  std::size_t ground_truth = 0;
  std::size_t missed = 0;
  std::size_t false_positive = 0;
};

// Cells with p >= threshold are detections; a detection matches an unmatched
// ground-truth cell within Chebyshev distance `radius` (0 = exact cell).
DetectionCounts count_detections(const OccupancyGrid& pred, const OccupancyGrid& truth, double threshold,
                                 std::size_t radius = 0);
double moda_score(const OccupancyGrid& pred, const OccupancyGrid& truth, double threshold, std::size_t radius = 0);
double moda_from_counts(const DetectionCounts& c);

// Binary PGM (P5). Values are linearly mapped from [lo, hi] to [0, 255].
void write_pgm(const std::string& path, std::size_t width, std::size_t height, std::span<const double> values,
               double lo, double hi);
// Tiles the channels of a (C,h,w) tensor side by side.
void write_feature_pgm(const std::string& path, const Tensor& map);

}  // namespace tocom::inference
