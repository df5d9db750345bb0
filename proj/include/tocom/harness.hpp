#pragma once

// Experiment plumbing on the synthetic world: the pixel-codec baseline,
// held-out evaluation through the full encode/decode path, grid sweeps and
// the structured-text config files used by the CLI.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tocom/pipeline.hpp"
#include "tocom/training.hpp"
#include "tocom/world.hpp"

namespace tocom::harness {

// ---------------------------------------------------------------------------
// Baseline pixel codec

struct BaselineFrame {
  std::uint64_t bits = 0;          // side info + coded stream, no packet header
  double estimated_bits = 0.0;     // model cross-entropy of the symbols
  std::vector<std::uint8_t> recon;
};

inline constexpr std::size_t kBaselineSideBits = 32;

// Uniform quantization to q bits (1..8), one moment-fitted Gaussian per image,
// range-coded. Reconstruction is the bin midpoint.
BaselineFrame baseline_encode_frame(std::span<const std::uint8_t> image, int q);
// Inverse of the above on the coded bytes; used to check losslessness.
std::vector<std::uint8_t> baseline_decode_frame(std::span<const std::uint8_t> coded, std::size_t pixels, int q);
// The coded bytes (side info then stream) for a frame.
std::vector<std::uint8_t> baseline_bytes(std::span<const std::uint8_t> image, int q);

// ---------------------------------------------------------------------------
// Evaluation

struct RateDistortionRecord {
  std::string config_id;
  std::uint64_t seed = 0;
  std::size_t tau1 = 0;
  std::size_t tau2 = 0;
  double beta = 0.0;
  double r_bit = 0.0;
  double bits_measured = 0.0;   // mean bits per frame, all devices, headers included
  double bits_estimated = 0.0;  // mean model bits per frame, all devices
  double bce = 0.0;             // mean nats per frame
  double moda = 0.0;
  double latency_ms = 0.0;
};

struct EvalOptions {
  double bandwidth_bps = 1e6;
  double threshold = 0.5;
  std::size_t moda_radius = 0;
  pipeline::ModePolicy policy = pipeline::ModePolicy::automatic;
  std::string dump_bitmaps_dir;  // empty = no dump
  std::size_t dump_frames = 8;
  std::string config_id = "eval";
};

double latency_ms(double bits, double bandwidth_bps);

// Streams every frame of the slice through device encoders, the wire format
// and the server decoder, then fuses and scores the decoded features.
RateDistortionRecord evaluate_run(const training::Bundle& b, const sim::Slice& s, const EvalOptions& opt = {});

// Same scoring with the baseline codec in place of feature coding: the server
// runs the trained extractor and fusion on reconstructed images. Each frame
// per device is charged one packet header plus the baseline bits.
RateDistortionRecord evaluate_baseline(const training::Bundle& b, const sim::Slice& s, int q,
                                       const EvalOptions& opt = {});
// Bits only; bce and moda are NaN.
RateDistortionRecord baseline_rate_only(const sim::Slice& s, int q, const EvalOptions& opt = {});

// ---------------------------------------------------------------------------
// Config files

sim::WorldSpec parse_world_spec(const std::string& yaml_text);
training::TrainConfig parse_train_config(const std::string& yaml_text);
sim::WorldSpec load_world_spec(const std::string& path);

// `train` subcommand config: dataset location plus a train section.
struct TrainJob {
  std::string data;
  training::TrainConfig cfg;
};
TrainJob load_train_job(const std::string& path);

struct SweepGrid {
  sim::WorldSpec world;
  training::TrainConfig base;
  std::vector<std::uint64_t> seeds{1};
  std::vector<double> beta;
  std::vector<double> r_bit;
  std::vector<std::size_t> tau1;
  std::vector<std::size_t> tau2;
  std::string checkpoint_dir;  // empty = no persisted checkpoints
  bool train_inline = true;
  std::size_t workers = 1;
  EvalOptions eval;
};
SweepGrid parse_sweep_grid(const std::string& yaml_text);
SweepGrid load_sweep_grid(const std::string& path);

struct GridPoint {
  double beta;
  double r_bit;
  std::size_t tau1;
  std::size_t tau2;
  std::string id() const;
};
std::vector<GridPoint> expand(const SweepGrid& g);

// One record per (grid point, seed) in grid order. Phase 1 is trained once per
// (beta, r_bit, tau1, seed) and shared by every tau2 at that point. Missing
// checkpoints are an error unless train_inline is set.
std::vector<RateDistortionRecord> run_sweep(const SweepGrid& g);

void write_csv_header(std::ostream& os);
void write_csv_row(std::ostream& os, const RateDistortionRecord& r);
std::string to_csv(std::span<const RateDistortionRecord> records);

}  // namespace tocom::harness
