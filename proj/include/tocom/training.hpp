#pragma once

// Losses and the two-phase training schedule.
//
// Phase 1 trains the per-device extractors, the shared hyperprior model and
// the per-offset auxiliary predictors with a rate-constrained objective on
// noise-relaxed features. Phase 2 freezes those and trains the per-device
// temporal entropy models and the fusion predictor on hard-quantized
// features.

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tocom/checkpoint.hpp"
#include "tocom/diffcore.hpp"
#include "tocom/entropy_models.hpp"
#include "tocom/error.hpp"
#include "tocom/inference.hpp"
#include "tocom/pipeline.hpp"
#include "tocom/world.hpp"

namespace tocom::training {

struct ModelConfig {
  std::size_t feature_channels = 8;
  std::size_t extractor_hidden = 8;
  std::size_t hyper_channels = 4;
  std::size_t hyper_hidden = 64;
  std::size_t temporal_hidden = 12;
  std::size_t predictor_hidden = 12;
};

struct TrainConfig {
  double beta = 0.01;
  double r_bit = 0.0;         // bits per frame (summed over devices)
  std::size_t tau1 = 1;
  std::size_t tau2 = 1;
  std::vector<double> weights;  // w_0..w_tau1; empty means all ones
  std::size_t batch_size = 8;
  std::size_t steps_phase1 = 1500;
  std::size_t steps_phase2 = 1000;
  double lr = 3e-3;
  std::uint64_t seed = 1;
  ModelConfig model;

  void validate() const;
  std::vector<double> effective_weights() const;
};

struct LossReport {
  double distortion_nats = 0.0;
  double rate_bits_estimated = 0.0;
  double rate_term_after_max = 0.0;  // max(rate_bits_estimated, r_bit)
  double total = 0.0;                // distortion + beta * rate_term_after_max
};

// Every trainable piece of the system for K devices.
struct Bundle {
  TrainConfig cfg;
  std::size_t devices = 0;
  std::size_t grid = 0;
  Shape image_shape;
  diffcore::NetSpec extractor;                 // shared architecture
  std::vector<diffcore::ParamStore> theta;     // per device
  entropy::HyperModel hyper;                   // shared
  std::vector<entropy::TemporalModel> temporal;  // per device, empty before phase 2 or when tau2 = 0
  std::vector<inference::Predictor> aux;       // offsets 0..tau1
  std::optional<inference::Predictor> fusion;  // set by phase 2
  std::size_t fusion_tau1 = 0;                 // history depth of the fusion input

  Shape feature_shape() const { return extractor.output_shape(); }
  bool phase2_done() const { return fusion.has_value(); }
  std::shared_ptr<const pipeline::DeviceModels> device_models(std::size_t k) const;
};

diffcore::NetSpec make_extractor_spec(const Shape& image_shape, const ModelConfig& m);
// Freshly initialized phase-1 models.
Bundle init_bundle(const TrainConfig& cfg, std::size_t devices, std::size_t grid, const Shape& image_shape);

std::vector<CheckpointEntry> bundle_to_entries(const Bundle& b);
Bundle bundle_from_entries(std::span<const CheckpointEntry> entries);
void save_bundle(const std::string& path, const Bundle& b);
Bundle load_bundle(const std::string& path);

// Gradients for every phase-1 parameter store, laid out like Bundle.
struct Phase1Grads {
  std::vector<diffcore::ParamStore> theta;
  diffcore::ParamStore hyper_encoder;
  diffcore::ParamStore hyper_decoder;
  diffcore::ParamStore prior;
  std::vector<diffcore::ParamStore> aux;
};

// One training example for L1: K frames at time t and targets y_t..y_{t+tau1}.
struct L1Example {
  std::vector<Tensor> frames;
  std::vector<inference::OccupancyGrid> targets;
};

struct L1Result {
  LossReport report;
  Phase1Grads grads;
};
L1Result loss_L1(std::span<const L1Example> batch, const Bundle& b, const TrainConfig& cfg, std::mt19937_64& rng);

// Window of hard-quantized features for one device: history (oldest first,
// length tau2) and the current feature.
struct L2Example {
  std::vector<QuantizedFeature> history;
  QuantizedFeature current;
};
struct L2Result {
  double bits = 0.0;  // mean over the batch
  diffcore::ParamStore grads;
};
L2Result loss_L2(std::span<const L2Example> batch, const entropy::TemporalModel& model);

struct L3Example {
  inference::FusionInput input;
  inference::OccupancyGrid target;
};
struct L3Result {
  double nats = 0.0;  // mean BCE over the batch
  diffcore::ParamStore grads;
};
L3Result loss_L3(std::span<const L3Example> batch, const inference::Predictor& fusion);

// Thrown when a loss or gradient turns non-finite; carries the parameters
// from before the failing step.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, std::shared_ptr<const Bundle> last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const Bundle& last_good() const { return *last_good_; }

 private:
  std::shared_ptr<const Bundle> last_good_;
};

struct TrainLog {
  std::ostream* csv = nullptr;  // step,phase,loss_total,distortion_nats,rate_bits,lr,seed
  std::size_t every = 50;
};
void write_log_header(std::ostream& os);

// Frames [begin, end) of `train` are used; examples are drawn uniformly.
Bundle train_phase1(const sim::Slice& train, const TrainConfig& cfg, const TrainLog& log = {});
Bundle train_phase2(const sim::Slice& train, Bundle phase1, const TrainConfig& cfg, const TrainLog& log = {});

// Hard features of every frame in the slice: result[t - begin][k].
std::vector<std::vector<QuantizedFeature>> hard_features(const sim::Slice& s, const Bundle& b);

// Fusion input at absolute frame t. Offsets reaching before `first` are
// invalid. `feats` is indexed from `first`.
inference::FusionInput fusion_input_at(const std::vector<std::vector<QuantizedFeature>>& feats,
                                       std::size_t first, std::size_t t, std::size_t tau1);

// Exact enumeration over a joint pmf p(y, z) (rows y, columns z) and a
// candidate conditional q(y | z) with the same layout (columns sum to 1).
struct Table2 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> p;
  double at(std::size_t r, std::size_t c) const { return p[r * cols + c]; }
};
struct BoundReport {
  double cross_entropy = 0.0;        // bits
  double conditional_entropy = 0.0;  // H(Y | Z), bits
  double gap = 0.0;
};
BoundReport verify_variational_bound(const Table2& joint, const Table2& q);

double entropy_bits(std::span<const double> pmf);
// H(z) from a joint p(z, v) (rows z) and H(z, v).
struct JointMarginal {
  double marginal = 0.0;
  double joint = 0.0;
};
JointMarginal joint_marginal_entropy(const Table2& joint);

}  // namespace tocom::training
