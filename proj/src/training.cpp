#include "tocom/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tocom::training {

namespace {

using diffcore::ParamStore;

constexpr double kMetaVersion = 1.0;

Tensor scaled(const Tensor& t, double s) {
  Tensor out = t;
  for (double& v : out.data) v *= s;
  return out;
}

void add_into(Tensor& dst, const Tensor& src, double s = 1.0) {
  if (dst.size() != src.size()) throw ShapeError("gradient size mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

bool finite_store(const ParamStore& p) {
  return std::all_of(p.entries.begin(), p.entries.end(), [](const auto& e) { return e.value.all_finite(); });
}

std::mt19937_64 init_rng(std::uint64_t seed) { return std::mt19937_64(seed ^ 0x9e3779b97f4a7c15ULL); }

void write_row(std::ostream& os, std::size_t step, const char* phase, double total, double dist, double rate,
               double lr, std::uint64_t seed) {
  os << step << ',' << phase << ',' << total << ',' << dist << ',' << rate << ',' << lr << ',' << seed << '\n';
}

}  // namespace

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error("train config: " + m); };
  if (!std::isfinite(beta) || beta < 0) bad("beta must be finite and >= 0");
  if (!std::isfinite(r_bit) || r_bit < 0) bad("r_bit must be finite and >= 0");
  if (batch_size == 0) bad("batch_size must be >= 1");
  if (!(lr > 0) || !std::isfinite(lr)) bad("lr must be > 0");
  if (!weights.empty() && weights.size() != tau1 + 1) bad("weights must have tau1 + 1 entries");
  for (double w : weights) {
    if (!(w > 0) || !std::isfinite(w)) bad("weights must be > 0");
  }
  if (model.feature_channels == 0 || model.extractor_hidden == 0 || model.hyper_channels == 0 ||
      model.hyper_hidden == 0 || model.temporal_hidden == 0 || model.predictor_hidden == 0) {
    bad("model widths must be >= 1");
  }
}

std::vector<double> TrainConfig::effective_weights() const {
  return weights.empty() ? std::vector<double>(tau1 + 1, 1.0) : weights;
}

std::shared_ptr<const pipeline::DeviceModels> Bundle::device_models(std::size_t k) const {
  auto m = std::make_shared<pipeline::DeviceModels>();
  m->extractor = extractor;
  m->extractor_params = theta.at(k);
  m->hyper = hyper;
  if (!temporal.empty()) m->temporal = temporal.at(k);
  return m;
}

diffcore::NetSpec make_extractor_spec(const Shape& image_shape, const ModelConfig& m) {
  using namespace diffcore;
  if (image_shape.size() != 3) throw ShapeError("extractor expects (C,h,w) images");
  NetSpec s;
  s.input_shape = image_shape;
  s.layers = {conv2d(image_shape[0], m.extractor_hidden, 5, 2, 2), leaky_relu(),
              conv2d(m.extractor_hidden, m.extractor_hidden, 3, 1, 1), leaky_relu(),
              conv2d(m.extractor_hidden, m.feature_channels, 3, 2, 1)};
  return s;
}

Bundle init_bundle(const TrainConfig& cfg, std::size_t devices, std::size_t grid, const Shape& image_shape) {
  cfg.validate();
  if (devices == 0) throw Error("init_bundle: need at least one device");
  auto rng = init_rng(cfg.seed);
  Bundle b;
  b.cfg = cfg;
  b.devices = devices;
  b.grid = grid;
  b.image_shape = image_shape;
  b.extractor = make_extractor_spec(image_shape, cfg.model);
  for (std::size_t k = 0; k < devices; ++k) b.theta.push_back(diffcore::init_params(b.extractor, rng));
  const Shape fshape = b.feature_shape();
  b.hyper = entropy::make_hyper_model(fshape, cfg.model.hyper_channels, cfg.model.hyper_hidden, rng);
  Shape aux_in = fshape;
  aux_in[0] *= devices;
  for (std::size_t tau = 0; tau <= cfg.tau1; ++tau) {
    b.aux.push_back(inference::make_predictor(aux_in, grid, cfg.model.predictor_hidden, rng));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Checkpoint layout

std::vector<CheckpointEntry> bundle_to_entries(const Bundle& b) {
  const TrainConfig& c = b.cfg;
  std::vector<double> meta = {kMetaVersion,
                              static_cast<double>(b.devices),
                              static_cast<double>(b.grid),
                              static_cast<double>(b.image_shape.at(0)),
                              static_cast<double>(b.image_shape.at(1)),
                              static_cast<double>(b.image_shape.at(2)),
                              static_cast<double>(c.tau1),
                              static_cast<double>(c.tau2),
                              static_cast<double>(c.model.feature_channels),
                              static_cast<double>(c.model.extractor_hidden),
                              static_cast<double>(c.model.hyper_channels),
                              static_cast<double>(c.model.hyper_hidden),
                              static_cast<double>(c.model.temporal_hidden),
                              static_cast<double>(c.model.predictor_hidden),
                              c.beta,
                              c.r_bit,
                              static_cast<double>(c.batch_size),
                              static_cast<double>(c.steps_phase1),
                              static_cast<double>(c.steps_phase2),
                              c.lr,
                              static_cast<double>(c.seed >> 32),
                              static_cast<double>(c.seed & 0xffffffffULL),
                              b.phase2_done() ? 1.0 : 0.0,
                              b.temporal.empty() ? 0.0 : 1.0,
                              static_cast<double>(b.fusion_tau1)};
  std::vector<CheckpointEntry> out;
  const std::size_t n = meta.size();
  out.push_back({"meta/config", Tensor({n}, std::move(meta))});
  const auto w = c.effective_weights();
  out.push_back({"meta/weights", Tensor({w.size()}, w)});
  for (std::size_t k = 0; k < b.devices; ++k) append_section(out, "theta_" + std::to_string(k), b.theta[k]);
  append_section(out, "hyper_enc", b.hyper.encoder_params);
  append_section(out, "hyper_dec", b.hyper.decoder_params);
  append_section(out, "prior", b.hyper.prior.params);
  for (std::size_t tau = 0; tau < b.aux.size(); ++tau) append_section(out, "aux_" + std::to_string(tau), b.aux[tau].params);
  for (std::size_t k = 0; k < b.temporal.size(); ++k) {
    append_section(out, "temporal_" + std::to_string(k), b.temporal[k].params);
  }
  if (b.fusion) append_section(out, "fusion", b.fusion->params);
  return out;
}

Bundle bundle_from_entries(std::span<const CheckpointEntry> entries) {
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& e : entries) {
      if (e.name == name) return e.value;
    }
    throw FormatError("checkpoint is missing '" + name + "'");
  };
  const Tensor& meta = find("meta/config");
  if (meta.size() < 25 || meta[0] != kMetaVersion) throw FormatError("checkpoint meta/config has an unknown layout");
  auto u = [&](std::size_t i) { return static_cast<std::size_t>(meta[i]); };
  TrainConfig c;
  c.tau1 = u(6);
  c.tau2 = u(7);
  c.model = {u(8), u(9), u(10), u(11), u(12), u(13)};
  c.beta = meta[14];
  c.r_bit = meta[15];
  c.batch_size = u(16);
  c.steps_phase1 = u(17);
  c.steps_phase2 = u(18);
  c.lr = meta[19];
  c.seed = (static_cast<std::uint64_t>(meta[20]) << 32) | static_cast<std::uint64_t>(meta[21]);
  c.weights = find("meta/weights").data;
  const bool has_fusion = meta[22] != 0.0;
  const bool has_temporal = meta[23] != 0.0;

  Bundle b = init_bundle(c, u(1), u(2), {u(3), u(4), u(5)});
  b.fusion_tau1 = u(24);
  auto load = [&](const std::string& section, const diffcore::NetSpec* spec, ParamStore& dst) {
    ParamStore p = extract_section(entries, section);
    if (p.size() == 0) throw FormatError("checkpoint is missing section '" + section + "'");
    if (spec != nullptr) {
      diffcore::validate_params(*spec, p);
    } else if (p.size() != dst.size()) {
      throw FormatError("checkpoint section '" + section + "' has the wrong entry count");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p.entries[i].name != dst.entries[i].name || p.entries[i].value.shape != dst.entries[i].value.shape) {
        throw FormatError("checkpoint section '" + section + "' does not match the architecture");
      }
    }
    dst = std::move(p);
  };
  for (std::size_t k = 0; k < b.devices; ++k) load("theta_" + std::to_string(k), &b.extractor, b.theta[k]);
  load("hyper_enc", &b.hyper.encoder, b.hyper.encoder_params);
  load("hyper_dec", &b.hyper.decoder, b.hyper.decoder_params);
  load("prior", nullptr, b.hyper.prior.params);
  for (std::size_t tau = 0; tau < b.aux.size(); ++tau) {
    load("aux_" + std::to_string(tau), &b.aux[tau].spec, b.aux[tau].params);
  }
  std::mt19937_64 scratch(0);
  if (has_temporal) {
    for (std::size_t k = 0; k < b.devices; ++k) {
      b.temporal.push_back(entropy::make_temporal_model(b.feature_shape(), c.tau2, c.model.temporal_hidden, scratch));
      load("temporal_" + std::to_string(k), &b.temporal[k].transform, b.temporal[k].params);
    }
  }
  if (has_fusion) {
    b.fusion = inference::make_predictor(inference::fusion_input_shape(b.feature_shape(), b.devices, b.fusion_tau1), b.grid,
                                         c.model.predictor_hidden, scratch);
    load("fusion", &b.fusion->spec, b.fusion->params);
  }
  return b;
}

void save_bundle(const std::string& path, const Bundle& b) { save_checkpoint(path, bundle_to_entries(b)); }

Bundle load_bundle(const std::string& path) { return bundle_from_entries(load_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Losses

L1Result loss_L1(std::span<const L1Example> batch, const Bundle& b, const TrainConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (batch.empty()) throw Error("loss_L1: empty batch");
  if (b.aux.size() != cfg.tau1 + 1) throw ShapeError("loss_L1: bundle has the wrong number of auxiliary predictors");
  const auto w = cfg.effective_weights();
  const std::size_t K = b.devices;
  const std::size_t C = b.feature_shape()[0];
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  struct DeviceFwd {
    diffcore::Trace extractor;
    entropy::HyperResult hyper;
    entropy::GaussianParams prior;
    entropy::RelaxedRate rate_z;
    entropy::RelaxedRate rate_v;
  };
  struct ExampleFwd {
    std::vector<DeviceFwd> dev;
    Tensor aux_input;
    std::vector<diffcore::Trace> aux;
    std::vector<Tensor> d_logits;
  };

  // Noise draw order per example: for each device, the feature noise, then
  // the hyper-latent noise.
  std::vector<ExampleFwd> fwd(batch.size());
  double dist_sum = 0.0, rate_sum = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const L1Example& ex = batch[n];
    if (ex.frames.size() != K) throw ShapeError("loss_L1: example has the wrong number of frames");
    if (ex.targets.size() != cfg.tau1 + 1) throw ShapeError("loss_L1: example has the wrong number of targets");
    ExampleFwd& f = fwd[n];
    std::vector<Tensor> noisy;
    for (std::size_t k = 0; k < K; ++k) {
      DeviceFwd d;
      d.extractor = diffcore::forward_trace(b.extractor, b.theta[k], ex.frames[k]);
      const Tensor& z = d.extractor.output();
      Tensor zt = quantizer::add_uniform_noise(z, rng);
      d.hyper = entropy::hyper_path(z, b.hyper, entropy::Mode::train, &rng);
      d.prior = entropy::factorized_params(b.hyper.prior, d.hyper.v_coded.shape);
      d.rate_z = entropy::relaxed_bits(zt, d.hyper.feature_params);
      d.rate_v = entropy::relaxed_bits(d.hyper.v_coded, d.prior);
      rate_sum += d.rate_z.bits + d.rate_v.bits;
      noisy.push_back(std::move(zt));
      f.dev.push_back(std::move(d));
    }
    f.aux_input = concat_channels(noisy);
    for (std::size_t tau = 0; tau <= cfg.tau1; ++tau) {
      f.aux.push_back(diffcore::forward_trace(b.aux[tau].spec, b.aux[tau].params, f.aux_input));
      auto l = inference::bce_from_logits(f.aux.back().output(), ex.targets[tau]);
      dist_sum += w[tau] * l.nats;
      f.d_logits.push_back(std::move(l.d_logits));
    }
  }

  L1Result res;
  LossReport& r = res.report;
  r.distortion_nats = dist_sum * inv_b;
  r.rate_bits_estimated = rate_sum * inv_b;
  const bool gate_open = r.rate_bits_estimated >= cfg.r_bit;
  r.rate_term_after_max = std::max(r.rate_bits_estimated, cfg.r_bit);
  r.total = r.distortion_nats + cfg.beta * r.rate_term_after_max;
  if (!std::isfinite(r.total)) throw NumericError("loss_L1: non-finite loss");

  Phase1Grads& g = res.grads;
  for (const auto& t : b.theta) g.theta.push_back(t.zeros_like());
  g.hyper_encoder = b.hyper.encoder_params.zeros_like();
  g.hyper_decoder = b.hyper.decoder_params.zeros_like();
  g.prior = b.hyper.prior.params.zeros_like();
  for (const auto& a : b.aux) g.aux.push_back(a.params.zeros_like());

  const double rs = gate_open ? cfg.beta * inv_b : 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    ExampleFwd& f = fwd[n];
    Tensor d_aux_in(f.aux_input.shape);
    for (std::size_t tau = 0; tau <= cfg.tau1; ++tau) {
      const double s = w[tau] * inv_b;
      auto gr = diffcore::backward_trace(b.aux[tau].spec, b.aux[tau].params, f.aux[tau], scaled(f.d_logits[tau], s));
      diffcore::accumulate(g.aux[tau], gr.params);
      add_into(d_aux_in, gr.input);
    }
    for (std::size_t k = 0; k < K; ++k) {
      DeviceFwd& d = f.dev[k];
      Tensor dz = slice_channels(d_aux_in, k * C, C);
      if (rs != 0.0) {
        add_into(dz, d.rate_z.d_value, rs);
        const Tensor d_raw = entropy::split_params_backward(d.hyper.decoder_trace.output(), scaled(d.rate_z.d_mu, rs),
                                                            scaled(d.rate_z.d_sigma, rs));
        auto gd = diffcore::backward_trace(b.hyper.decoder, b.hyper.decoder_params, d.hyper.decoder_trace, d_raw);
        diffcore::accumulate(g.hyper_decoder, gd.params);
        Tensor dv = std::move(gd.input);
        add_into(dv, d.rate_v.d_value, rs);
        diffcore::accumulate(g.prior, entropy::factorized_params_backward(b.hyper.prior, d.hyper.v_coded.shape,
                                                                          scaled(d.rate_v.d_mu, rs),
                                                                          scaled(d.rate_v.d_sigma, rs)));
        auto ge = diffcore::backward_trace(b.hyper.encoder, b.hyper.encoder_params, d.hyper.encoder_trace, dv);
        diffcore::accumulate(g.hyper_encoder, ge.params);
        add_into(dz, ge.input);
      }
      auto gx = diffcore::backward_trace(b.extractor, b.theta[k], d.extractor, dz);
      diffcore::accumulate(g.theta[k], gx.params);
    }
  }
  return res;
}

L2Result loss_L2(std::span<const L2Example> batch, const entropy::TemporalModel& model) {
  if (batch.empty()) throw Error("loss_L2: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  L2Result res;
  res.grads = model.params.zeros_like();
  for (const auto& ex : batch) {
    if (ex.history.size() != model.order) {
      throw Error("loss_L2: history length " + std::to_string(ex.history.size()) + " does not match tau2 = " +
                  std::to_string(model.order));
    }
    const Tensor input = entropy::temporal_input(ex.history, model);
    const auto trace = diffcore::forward_trace(model.transform, model.params, input);
    const auto params = entropy::split_params(trace.output());
    const auto rate = entropy::relaxed_bits(ex.current.to_tensor(), params);
    res.bits += rate.bits * inv_b;
    const Tensor d_raw =
        entropy::split_params_backward(trace.output(), scaled(rate.d_mu, inv_b), scaled(rate.d_sigma, inv_b));
    diffcore::accumulate(res.grads, diffcore::backward_trace(model.transform, model.params, trace, d_raw).params);
  }
  if (!std::isfinite(res.bits)) throw NumericError("loss_L2: non-finite loss");
  return res;
}

L3Result loss_L3(std::span<const L3Example> batch, const inference::Predictor& fusion) {
  if (batch.empty()) throw Error("loss_L3: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  L3Result res;
  res.grads = fusion.params.zeros_like();
  for (const auto& ex : batch) {
    const Tensor input = inference::assemble_fusion_input(ex.input);
    if (input.shape != fusion.spec.input_shape) {
      throw ShapeError("loss_L3: fusion input " + shape_str(input.shape) + " does not match predictor input " +
                       shape_str(fusion.spec.input_shape));
    }
    const auto trace = diffcore::forward_trace(fusion.spec, fusion.params, input);
    auto l = inference::bce_from_logits(trace.output(), ex.target);
    res.nats += l.nats * inv_b;
    diffcore::accumulate(res.grads,
                         diffcore::backward_trace(fusion.spec, fusion.params, trace, scaled(l.d_logits, inv_b)).params);
  }
  if (!std::isfinite(res.nats)) throw NumericError("loss_L3: non-finite loss");
  return res;
}

// ---------------------------------------------------------------------------
// Orchestration

void write_log_header(std::ostream& os) { os << "step,phase,loss_total,distortion_nats,rate_bits,lr,seed\n"; }

Bundle train_phase1(const sim::Slice& train, const TrainConfig& cfg, const TrainLog& log) {
  cfg.validate();
  const sim::Dataset& data = *train.data;
  if (train.size() <= cfg.tau1) throw Error("train_phase1: training slice shorter than tau1 + 1 frames");
  Bundle b = init_bundle(cfg, data.cameras, data.grid, {1, data.height, data.width});
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(train.begin, train.end - cfg.tau1 - 1);
  const diffcore::AdamConfig adam{cfg.lr};

  std::vector<diffcore::OptState> opt_theta;
  for (const auto& t : b.theta) opt_theta.push_back(diffcore::make_opt_state(t, adam));
  auto opt_enc = diffcore::make_opt_state(b.hyper.encoder_params, adam);
  auto opt_dec = diffcore::make_opt_state(b.hyper.decoder_params, adam);
  auto opt_prior = diffcore::make_opt_state(b.hyper.prior.params, adam);
  std::vector<diffcore::OptState> opt_aux;
  for (const auto& a : b.aux) opt_aux.push_back(diffcore::make_opt_state(a.params, adam));

  std::vector<L1Example> batch(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.steps_phase1; ++step) {
    for (auto& ex : batch) {
      const std::size_t t = pick(rng);
      ex.frames.clear();
      ex.targets.clear();
      for (std::size_t k = 0; k < data.cameras; ++k) ex.frames.push_back(data.image(t, k));
      for (std::size_t tau = 0; tau <= cfg.tau1; ++tau) ex.targets.push_back(data.truth(t + tau));
    }
    auto snapshot = std::make_shared<const Bundle>(b);
    try {
      auto res = loss_L1(batch, b, cfg, rng);
      for (std::size_t k = 0; k < b.devices; ++k) diffcore::adam_step(b.theta[k], res.grads.theta[k], opt_theta[k]);
      diffcore::adam_step(b.hyper.encoder_params, res.grads.hyper_encoder, opt_enc);
      diffcore::adam_step(b.hyper.decoder_params, res.grads.hyper_decoder, opt_dec);
      diffcore::adam_step(b.hyper.prior.params, res.grads.prior, opt_prior);
      for (std::size_t tau = 0; tau < b.aux.size(); ++tau) diffcore::adam_step(b.aux[tau].params, res.grads.aux[tau], opt_aux[tau]);
      if (log.csv != nullptr && (step % log.every == 0 || step == 1 || step == cfg.steps_phase1)) {
        const auto& r = res.report;
        write_row(*log.csv, step, "1", r.total, r.distortion_nats, r.rate_bits_estimated, cfg.lr, cfg.seed);
      }
    } catch (const NumericError& e) {
      throw TrainingAborted("phase 1 step " + std::to_string(step) + ": " + e.what(), snapshot);
    }
    if (!std::all_of(b.theta.begin(), b.theta.end(), finite_store) || !finite_store(b.hyper.decoder_params)) {
      throw TrainingAborted("phase 1 step " + std::to_string(step) + ": parameters became non-finite", snapshot);
    }
  }
  return b;
}

std::vector<std::vector<QuantizedFeature>> hard_features(const sim::Slice& s, const Bundle& b) {
  std::vector<std::vector<QuantizedFeature>> out;
  out.reserve(s.size());
  for (std::size_t t = s.begin; t < s.end; ++t) {
    std::vector<QuantizedFeature> row;
    for (std::size_t k = 0; k < b.devices; ++k) {
      const Tensor z = diffcore::graph_forward(b.extractor, b.theta[k], s.data->image(t, k));
      row.push_back(quantizer::round_nearest(z, static_cast<std::uint16_t>(k), static_cast<std::uint32_t>(t)));
    }
    out.push_back(std::move(row));
  }
  return out;
}

inference::FusionInput fusion_input_at(const std::vector<std::vector<QuantizedFeature>>& feats, std::size_t first,
                                       std::size_t t, std::size_t tau1) {
  if (t < first || t - first >= feats.size()) throw Error("fusion_input_at: frame outside the feature window");
  const std::size_t devices = feats[t - first].size();
  inference::FusionInput in;
  in.slots.resize(tau1 + 1);
  in.valid.resize(tau1 + 1);
  for (std::size_t off = 0; off <= tau1; ++off) {
    const bool ok = t - first >= off;
    in.valid[off] = ok;
    const auto& src = feats[ok ? t - first - off : t - first];
    for (std::size_t k = 0; k < devices; ++k) {
      in.slots[off].push_back(ok ? src[k].to_tensor() : Tensor(src[k].shape));
    }
  }
  return in;
}

Bundle train_phase2(const sim::Slice& train, Bundle b, const TrainConfig& cfg, const TrainLog& log) {
  cfg.validate();
  if (b.aux.empty() || b.theta.size() != b.devices) throw Error("train_phase2: phase-1 checkpoint is incomplete");
  const sim::Dataset& data = *train.data;
  if (train.size() <= cfg.tau2) throw Error("train_phase2: training slice shorter than tau2 + 1 frames");
  b.cfg.tau2 = cfg.tau2;
  b.cfg.steps_phase2 = cfg.steps_phase2;
  b.cfg.model.temporal_hidden = cfg.model.temporal_hidden;
  b.cfg.model.predictor_hidden = cfg.model.predictor_hidden;
  const std::size_t fusion_tau1 = cfg.tau1;

  std::mt19937_64 rng(cfg.seed ^ 0x2545f4914f6cdd1dULL);
  const auto feats = hard_features(train, b);
  const Shape fshape = b.feature_shape();
  const diffcore::AdamConfig adam{cfg.lr};

  b.temporal.clear();
  std::vector<diffcore::OptState> opt_temporal;
  if (cfg.tau2 >= 1) {
    for (std::size_t k = 0; k < b.devices; ++k) {
      b.temporal.push_back(entropy::make_temporal_model(fshape, cfg.tau2, cfg.model.temporal_hidden, rng));
      opt_temporal.push_back(diffcore::make_opt_state(b.temporal.back().params, adam));
    }
  }
  b.fusion = inference::make_predictor(inference::fusion_input_shape(fshape, b.devices, fusion_tau1), b.grid,
                                       cfg.model.predictor_hidden, rng);
  auto opt_fusion = diffcore::make_opt_state(b.fusion->params, adam);
  // The fusion depth may differ from the auxiliary depth used in phase 1.
  b.fusion_tau1 = fusion_tau1;

  std::uniform_int_distribution<std::size_t> pick_t2(train.begin + cfg.tau2, train.end - 1);
  std::uniform_int_distribution<std::size_t> pick_t3(train.begin, train.end - 1);
  std::vector<L2Example> b2(cfg.batch_size);
  std::vector<L3Example> b3(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.steps_phase2; ++step) {
    auto snapshot = std::make_shared<const Bundle>(b);
    try {
      double bits = 0.0;
      // Per-device temporal models are independent; they run in device order.
      for (std::size_t k = 0; k < b.temporal.size(); ++k) {
        for (auto& ex : b2) {
          const std::size_t t = pick_t2(rng);
          ex.history.clear();
          for (std::size_t j = t - cfg.tau2; j < t; ++j) ex.history.push_back(feats[j - train.begin][k]);
          ex.current = feats[t - train.begin][k];
        }
        auto r2 = loss_L2(b2, b.temporal[k]);
        diffcore::adam_step(b.temporal[k].params, r2.grads, opt_temporal[k]);
        bits += r2.bits;
      }
      for (auto& ex : b3) {
        const std::size_t t = pick_t3(rng);
        ex.input = fusion_input_at(feats, train.begin, t, fusion_tau1);
        ex.target = data.truth(t);
      }
      auto r3 = loss_L3(b3, *b.fusion);
      diffcore::adam_step(b.fusion->params, r3.grads, opt_fusion);
      if (log.csv != nullptr && (step % log.every == 0 || step == 1 || step == cfg.steps_phase2)) {
        write_row(*log.csv, step, "2", r3.nats, r3.nats, bits, cfg.lr, cfg.seed);
      }
    } catch (const NumericError& e) {
      throw TrainingAborted("phase 2 step " + std::to_string(step) + ": " + e.what(), snapshot);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Variational bound checks

namespace {

void check_table(const Table2& t, const char* what) {
  if (t.rows == 0 || t.cols == 0 || t.rows > 16 || t.cols > 16) {
    throw Error(std::string(what) + ": table dimensions must be in 1..16");
  }
  if (t.p.size() != t.rows * t.cols) throw ShapeError(std::string(what) + ": value count does not match dimensions");
  for (double v : t.p) {
    if (!std::isfinite(v) || v < 0) throw Error(std::string(what) + ": entries must be finite and >= 0");
  }
}

double xlog2(double p, double q) { return p > 0 ? p * std::log2(q) : 0.0; }

}  // namespace

BoundReport verify_variational_bound(const Table2& joint, const Table2& q) {
  check_table(joint, "joint pmf");
  check_table(q, "candidate conditional");
  if (joint.rows != q.rows || joint.cols != q.cols) throw ShapeError("joint pmf and candidate differ in shape");
  const double total = std::accumulate(joint.p.begin(), joint.p.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-12) throw Error("joint pmf is not normalized (sum " + std::to_string(total) + ")");
  for (std::size_t c = 0; c < q.cols; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < q.rows; ++r) s += q.at(r, c);
    if (std::abs(s - 1.0) > 1e-12) throw Error("candidate conditional column " + std::to_string(c) + " is not normalized");
  }
  BoundReport out;
  for (std::size_t c = 0; c < joint.cols; ++c) {
    double pz = 0.0;
    for (std::size_t r = 0; r < joint.rows; ++r) pz += joint.at(r, c);
    for (std::size_t r = 0; r < joint.rows; ++r) {
      const double p = joint.at(r, c);
      out.cross_entropy -= xlog2(p, q.at(r, c));
      out.conditional_entropy -= p > 0 ? xlog2(p, p / pz) : 0.0;
    }
  }
  out.gap = out.cross_entropy - out.conditional_entropy;
  return out;
}

double entropy_bits(std::span<const double> pmf) {
  double h = 0.0;
  for (double p : pmf) h -= xlog2(p, p);
  return h;
}

JointMarginal joint_marginal_entropy(const Table2& joint) {
  check_table(joint, "joint pmf");
  std::vector<double> marginal(joint.rows, 0.0);
  for (std::size_t r = 0; r < joint.rows; ++r) {
    for (std::size_t c = 0; c < joint.cols; ++c) marginal[r] += joint.at(r, c);
  }
  return {entropy_bits(marginal), entropy_bits(joint.p)};
}

}  // namespace tocom::training
