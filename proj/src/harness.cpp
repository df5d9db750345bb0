#include "tocom/harness.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "tocom/bytes.hpp"
#include "tocom/range_coder.hpp"

namespace tocom::harness {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct BaselineModel {
  double mu;
  double sigma;
  std::uint16_t mu_fixed;
  std::uint16_t sigma_fixed;
};

BaselineModel fit_model(std::span<const std::int64_t> symbols) {
  double mean = 0.0;
  for (auto s : symbols) mean += static_cast<double>(s);
  mean /= static_cast<double>(std::max<std::size_t>(1, symbols.size()));
  double var = 0.0;
  for (auto s : symbols) var += (static_cast<double>(s) - mean) * (static_cast<double>(s) - mean);
  var /= static_cast<double>(std::max<std::size_t>(1, symbols.size()));
  BaselineModel m{};
  m.mu_fixed = static_cast<std::uint16_t>(std::clamp(std::lround(mean * 256.0), 0L, 65535L));
  m.sigma_fixed = static_cast<std::uint16_t>(std::clamp(std::lround(std::sqrt(var) * 256.0), 0L, 65535L));
  m.mu = m.mu_fixed / 256.0;
  m.sigma = std::max(m.sigma_fixed / 256.0, entropy::kSigmaMin);
  return m;
}

void check_q(int q) {
  if (q < 1 || q > 8) throw Error("baseline quality must be in 1..8, got " + std::to_string(q));
}

std::uint8_t dequantize(std::int64_t s, int q) {
  if (q == 8) return static_cast<std::uint8_t>(s);
  const int step = 1 << (8 - q);
  return static_cast<std::uint8_t>(s * step + step / 2);
}

struct ScoreAccumulator {
  double bce = 0.0;
  inference::DetectionCounts counts;
  void add(const inference::OccupancyGrid& pred, const inference::OccupancyGrid& truth, const EvalOptions& opt) {
    bce += inference::bce_distortion(pred, truth);
    const auto c = inference::count_detections(pred, truth, opt.threshold, opt.moda_radius);
    counts.ground_truth += c.ground_truth;
    counts.missed += c.missed;
    counts.false_positive += c.false_positive;
  }
};

RateDistortionRecord base_record(const training::Bundle& b, const EvalOptions& opt) {
  RateDistortionRecord r;
  r.config_id = opt.config_id;
  r.seed = b.cfg.seed;
  r.tau1 = b.fusion_tau1;
  r.tau2 = (opt.policy == pipeline::ModePolicy::hierarchical_only || b.temporal.empty()) ? 0 : b.cfg.tau2;
  r.beta = b.cfg.beta;
  r.r_bit = b.cfg.r_bit;
  return r;
}

void require_phase2(const training::Bundle& b) {
  if (!b.fusion) throw Error("checkpoint has no fusion model; run phase 2 first");
}

}  // namespace

// ---------------------------------------------------------------------------
// Baseline

std::vector<std::uint8_t> baseline_bytes(std::span<const std::uint8_t> image, int q) {
  check_q(q);
  std::vector<std::int64_t> symbols(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) symbols[i] = image[i] >> (8 - q);
  const BaselineModel m = fit_model(symbols);
  const rangecoder::CdfTable table = rangecoder::build_table(m.mu, m.sigma);
  const auto stream = rangecoder::rc_encode(symbols, [&](std::size_t) -> const rangecoder::CdfTable& { return table; });
  ByteWriter w;
  w.u16(m.mu_fixed);
  w.u16(m.sigma_fixed);
  w.bytes(stream.bytes);
  return w.take();
}

BaselineFrame baseline_encode_frame(std::span<const std::uint8_t> image, int q) {
  const auto bytes = baseline_bytes(image, q);
  BaselineFrame out;
  out.bits = 8 * bytes.size();
  ByteReader r(bytes);
  const double mu = r.u16() / 256.0;
  const double sigma = std::max(r.u16() / 256.0, entropy::kSigmaMin);
  out.recon.resize(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const std::int64_t s = image[i] >> (8 - q);
    out.estimated_bits -= std::log2(std::max(entropy::gu_pmf(s, mu, sigma), 1e-300));
    out.recon[i] = dequantize(s, q);
  }
  return out;
}

std::vector<std::uint8_t> baseline_decode_frame(std::span<const std::uint8_t> coded, std::size_t pixels, int q) {
  check_q(q);
  ByteReader r(coded);
  const double mu = r.u16() / 256.0;
  const double sigma = std::max(r.u16() / 256.0, entropy::kSigmaMin);
  const rangecoder::CdfTable table = rangecoder::build_table(mu, sigma);
  rangecoder::Bitstream stream{{coded.begin() + 4, coded.end()}};
  const auto symbols =
      rangecoder::rc_decode(stream, [&](std::size_t) -> const rangecoder::CdfTable& { return table; }, pixels);
  std::vector<std::uint8_t> out(pixels);
  for (std::size_t i = 0; i < pixels; ++i) out[i] = dequantize(symbols[i], q);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

double latency_ms(double bits, double bandwidth_bps) {
  if (!(bandwidth_bps > 0)) throw Error("bandwidth must be > 0");
  return 1000.0 * bits / bandwidth_bps;
}

RateDistortionRecord evaluate_run(const training::Bundle& b, const sim::Slice& s, const EvalOptions& opt) {
  if (s.data == nullptr || s.size() == 0) throw Error("empty evaluation set");
  require_phase2(b);
  const sim::Dataset& data = *s.data;
  if (data.cameras != b.devices) throw ShapeError("dataset camera count does not match the checkpoint");

  std::vector<pipeline::DeviceEncoder> encoders;
  pipeline::ServerDecoder server;
  for (std::size_t k = 0; k < b.devices; ++k) {
    auto models = b.device_models(k);
    encoders.emplace_back(static_cast<std::uint16_t>(k), models);
    server.register_device(static_cast<std::uint16_t>(k), models);
  }
  if (!opt.dump_bitmaps_dir.empty()) fs::create_directories(opt.dump_bitmaps_dir);

  double measured = 0.0, estimated = 0.0;
  ScoreAccumulator score;
  std::vector<std::vector<QuantizedFeature>> decoded;
  for (std::size_t t = s.begin; t < s.end; ++t) {
    std::vector<QuantizedFeature> row;
    for (std::size_t k = 0; k < b.devices; ++k) {
      auto res = encoders[k].encode_frame(data.image(t, k), static_cast<std::uint32_t>(t), opt.policy);
      const auto wire = pipeline::serialize_packet(res.packet);
      QuantizedFeature z = server.decode_frame(pipeline::parse_packet(wire));
      if (z.values != res.zhat.values || z.shape != res.zhat.shape) {
        throw Error("lossless contract violated at frame " + std::to_string(t) + ", device " + std::to_string(k));
      }
      measured += 8.0 * static_cast<double>(wire.size());
      estimated += res.estimated_bits;
      if (!opt.dump_bitmaps_dir.empty() && t - s.begin < opt.dump_frames) {
        inference::write_feature_pgm(
            (fs::path(opt.dump_bitmaps_dir) / ("bits_t" + std::to_string(t) + "_k" + std::to_string(k) + ".pgm"))
                .string(),
            res.bit_map);
      }
      row.push_back(std::move(z));
    }
    decoded.push_back(std::move(row));
    const auto input = training::fusion_input_at(decoded, s.begin, t, b.fusion_tau1);
    score.add(inference::fuse_predict(input, *b.fusion, b.grid), data.truth(t), opt);
  }
  const double n = static_cast<double>(s.size());
  RateDistortionRecord r = base_record(b, opt);
  r.bits_measured = measured / n;
  r.bits_estimated = estimated / n;
  r.bce = score.bce / n;
  r.moda = inference::moda_from_counts(score.counts);
  r.latency_ms = latency_ms(r.bits_measured, opt.bandwidth_bps);
  return r;
}

RateDistortionRecord evaluate_baseline(const training::Bundle& b, const sim::Slice& s, int q,
                                       const EvalOptions& opt) {
  if (s.data == nullptr || s.size() == 0) throw Error("empty evaluation set");
  require_phase2(b);
  check_q(q);
  const sim::Dataset& data = *s.data;
  if (data.cameras != b.devices) throw ShapeError("dataset camera count does not match the checkpoint");
  double measured = 0.0, estimated = 0.0;
  ScoreAccumulator score;
  std::vector<std::vector<QuantizedFeature>> feats;
  const std::size_t hw = static_cast<std::size_t>(data.height) * data.width;
  for (std::size_t t = s.begin; t < s.end; ++t) {
    std::vector<QuantizedFeature> row;
    for (std::size_t k = 0; k < b.devices; ++k) {
      const auto coded = baseline_encode_frame(data.frames[t].images[k], q);
      measured += static_cast<double>(8 * pipeline::kHeaderBytes + coded.bits);
      estimated += coded.estimated_bits;
      Tensor img({1, data.height, data.width});
      for (std::size_t i = 0; i < hw; ++i) img[i] = coded.recon[i] / 255.0;
      const Tensor z = diffcore::graph_forward(b.extractor, b.theta[k], img);
      row.push_back(quantizer::round_nearest(z, static_cast<std::uint16_t>(k), static_cast<std::uint32_t>(t)));
    }
    feats.push_back(std::move(row));
    const auto input = training::fusion_input_at(feats, s.begin, t, b.fusion_tau1);
    score.add(inference::fuse_predict(input, *b.fusion, b.grid), data.truth(t), opt);
  }
  const double n = static_cast<double>(s.size());
  RateDistortionRecord r = base_record(b, opt);
  r.config_id = opt.config_id == "eval" ? "baseline_q" + std::to_string(q) : opt.config_id;
  r.tau2 = 0;
  r.bits_measured = measured / n;
  r.bits_estimated = estimated / n;
  r.bce = score.bce / n;
  r.moda = inference::moda_from_counts(score.counts);
  r.latency_ms = latency_ms(r.bits_measured, opt.bandwidth_bps);
  return r;
}

RateDistortionRecord baseline_rate_only(const sim::Slice& s, int q, const EvalOptions& opt) {
  if (s.data == nullptr || s.size() == 0) throw Error("empty evaluation set");
  double measured = 0.0, estimated = 0.0;
  for (std::size_t t = s.begin; t < s.end; ++t) {
    for (const auto& img : s.data->frames[t].images) {
      const auto coded = baseline_encode_frame(img, q);
      measured += static_cast<double>(8 * pipeline::kHeaderBytes + coded.bits);
      estimated += coded.estimated_bits;
    }
  }
  const double n = static_cast<double>(s.size());
  RateDistortionRecord r;
  r.config_id = "baseline_q" + std::to_string(q);
  r.bits_measured = measured / n;
  r.bits_estimated = estimated / n;
  r.bce = std::numeric_limits<double>::quiet_NaN();
  r.moda = std::numeric_limits<double>::quiet_NaN();
  r.latency_ms = latency_ms(r.bits_measured, opt.bandwidth_bps);
  return r;
}

// ---------------------------------------------------------------------------
// Config files

namespace {

void check_keys(const YAML::Node& node, const std::set<std::string>& allowed, const std::string& where) {
  if (!node) return;
  if (!node.IsMap()) throw Error(where + ": expected a key/value map");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.contains(key)) throw Error(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const YAML::Node& node, const char* key, T& dst, const std::string& where) {
  if (!node || !node[key]) return;
  try {
    dst = node[key].as<T>();
  } catch (const YAML::Exception& e) {
    throw Error(where + ": bad value for '" + key + "': " + e.what());
  }
}

template <typename T>
std::vector<T> read_list(const YAML::Node& node, const char* key, const T& fallback, const std::string& where) {
  if (!node || !node[key]) return {fallback};
  const YAML::Node& v = node[key];
  try {
    if (v.IsSequence()) return v.as<std::vector<T>>();
    return {v.as<T>()};
  } catch (const YAML::Exception& e) {
    throw Error(where + ": bad value for '" + key + "': " + e.what());
  }
}

YAML::Node parse_yaml(const std::string& text, const std::string& where) {
  try {
    return YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw Error(where + ": " + e.what());
  }
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

sim::WorldSpec world_from(const YAML::Node& n) {
  const std::string where = "world";
  check_keys(n, {"cameras", "agents", "frames", "grid", "height", "width", "speed", "jitter", "blob_radius",
                 "blob_intensity", "pixel_noise", "background_contrast", "occlusion", "seed"},
             where);
  sim::WorldSpec w;
  read(n, "cameras", w.cameras, where);
  read(n, "agents", w.agents, where);
  read(n, "frames", w.frames, where);
  read(n, "grid", w.grid, where);
  read(n, "height", w.height, where);
  read(n, "width", w.width, where);
  read(n, "speed", w.speed, where);
  read(n, "jitter", w.jitter, where);
  read(n, "blob_radius", w.blob_radius, where);
  read(n, "blob_intensity", w.blob_intensity, where);
  read(n, "pixel_noise", w.pixel_noise, where);
  read(n, "background_contrast", w.background_contrast, where);
  read(n, "occlusion", w.occlusion, where);
  read(n, "seed", w.seed, where);
  w.validate();
  return w;
}

training::TrainConfig train_from(const YAML::Node& n) {
  const std::string where = "train";
  check_keys(n, {"beta", "r_bit", "tau1", "tau2", "weights", "batch_size", "steps_phase1", "steps_phase2", "lr", "seed",
                 "model"},
             where);
  training::TrainConfig c;
  read(n, "beta", c.beta, where);
  read(n, "r_bit", c.r_bit, where);
  read(n, "tau1", c.tau1, where);
  read(n, "tau2", c.tau2, where);
  read(n, "weights", c.weights, where);
  read(n, "batch_size", c.batch_size, where);
  read(n, "steps_phase1", c.steps_phase1, where);
  read(n, "steps_phase2", c.steps_phase2, where);
  read(n, "lr", c.lr, where);
  read(n, "seed", c.seed, where);
  if (n && n["model"]) {
    const YAML::Node m = n["model"];
    const std::string mw = "train.model";
    check_keys(m, {"feature_channels", "extractor_hidden", "hyper_channels", "hyper_hidden", "temporal_hidden",
                   "predictor_hidden"},
               mw);
    read(m, "feature_channels", c.model.feature_channels, mw);
    read(m, "extractor_hidden", c.model.extractor_hidden, mw);
    read(m, "hyper_channels", c.model.hyper_channels, mw);
    read(m, "hyper_hidden", c.model.hyper_hidden, mw);
    read(m, "temporal_hidden", c.model.temporal_hidden, mw);
    read(m, "predictor_hidden", c.model.predictor_hidden, mw);
  }
  c.validate();
  return c;
}

}  // namespace

sim::WorldSpec parse_world_spec(const std::string& yaml_text) {
  const YAML::Node root = parse_yaml(yaml_text, "world spec");
  // Accept either a bare spec or one nested under "world".
  return world_from(root["world"] ? root["world"] : root);
}

training::TrainConfig parse_train_config(const std::string& yaml_text) {
  const YAML::Node root = parse_yaml(yaml_text, "train config");
  return train_from(root["train"] ? root["train"] : root);
}

sim::WorldSpec load_world_spec(const std::string& path) { return parse_world_spec(slurp(path)); }

TrainJob load_train_job(const std::string& path) {
  const YAML::Node root = parse_yaml(slurp(path), path);
  check_keys(root, {"data", "train"}, path);
  TrainJob job;
  read(root, "data", job.data, path);
  job.cfg = train_from(root["train"]);
  return job;
}

SweepGrid parse_sweep_grid(const std::string& yaml_text) {
  const YAML::Node root = parse_yaml(yaml_text, "sweep grid");
  check_keys(root, {"world", "train", "grid", "checkpoint_dir", "train_inline", "workers", "eval"}, "sweep grid");
  SweepGrid g;
  g.world = world_from(root["world"]);
  g.base = train_from(root["train"]);
  const YAML::Node grid = root["grid"];
  check_keys(grid, {"seeds", "beta", "r_bit", "tau1", "tau2"}, "grid");
  g.seeds = read_list<std::uint64_t>(grid, "seeds", g.base.seed, "grid");
  g.beta = read_list<double>(grid, "beta", g.base.beta, "grid");
  g.r_bit = read_list<double>(grid, "r_bit", g.base.r_bit, "grid");
  g.tau1 = read_list<std::size_t>(grid, "tau1", g.base.tau1, "grid");
  g.tau2 = read_list<std::size_t>(grid, "tau2", g.base.tau2, "grid");
  read(root, "checkpoint_dir", g.checkpoint_dir, "sweep grid");
  read(root, "train_inline", g.train_inline, "sweep grid");
  read(root, "workers", g.workers, "sweep grid");
  const YAML::Node ev = root["eval"];
  check_keys(ev, {"bandwidth_bps", "threshold", "moda_radius"}, "eval");
  read(ev, "bandwidth_bps", g.eval.bandwidth_bps, "eval");
  read(ev, "threshold", g.eval.threshold, "eval");
  read(ev, "moda_radius", g.eval.moda_radius, "eval");
  if (g.seeds.empty() || g.beta.empty() || g.r_bit.empty() || g.tau1.empty() || g.tau2.empty()) {
    throw Error("grid: every axis needs at least one value");
  }
  if (g.workers == 0) throw Error("sweep grid: workers must be >= 1");
  return g;
}

SweepGrid load_sweep_grid(const std::string& path) { return parse_sweep_grid(slurp(path)); }

// ---------------------------------------------------------------------------
// Sweeps

std::string GridPoint::id() const {
  return "b" + fmt(beta) + "_r" + fmt(r_bit) + "_t1-" + std::to_string(tau1) + "_t2-" + std::to_string(tau2);
}

std::vector<GridPoint> expand(const SweepGrid& g) {
  std::vector<GridPoint> out;
  for (double beta : g.beta) {
    for (double r : g.r_bit) {
      for (auto t1 : g.tau1) {
        for (auto t2 : g.tau2) out.push_back({beta, r, t1, t2});
      }
    }
  }
  return out;
}

std::vector<RateDistortionRecord> run_sweep(const SweepGrid& g) {
  const sim::Dataset data = sim::gen_dataset(g.world);
  const auto splits = sim::split(data);
  const auto points = expand(g);

  // Tasks share phase 1: one task per (beta, r_bit, tau1, seed).
  struct Task {
    std::vector<std::size_t> record_index;
    std::vector<GridPoint> points;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  std::map<std::tuple<double, double, std::size_t, std::uint64_t>, std::size_t> by_key;
  std::size_t next = 0;
  for (const auto& p : points) {
    for (auto seed : g.seeds) {
      const auto key = std::make_tuple(p.beta, p.r_bit, p.tau1, seed);
      auto [it, fresh] = by_key.try_emplace(key, tasks.size());
      if (fresh) tasks.push_back({{}, {}, seed});
      tasks[it->second].record_index.push_back(next++);
      tasks[it->second].points.push_back(p);
    }
  }

  std::vector<RateDistortionRecord> records(next);
  auto ckpt_path = [&](const std::string& id, std::uint64_t seed) {
    return (fs::path(g.checkpoint_dir) / (id + "_s" + std::to_string(seed) + ".ckpt")).string();
  };
  if (!g.checkpoint_dir.empty()) fs::create_directories(g.checkpoint_dir);

  auto run_task = [&](const Task& task) {
    std::optional<training::Bundle> phase1;
    for (std::size_t i = 0; i < task.points.size(); ++i) {
      const GridPoint& p = task.points[i];
      training::TrainConfig cfg = g.base;
      cfg.beta = p.beta;
      cfg.r_bit = p.r_bit;
      cfg.tau1 = p.tau1;
      cfg.tau2 = p.tau2;
      cfg.seed = task.seed;
      if (!cfg.weights.empty() && cfg.weights.size() != cfg.tau1 + 1) cfg.weights.clear();
      const std::string id = p.id();
      const std::string path = g.checkpoint_dir.empty() ? std::string() : ckpt_path(id, task.seed);
      training::Bundle bundle;
      if (!path.empty() && fs::exists(path)) {
        bundle = training::load_bundle(path);
      } else if (!g.train_inline) {
        throw Error("missing checkpoint for grid point " + id + " seed " + std::to_string(task.seed) +
                    (path.empty() ? std::string() : " (" + path + ")"));
      } else {
        if (!phase1) phase1 = training::train_phase1(splits.train, cfg);
        bundle = training::train_phase2(splits.train, *phase1, cfg);
        if (!path.empty()) training::save_bundle(path, bundle);
      }
      EvalOptions opt = g.eval;
      opt.config_id = id;
      if (p.tau2 == 0) opt.policy = pipeline::ModePolicy::hierarchical_only;
      records[task.record_index[i]] = evaluate_run(bundle, splits.test, opt);
    }
  };

  std::atomic<std::size_t> cursor{0};
  std::vector<std::exception_ptr> errors(tasks.size());
  auto worker = [&] {
    for (std::size_t i = cursor++; i < tasks.size(); i = cursor++) {
      try {
        run_task(tasks[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_workers = std::min(g.workers, tasks.size());
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return records;
}

void write_csv_header(std::ostream& os) {
  os << "config_id,seed,tau1,tau2,beta,r_bit,bits_measured,bits_estimated,bce,moda,latency_ms\n";
}

void write_csv_row(std::ostream& os, const RateDistortionRecord& r) {
  os << r.config_id << ',' << r.seed << ',' << r.tau1 << ',' << r.tau2 << ',' << fmt(r.beta) << ',' << fmt(r.r_bit)
     << ',' << fmt(r.bits_measured) << ',' << fmt(r.bits_estimated) << ',' << fmt(r.bce) << ',' << fmt(r.moda) << ','
     << fmt(r.latency_ms) << '\n';
}

std::string to_csv(std::span<const RateDistortionRecord> records) {
  std::ostringstream os;
  write_csv_header(os);
  for (const auto& r : records) write_csv_row(os, r);
  return os.str();
}

}  // namespace tocom::harness
