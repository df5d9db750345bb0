#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "tocom/error.hpp"
#include "tocom/harness.hpp"

using namespace tocom;
using namespace tocom::harness;

namespace fs = std::filesystem;

namespace {

sim::WorldSpec toy_world(std::uint32_t frames, std::uint64_t seed = 3) {
  sim::WorldSpec w;
  w.frames = frames;
  w.grid = 6;
  w.height = 16;
  w.width = 16;
  w.blob_radius = 1.5;
  w.speed = 0.05;
  w.seed = seed;
  return w;
}

training::TrainConfig toy_config(std::uint64_t seed = 1) {
  training::TrainConfig c;
  c.seed = seed;
  c.steps_phase1 = 40;
  c.steps_phase2 = 30;
  c.batch_size = 4;
  c.model.feature_channels = 4;
  c.model.extractor_hidden = 4;
  c.model.hyper_hidden = 16;
  c.model.temporal_hidden = 6;
  c.model.predictor_hidden = 6;
  return c;
}

double mean_abs_diff(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<int>(a[i]) - static_cast<int>(b[i]));
  return s / static_cast<double>(a.size());
}

std::size_t occupied(const sim::Frame& f) {
  std::size_t n = 0;
  for (auto v : f.truth) n += v;
  return n;
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("tocom_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string small_grid_yaml(const std::string& ckpt_dir, bool inline_training) {
  std::ostringstream os;
  os << "world: {frames: 90, grid: 6, height: 16, width: 16, blob_radius: 1.5, speed: 0.05, seed: 4}\n"
     << "train:\n"
     << "  steps_phase1: 20\n"
     << "  steps_phase2: 15\n"
     << "  batch_size: 4\n"
     << "  model: {feature_channels: 4, extractor_hidden: 4, hyper_hidden: 16, temporal_hidden: 6, "
        "predictor_hidden: 6}\n"
     << "grid:\n"
     << "  seeds: [1, 2]\n"
     << "  beta: [0.01]\n"
     << "  tau1: [1]\n"
     << "  tau2: [0, 1]\n"
     << "train_inline: " << (inline_training ? "true" : "false") << "\n";
  if (!ckpt_dir.empty()) os << "checkpoint_dir: " << ckpt_dir << "\n";
  return os.str();
}

}  // namespace

TEST(World, SameSeedSameDataset) {
  const auto spec = toy_world(40);
  EXPECT_EQ(sim::gen_dataset(spec), sim::gen_dataset(spec));
  auto other = spec;
  other.seed = 4;
  EXPECT_NE(sim::gen_dataset(spec).frames[5].images, sim::gen_dataset(other).frames[5].images);
}

TEST(World, OccupiedCellsBoundedByAgentCount) {
  auto spec = toy_world(200);
  spec.agents = 3;
  const auto d = sim::gen_dataset(spec);
  for (const auto& f : d.frames) {
    EXPECT_GE(occupied(f), 1u);
    EXPECT_LE(occupied(f), 3u);
  }
  // A single agent can never share its cell.
  spec.agents = 1;
  for (const auto& f : sim::gen_dataset(spec).frames) EXPECT_EQ(occupied(f), 1u);
}

TEST(World, ConsecutiveFramesCloserThanRandomPairs) {
  const auto d = sim::gen_dataset(sim::WorldSpec{});
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> pick(0, d.size() - 1);
  double near = 0.0, far = 0.0;
  const int n = 300;
  for (int i = 0; i < n; ++i) {
    const std::size_t t = pick(rng) % (d.size() - 1);
    near += mean_abs_diff(d.frames[t].images[0], d.frames[t + 1].images[0]);
    far += mean_abs_diff(d.frames[pick(rng)].images[0], d.frames[pick(rng)].images[0]);
  }
  EXPECT_LT(near, far);
}

TEST(World, InvalidSpecsRejected) {
  sim::WorldSpec w;
  w.grid = 3;
  EXPECT_THROW(sim::gen_dataset(w), Error);
  w = {};
  w.cameras = 0;
  EXPECT_THROW(sim::gen_dataset(w), Error);
  w = {};
  w.agents = 0;
  EXPECT_THROW(sim::gen_dataset(w), Error);
  for (const auto& v : sim::WorldSpec{}.view_maps()) EXPECT_NE(v.determinant(), 0.0);
}

TEST(World, DefaultSplitIs400_100_100) {
  const auto d = sim::gen_dataset(sim::WorldSpec{});
  const auto s = sim::split(d);
  EXPECT_EQ(s.train.size(), 400u);
  EXPECT_EQ(s.val.size(), 100u);
  EXPECT_EQ(s.test.size(), 100u);
  EXPECT_EQ(s.val.begin, s.train.end);
  EXPECT_EQ(s.test.end, 600u);
}

TEST(World, DiskFormatRoundtrip) {
  const auto d = sim::gen_dataset(toy_world(12));
  const auto bytes = sim::encode_dataset(d);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TOCD");
  EXPECT_EQ(sim::decode_dataset(bytes), d);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(sim::decode_dataset(bad), Error);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(sim::decode_dataset(bad), Error);
}

TEST(Baseline, ConstantImageNearlyFree) {
  const std::vector<std::uint8_t> img(64 * 64, 137);
  const auto f = baseline_encode_frame(img, 8);
  EXPECT_LT(static_cast<double>(f.bits) / img.size(), 0.05);
  EXPECT_EQ(f.recon, img);
}

TEST(Baseline, ReconstructionWithinHalfStep) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> u(0, 255);
  std::vector<std::uint8_t> img(32 * 32);
  for (auto& p : img) p = static_cast<std::uint8_t>(u(rng));
  for (int q = 1; q <= 8; ++q) {
    const auto f = baseline_encode_frame(img, q);
    const double half = q == 8 ? 0.0 : 0.5 * (1 << (8 - q));
    for (std::size_t i = 0; i < img.size(); ++i) {
      ASSERT_LE(std::abs(static_cast<double>(f.recon[i]) - img[i]), half) << "q=" << q;
    }
    EXPECT_EQ(baseline_decode_frame(baseline_bytes(img, q), img.size(), q), f.recon);
    EXPECT_EQ(f.bits, 8 * baseline_bytes(img, q).size());
  }
}

TEST(Baseline, BitsNondecreasingInQuality) {
  const auto d = sim::gen_dataset(sim::WorldSpec{});
  for (std::size_t t : {0u, 100u, 333u}) {
    std::uint64_t prev = 0;
    for (int q = 1; q <= 8; ++q) {
      const auto bits = baseline_encode_frame(d.frames[t].images[1], q).bits;
      EXPECT_GE(bits, prev) << "q=" << q;
      prev = bits;
    }
  }
}

TEST(Baseline, QualityOutOfRange) {
  const std::vector<std::uint8_t> img(16, 1);
  EXPECT_THROW(baseline_encode_frame(img, 0), Error);
  EXPECT_THROW(baseline_encode_frame(img, 9), Error);
}

TEST(Eval, LatencyIsBitsOverBandwidth) {
  EXPECT_DOUBLE_EQ(latency_ms(50000, 1e6), 50.0);
  EXPECT_THROW(latency_ms(1, 0), Error);
}

class Evaluated : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new sim::Dataset(sim::gen_dataset(toy_world(90)));
    const auto s = sim::split(*data_);
    const auto cfg = toy_config();
    bundle_ = new training::Bundle(training::train_phase2(s.train, training::train_phase1(s.train, cfg), cfg));
  }
  static void TearDownTestSuite() {
    delete bundle_;
    delete data_;
  }
  static sim::Dataset* data_;
  static training::Bundle* bundle_;
};
sim::Dataset* Evaluated::data_ = nullptr;
training::Bundle* Evaluated::bundle_ = nullptr;

TEST_F(Evaluated, EmptySliceRejected) {
  const sim::Slice empty{data_, 10, 10};
  try {
    evaluate_run(*bundle_, empty);
    FAIL() << "no error";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty evaluation set");
  }
  EXPECT_THROW(evaluate_baseline(*bundle_, empty, 4), Error);
  EXPECT_THROW(baseline_rate_only(empty, 4), Error);
}

TEST_F(Evaluated, BitsAreMeanOfPerFrameBits) {
  // Hierarchical-only frames are independent, so single-frame slices add up.
  EvalOptions opt;
  opt.policy = pipeline::ModePolicy::hierarchical_only;
  const sim::Slice s{data_, 60, 70};
  const auto whole = evaluate_run(*bundle_, s, opt);
  double sum = 0.0;
  for (std::size_t t = s.begin; t < s.end; ++t) sum += evaluate_run(*bundle_, {data_, t, t + 1}, opt).bits_measured;
  EXPECT_NEAR(whole.bits_measured, sum / 10.0, 1e-9);
  EXPECT_EQ(whole.tau2, 0u);
  EXPECT_DOUBLE_EQ(whole.latency_ms, whole.bits_measured / 1000.0);
}

TEST_F(Evaluated, MeasuredCoversEstimateAndRecordFields) {
  const auto s = sim::split(*data_);
  const auto r = evaluate_run(*bundle_, s.test);
  EXPECT_GE(r.bits_measured, r.bits_estimated - 64.0 * bundle_->devices);
  // Every frame carries one header per device.
  EXPECT_GE(r.bits_measured, 8.0 * pipeline::kHeaderBytes * bundle_->devices);
  EXPECT_EQ(r.tau1, 1u);
  EXPECT_EQ(r.tau2, 1u);
  EXPECT_EQ(r.seed, 1u);
  EXPECT_GE(r.moda, -static_cast<double>(bundle_->grid * bundle_->grid));
  EXPECT_LE(r.moda, 1.0);
}

TEST_F(Evaluated, BitmapDump) {
  const auto dir = scratch_dir("bitmaps");
  EvalOptions opt;
  opt.dump_bitmaps_dir = dir.string();
  opt.dump_frames = 2;
  const auto s = sim::split(*data_);
  evaluate_run(*bundle_, s.test, opt);
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ".pgm";
  EXPECT_EQ(n, 2 * bundle_->devices);
  fs::remove_all(dir);
}

TEST_F(Evaluated, BaselineAtFullDepthScoresLikeOriginalImages) {
  const auto s = sim::split(*data_);
  EvalOptions opt;
  opt.policy = pipeline::ModePolicy::hierarchical_only;
  const auto tocom = evaluate_run(*bundle_, s.test, opt);
  const auto base = evaluate_baseline(*bundle_, s.test, 8, opt);
  EXPECT_NEAR(base.bce, tocom.bce, 1e-9);
  EXPECT_DOUBLE_EQ(base.moda, tocom.moda);
  EXPECT_EQ(base.config_id, "baseline_q8");
  EXPECT_DOUBLE_EQ(base.bits_measured, baseline_rate_only(s.test, 8).bits_measured);
}

TEST(Csv, ExactColumns) {
  RateDistortionRecord r;
  r.config_id = "x";
  r.seed = 2;
  r.tau1 = 1;
  r.bits_measured = 12.5;
  r.latency_ms = 0.0125;
  const std::vector<RateDistortionRecord> rows{r};
  EXPECT_EQ(to_csv(rows),
            "config_id,seed,tau1,tau2,beta,r_bit,bits_measured,bits_estimated,bce,moda,latency_ms\n"
            "x,2,1,0,0,0,12.5,0,0,0,0.0125\n");
}

TEST(Config, WorldAndTrainParsing) {
  const auto w = parse_world_spec("world: {cameras: 3, frames: 50, occlusion: 0.25}\n");
  EXPECT_EQ(w.cameras, 3u);
  EXPECT_EQ(w.frames, 50u);
  EXPECT_DOUBLE_EQ(w.occlusion, 0.25);
  EXPECT_EQ(w.grid, 12u);
  const auto c = parse_train_config("beta: 0.02\ntau2: 2\nmodel: {feature_channels: 6}\n");
  EXPECT_DOUBLE_EQ(c.beta, 0.02);
  EXPECT_EQ(c.tau2, 2u);
  EXPECT_EQ(c.model.feature_channels, 6u);
}

TEST(Config, UnknownKeysAndBadValuesRejected) {
  try {
    parse_world_spec("cameras: 2\ncamras: 3\n");
    FAIL() << "no error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("camras"), std::string::npos);
  }
  EXPECT_THROW(parse_train_config("model: {width: 3}\n"), Error);
  EXPECT_THROW(parse_train_config("beta: fast\n"), Error);
  EXPECT_THROW(parse_train_config("beta: -1\n"), Error);
  EXPECT_THROW(parse_sweep_grid("grid: {beta: [0.1], gamma: [1]}\n"), Error);
  EXPECT_THROW(parse_sweep_grid("grid: {beta: []}\n"), Error);
}

TEST(Sweep, GridExpansionOrder) {
  const auto g = parse_sweep_grid("grid: {beta: [0.1, 0.2], tau2: [0, 1, 2]}\n");
  const auto pts = expand(g);
  ASSERT_EQ(pts.size(), 6u);
  EXPECT_EQ(pts[0].id(), "b0.1_r0_t1-1_t2-0");
  EXPECT_EQ(pts[5].id(), "b0.2_r0_t1-1_t2-2");
}

TEST(Sweep, MissingCheckpointNamesGridPoint) {
  const auto dir = scratch_dir("missing");
  const auto g = parse_sweep_grid(small_grid_yaml(dir.string(), false));
  try {
    run_sweep(g);
    FAIL() << "no error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("b0.01_r0_t1-1_t2-0"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Sweep, DeterministicAndReusesCheckpoints) {
  const auto dir = scratch_dir("sweep");
  auto g = parse_sweep_grid(small_grid_yaml(dir.string(), true));
  const auto first = to_csv(run_sweep(g));
  EXPECT_EQ(to_csv(run_sweep(parse_sweep_grid(small_grid_yaml("", true)))), first);
  // Second pass loads what the first one saved.
  g.train_inline = false;
  EXPECT_EQ(to_csv(run_sweep(g)), first);
  g.workers = 2;
  EXPECT_EQ(to_csv(run_sweep(g)), first);
  const auto records = run_sweep(g);
  ASSERT_EQ(records.size(), 4u);
  for (const auto& r : records) EXPECT_GE(r.bits_measured, r.bits_estimated - 64.0 * g.world.cameras);
  fs::remove_all(dir);
}
