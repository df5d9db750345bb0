#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <sstream>

#include "tocom/training.hpp"

using namespace tocom;
using namespace tocom::training;

namespace {

// Reference mass of [x - 1/2, x + 1/2) under N(mu, sigma^2).
double ref_mass(double x, double mu, double sigma) {
  const long double s = std::sqrt(2.0L) * sigma;
  const long double a = (x - 0.5L - mu) / s, b = (x + 0.5L - mu) / s;
  if (a > 0) return static_cast<double>(0.5L * (std::erfc(a) - std::erfc(b)));
  if (b < 0) return static_cast<double>(0.5L * (std::erfc(-b) - std::erfc(-a)));
  return static_cast<double>(0.5L * (std::erf(b) - std::erf(a)));
}

double ref_sigma(double raw) {
  const double sp = raw > 30 ? raw : std::log1p(std::exp(raw));
  return std::max(sp, 0.11);
}

double ref_bce(double logit, double y) {
  double p = 1.0 / (1.0 + std::exp(-logit));
  p = std::clamp(p, 1e-7, 1.0 - 1e-7);
  return -(y * std::log(p) + (1 - y) * std::log(1 - p));
}

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

TrainConfig toy_config(std::uint64_t seed = 1) {
  TrainConfig c;
  c.seed = seed;
  c.steps_phase1 = 60;
  c.steps_phase2 = 40;
  c.batch_size = 4;
  c.model.feature_channels = 4;
  c.model.extractor_hidden = 4;
  c.model.hyper_hidden = 16;
  c.model.temporal_hidden = 6;
  c.model.predictor_hidden = 6;
  return c;
}

// One device, image 1x4x4, feature 4x1x1, grid 2, tau1 = 0.
struct TinySetup {
  TrainConfig cfg;
  Bundle b;
  std::vector<L1Example> batch;
};

TinySetup tiny_setup(double beta) {
  TinySetup s;
  s.cfg.beta = beta;
  s.cfg.tau1 = 0;
  s.cfg.tau2 = 0;
  s.cfg.model.feature_channels = 4;
  s.cfg.model.extractor_hidden = 3;
  s.cfg.model.hyper_channels = 2;
  s.cfg.model.hyper_hidden = 5;
  s.cfg.model.predictor_hidden = 3;
  s.b = init_bundle(s.cfg, 1, 2, {1, 4, 4});
  std::mt19937_64 rng(99);
  std::normal_distribution<double> g(0.0, 0.7);
  // Hand-set hyper decoder output: fixed mu and raw sigma per element.
  auto& dec = s.b.hyper.decoder_params.entries;
  dec[dec.size() - 2].value.fill(0.0);
  dec.back().value.data = {0.3, -1.2, 2.4, 0.0, 0.8, -2.5, 1.7, 0.2};
  s.b.hyper.prior.params.at("mu").data = {0.4, -0.6};
  s.b.hyper.prior.params.at("raw_sigma").data = {1.1, -0.4};
  for (auto& e : s.b.aux[0].params.entries) {
    for (double& w : e.value.data) w = g(rng);
  }
  for (auto& e : s.b.theta[0].entries) {
    for (double& w : e.value.data) w = 0.5 * g(rng);
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int n = 0; n < 2; ++n) {
    L1Example ex;
    Tensor x({1, 4, 4});
    for (double& v : x.data) v = u(rng);
    ex.frames = {x};
    inference::OccupancyGrid y(2);
    y.cells = {n == 0 ? 1.0 : 0.0, 0.0, 1.0, 0.0};
    ex.targets = {y};
    s.batch.push_back(ex);
  }
  return s;
}

}  // namespace

TEST(L1, MatchesIndependentRecomputation) {
  auto s = tiny_setup(0.37);
  std::mt19937_64 rng(5), mirror(5);
  const auto r = loss_L1(s.batch, s.b, s.cfg, rng);

  std::uniform_real_distribution<double> noise(-0.5, 0.5);
  double dist = 0.0, rate = 0.0;
  for (const auto& ex : s.batch) {
    const Tensor z = diffcore::graph_forward(s.b.extractor, s.b.theta[0], ex.frames[0]);
    ASSERT_EQ(z.size(), 4u);
    Tensor zt = z;
    for (double& v : zt.data) v += noise(mirror);
    const Tensor v = diffcore::graph_forward(s.b.hyper.encoder, s.b.hyper.encoder_params, z);
    ASSERT_EQ(v.size(), 2u);
    Tensor vt = v;
    for (double& x : vt.data) x += noise(mirror);
    const auto& bias = s.b.hyper.decoder_params.entries.back().value.data;
    for (std::size_t i = 0; i < 4; ++i) {
      rate -= std::log2(std::max(ref_mass(zt[i], bias[i], ref_sigma(bias[4 + i])), 1e-9));
    }
    const auto& pm = s.b.hyper.prior.params.at("mu").data;
    const auto& ps = s.b.hyper.prior.params.at("raw_sigma").data;
    for (std::size_t c = 0; c < 2; ++c) rate -= std::log2(std::max(ref_mass(vt[c], pm[c], ref_sigma(ps[c])), 1e-9));
    const Tensor logits = diffcore::graph_forward(s.b.aux[0].spec, s.b.aux[0].params, zt);
    for (std::size_t i = 0; i < 4; ++i) dist += ref_bce(logits[i], ex.targets[0].cells[i]);
  }
  dist /= 2.0;
  rate /= 2.0;
  EXPECT_NEAR(r.report.distortion_nats, dist, 1e-9);
  EXPECT_NEAR(r.report.rate_bits_estimated, rate, 1e-9);
  EXPECT_NEAR(r.report.total, dist + 0.37 * rate, 1e-9);
  EXPECT_EQ(r.report.rate_term_after_max, r.report.rate_bits_estimated);
}

TEST(L1, BetaZeroIsDistortionOnly) {
  auto s = tiny_setup(0.0);
  std::mt19937_64 rng(6);
  const auto r = loss_L1(s.batch, s.b, s.cfg, rng);
  EXPECT_EQ(r.report.total, r.report.distortion_nats);
}

TEST(L1, RateBelowBudgetGatesEntropyModelGradients) {
  auto s = tiny_setup(0.5);
  s.cfg.r_bit = 1e5;
  std::mt19937_64 rng(7);
  const auto r = loss_L1(s.batch, s.b, s.cfg, rng);
  EXPECT_LT(r.report.rate_bits_estimated, 1e5);
  EXPECT_EQ(r.report.rate_term_after_max, 1e5);
  EXPECT_NEAR(r.report.total, r.report.distortion_nats + 0.5 * 1e5, 1e-9);
  for (const auto* store : {&r.grads.hyper_encoder, &r.grads.hyper_decoder, &r.grads.prior}) {
    for (const auto& e : store->entries) {
      for (double g : e.value.data) EXPECT_EQ(g, 0.0) << e.name;
    }
  }
  // Finite differences through the full loss agree.
  const double eps = 1e-6;
  auto total_with = [&](Bundle b) {
    std::mt19937_64 g(7);
    return loss_L1(s.batch, b, s.cfg, g).report.total;
  };
  for (int which = 0; which < 3; ++which) {
    Bundle b = s.b;
    auto& store = which == 0 ? b.hyper.encoder_params : which == 1 ? b.hyper.decoder_params : b.hyper.prior.params;
    for (auto& e : store.entries) {
      for (std::size_t i = 0; i < e.value.size(); i += 3) {
        const double keep = e.value[i];
        e.value[i] = keep + eps;
        const double up = total_with(b);
        e.value[i] = keep - eps;
        const double down = total_with(b);
        e.value[i] = keep;
        EXPECT_LE(std::abs(up - down) / (2 * eps), 1e-10) << e.name;
      }
    }
  }
}

TEST(L1, GradientsMatchFiniteDifferencesWhenGateOpen) {
  auto s = tiny_setup(0.2);
  std::mt19937_64 rng(8);
  const auto r = loss_L1(s.batch, s.b, s.cfg, rng);
  auto total_with = [&](const Bundle& b) {
    std::mt19937_64 g(8);
    return loss_L1(s.batch, b, s.cfg, g).report.total;
  };
  const double eps = 1e-6;
  auto check = [&](auto pick, const diffcore::ParamStore& grads) {
    for (std::size_t j = 0; j < grads.entries.size(); ++j) {
      for (std::size_t i = 0; i < grads.entries[j].value.size(); i += 2) {
        Bundle a = s.b, b = s.b;
        pick(a).entries[j].value[i] += eps;
        pick(b).entries[j].value[i] -= eps;
        const double fd = (total_with(a) - total_with(b)) / (2 * eps);
        EXPECT_NEAR(grads.entries[j].value[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << grads.entries[j].name;
      }
    }
  };
  check([](Bundle& b) -> diffcore::ParamStore& { return b.hyper.decoder_params; }, r.grads.hyper_decoder);
  check([](Bundle& b) -> diffcore::ParamStore& { return b.hyper.prior.params; }, r.grads.prior);
  check([](Bundle& b) -> diffcore::ParamStore& { return b.aux[0].params; }, r.grads.aux[0]);
  check([](Bundle& b) -> diffcore::ParamStore& { return b.theta[0]; }, r.grads.theta[0]);
}

TEST(L2, NearCertainSymbolCostsAlmostNothing) {
  std::mt19937_64 rng(1);
  auto m = entropy::make_temporal_model({1, 1, 1}, 1, 4, rng);
  // Output mu = 5 and sigma clamped to 0.11 regardless of the history.
  auto& e = m.params.entries;
  e[e.size() - 2].value.fill(0.0);
  e.back().value.data = {5.0, -10.0};
  L2Example ex;
  ex.history = {quantizer::round_nearest(Tensor({1, 1, 1}, 2.0))};
  ex.current = quantizer::round_nearest(Tensor({1, 1, 1}, 5.0));
  const std::vector<L2Example> batch{ex};
  const auto r = loss_L2(batch, m);
  EXPECT_NEAR(r.bits, 7.9084e-6, 1e-9);
  EXPECT_NEAR(r.bits, -std::log2(0.99999451831734731), 1e-12);
}

TEST(L2, WrongHistoryLengthRejected) {
  std::mt19937_64 rng(2);
  auto m = entropy::make_temporal_model({2, 2, 2}, 2, 4, rng);
  L2Example ex;
  ex.history = {quantizer::round_nearest(Tensor({2, 2, 2}))};
  ex.current = quantizer::round_nearest(Tensor({2, 2, 2}));
  const std::vector<L2Example> batch{ex};
  EXPECT_THROW(loss_L2(batch, m), Error);
}

TEST(L2, LearnsIntegerAr1CorpusToCountedEntropy) {
  // x_t = round(0.8 x_{t-1} + N(0, 3^2)).
  std::mt19937_64 gen(3);
  std::normal_distribution<double> g(0.0, 3.0);
  const std::size_t n = 60000;
  std::vector<int> xs(n);
  for (std::size_t t = 1; t < n; ++t) xs[t] = static_cast<int>(std::lround(0.8 * xs[t - 1] + g(gen)));

  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> prev;
  for (std::size_t t = 1; t < n; ++t) {
    joint[{xs[t - 1], xs[t]}] += 1;
    prev[xs[t - 1]] += 1;
  }
  double h = 0.0;
  for (const auto& [k, c] : joint) h -= c / (n - 1) * std::log2(c / prev[k.first]);

  std::mt19937_64 rng(4);
  auto m = entropy::make_temporal_model({1, 1, 1}, 1, 8, rng);
  auto opt = diffcore::make_opt_state(m.params, {1e-2});
  auto example = [&](std::size_t t) {
    L2Example ex;
    ex.history = {quantizer::round_nearest(Tensor({1, 1, 1}, xs[t - 1]))};
    ex.current = quantizer::round_nearest(Tensor({1, 1, 1}, xs[t]));
    return ex;
  };
  std::uniform_int_distribution<std::size_t> pick(1, n - 1);
  for (int step = 0; step < 3000; ++step) {
    std::vector<L2Example> batch;
    for (int i = 0; i < 32; ++i) batch.push_back(example(pick(rng)));
    diffcore::adam_step(m.params, loss_L2(batch, m).grads, opt);
  }
  std::vector<L2Example> all;
  for (std::size_t t = 1; t < n; ++t) all.push_back(example(t));
  const double bits = loss_L2(all, m).bits;
  EXPECT_GE(bits, 0.0);
  EXPECT_LT(std::abs(bits - h) / h, 0.05) << "model " << bits << " counted " << h;
}

TEST(L3, PerfectAndHalfPredictions) {
  std::mt19937_64 rng(5);
  const Shape fs{2, 2, 2};
  auto p = inference::make_predictor(inference::fusion_input_shape(fs, 1, 0), 2, 3, rng);
  L3Example ex;
  ex.input.slots = {{Tensor(fs, 1.0)}};
  ex.input.valid = {true};
  ex.target = inference::OccupancyGrid(2);
  ex.target.cells = {1, 0, 0, 1};
  const std::vector<L3Example> batch{ex};
  EXPECT_NEAR(loss_L3(batch, p).nats, 4 * std::log(2.0), 1e-12);
  // Zero trunk, output bias +-40: saturated, clamped at 1e-7.
  for (auto& e : p.params.entries) e.value.fill(0.0);
  p.params.entries.back().value.data = {40, -40, -40, 40};
  EXPECT_LE(loss_L3(batch, p).nats, 4 * 1e-6);
}

TEST(L3, ShapeMismatchRejected) {
  std::mt19937_64 rng(6);
  auto p = inference::make_predictor({4, 2, 2}, 2, 3, rng);
  L3Example ex;
  ex.input.slots = {{Tensor({2, 2, 2})}};
  ex.input.valid = {true};
  ex.target = inference::OccupancyGrid(2);
  const std::vector<L3Example> batch{ex};
  EXPECT_THROW(loss_L3(batch, p), ShapeError);
}

TEST(L3, GradientStepDescends) {
  std::mt19937_64 rng(7);
  const Shape fs{3, 3, 3};
  auto p = inference::make_predictor(inference::fusion_input_shape(fs, 2, 1), 3, 4, rng);
  std::uniform_int_distribution<int> u(-2, 2);
  L3Example ex;
  for (int off = 0; off < 2; ++off) {
    std::vector<Tensor> slot;
    for (int k = 0; k < 2; ++k) {
      Tensor t(fs);
      for (double& v : t.data) v = u(rng);
      slot.push_back(t);
    }
    ex.input.slots.push_back(slot);
  }
  ex.input.valid = {true, true};
  ex.target = inference::OccupancyGrid(3);
  ex.target.cells[4] = 1.0;
  const std::vector<L3Example> batch{ex};
  const auto r = loss_L3(batch, p);
  for (std::size_t j = 0; j < p.params.entries.size(); ++j) {
    auto& w = p.params.entries[j].value.data;
    const auto& g = r.grads.entries[j].value.data;
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 1e-3 * g[i];
  }
  EXPECT_LT(loss_L3(batch, p).nats, r.nats);
}

TEST(Bounds, ExactEnumeration) {
  Table2 joint{2, 2, {0.1, 0.2, 0.3, 0.4}};
  // True conditional p(y | z): columns normalized.
  Table2 q{2, 2, {0.1 / 0.4, 0.2 / 0.6, 0.3 / 0.4, 0.4 / 0.6}};
  const auto same = verify_variational_bound(joint, q);
  EXPECT_NEAR(same.gap, 0.0, 1e-12);
  const double h = -(0.1 * std::log2(0.25) + 0.3 * std::log2(0.75) + 0.2 * std::log2(1.0 / 3) + 0.4 * std::log2(2.0 / 3));
  EXPECT_NEAR(same.conditional_entropy, h, 1e-12);

  Table2 j4{4, 3, std::vector<double>(12, 1.0 / 12)};
  Table2 uniform{4, 3, std::vector<double>(12, 0.25)};
  EXPECT_NEAR(verify_variational_bound(j4, uniform).cross_entropy, 2.0, 1e-15);
}

TEST(Bounds, RandomPairsNeverNegative) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::size_t> dim(1, 16);
  std::gamma_distribution<double> gam(0.5, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t ny = dim(rng), nz = dim(rng);
    Table2 p{ny, nz, std::vector<double>(ny * nz)}, q{ny, nz, std::vector<double>(ny * nz)};
    double s = 0.0;
    for (double& v : p.p) s += v = gam(rng);
    for (double& v : p.p) v /= s;
    for (std::size_t c = 0; c < nz; ++c) {
      double cs = 0.0;
      for (std::size_t r = 0; r < ny; ++r) cs += q.p[r * nz + c] = gam(rng) + 1e-3;
      for (std::size_t r = 0; r < ny; ++r) q.p[r * nz + c] /= cs;
    }
    EXPECT_GE(verify_variational_bound(p, q).gap, -1e-12);
  }
}

TEST(Bounds, InputValidation) {
  Table2 bad{2, 1, {0.5, 0.6}};
  Table2 q{2, 1, {0.5, 0.5}};
  EXPECT_THROW(verify_variational_bound(bad, q), Error);
  Table2 ok{2, 1, {0.5, 0.5}};
  Table2 badq{2, 1, {0.5, 0.4}};
  EXPECT_THROW(verify_variational_bound(ok, badq), Error);
  Table2 big{17, 1, std::vector<double>(17, 1.0 / 17)};
  EXPECT_THROW(verify_variational_bound(big, big), Error);
}

TEST(Bounds, MarginalBelowJoint) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<std::size_t> dim(1, 16);
  std::exponential_distribution<double> ex(1.0);
  for (int i = 0; i < 100; ++i) {
    const std::size_t nz = dim(rng), nv = dim(rng);
    Table2 j{nz, nv, std::vector<double>(nz * nv)};
    double s = 0.0;
    for (double& v : j.p) s += v = ex(rng);
    for (double& v : j.p) v /= s;
    const auto h = joint_marginal_entropy(j);
    EXPECT_LE(h.marginal, h.joint + 1e-12);
  }
  const std::vector<double> four(4, 0.25);
  EXPECT_NEAR(entropy_bits(four), 2.0, 1e-15);
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.beta = -1;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.tau1 = 2;
  c.weights = {1.0, 2.0};
  EXPECT_THROW(c.validate(), Error);
  c.weights = {1.0, 2.0, 0.0};
  EXPECT_THROW(c.validate(), Error);
  c.weights = {};
  EXPECT_EQ(c.effective_weights(), (std::vector<double>{1, 1, 1}));
}

class Schedule : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new sim::Dataset(sim::gen_dataset(toy_world(200)));
    phase1_ = new Bundle(train_phase1(sim::split(*data_).train, toy_config()));
  }
  static void TearDownTestSuite() {
    delete phase1_;
    delete data_;
  }
  static sim::Dataset* data_;
  static Bundle* phase1_;
};
sim::Dataset* Schedule::data_ = nullptr;
Bundle* Schedule::phase1_ = nullptr;

TEST_F(Schedule, Phase1IsDeterministic) {
  const auto again = train_phase1(sim::split(*data_).train, toy_config());
  EXPECT_EQ(encode_checkpoint(bundle_to_entries(again)), encode_checkpoint(bundle_to_entries(*phase1_)));
  auto other = toy_config(2);
  EXPECT_NE(encode_checkpoint(bundle_to_entries(train_phase1(sim::split(*data_).train, other))),
            encode_checkpoint(bundle_to_entries(*phase1_)));
}

TEST_F(Schedule, TrainingLowersL1) {
  const auto cfg = toy_config();
  const auto s = sim::split(*data_).train;
  std::vector<L1Example> batch;
  for (std::size_t t = s.begin; t + 1 < s.end; t += 7) {
    L1Example ex;
    for (std::size_t k = 0; k < data_->cameras; ++k) ex.frames.push_back(data_->image(t, k));
    ex.targets = {data_->truth(t), data_->truth(t + 1)};
    batch.push_back(ex);
  }
  const Bundle init = init_bundle(cfg, data_->cameras, data_->grid, {1, data_->height, data_->width});
  std::mt19937_64 a(1), b(1);
  EXPECT_LT(loss_L1(batch, *phase1_, cfg, a).report.total, loss_L1(batch, init, cfg, b).report.total);
}

TEST_F(Schedule, Phase2FreezesPhase1AndRoundtripsThroughCheckpoint) {
  const auto cfg = toy_config();
  const Bundle b2 = train_phase2(sim::split(*data_).train, *phase1_, cfg);
  ASSERT_TRUE(b2.phase2_done());
  ASSERT_EQ(b2.temporal.size(), data_->cameras);
  for (std::size_t k = 0; k < b2.devices; ++k) EXPECT_TRUE(b2.theta[k] == phase1_->theta[k]);
  EXPECT_TRUE(b2.hyper.encoder_params == phase1_->hyper.encoder_params);
  EXPECT_TRUE(b2.hyper.decoder_params == phase1_->hyper.decoder_params);
  EXPECT_TRUE(b2.hyper.prior.params == phase1_->hyper.prior.params);

  const auto path = (std::filesystem::temp_directory_path() / "tocom_train_test.ckpt").string();
  save_bundle(path, b2);
  const Bundle back = load_bundle(path);
  EXPECT_EQ(encode_checkpoint(bundle_to_entries(back)), encode_checkpoint(bundle_to_entries(b2)));
  std::filesystem::remove(path);

  auto entries = bundle_to_entries(b2);
  std::erase_if(entries, [](const CheckpointEntry& e) { return e.name.starts_with("hyper_dec/"); });
  try {
    bundle_from_entries(entries);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("hyper_dec"), std::string::npos) << e.what();
  }
}

TEST_F(Schedule, LogHasHeaderAndRows) {
  std::ostringstream os;
  write_log_header(os);
  TrainLog log{&os, 20};
  auto cfg = toy_config();
  cfg.steps_phase1 = 40;
  train_phase1(sim::split(*data_).train, cfg, log);
  const std::string text = os.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "step,phase,loss_total,distortion_nats,rate_bits,lr,seed");
  // First step, every 20th, and the last.
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> steps;
  while (std::getline(in, line)) steps.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(steps, (std::vector<std::string>{"1", "20", "40"}));
}

TEST(Trend, LargerBetaLowersTrainedRate) {
  const auto data = sim::gen_dataset(toy_world(200, 5));
  const auto train = sim::split(data).train;
  const std::vector<double> betas{0.003, 0.03, 0.3};
  std::vector<double> rate(betas.size(), 0.0);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    for (std::size_t i = 0; i < betas.size(); ++i) {
      auto cfg = toy_config(seed);
      cfg.beta = betas[i];
      cfg.steps_phase1 = 150;
      const Bundle b = train_phase1(train, cfg);
      std::vector<L1Example> batch;
      for (std::size_t t = train.begin; t + 1 < train.end; t += 3) {
        L1Example ex;
        for (std::size_t k = 0; k < data.cameras; ++k) ex.frames.push_back(data.image(t, k));
        ex.targets = {data.truth(t), data.truth(t + 1)};
        batch.push_back(ex);
      }
      std::mt19937_64 rng(11);
      rate[i] += loss_L1(batch, b, cfg, rng).report.rate_bits_estimated / 3.0;
    }
  }
  EXPECT_GE(rate[0], rate[1]);
  EXPECT_GE(rate[1], rate[2]);
}
