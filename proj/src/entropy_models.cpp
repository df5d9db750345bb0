#include "tocom/entropy_models.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tocom/error.hpp"

namespace tocom::entropy {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double std_normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

void check_sigma(double sigma) {
  if (!(sigma >= kSigmaMin)) {
    throw NumericError("sigma " + std::to_string(sigma) + " is below the floor " + std::to_string(kSigmaMin));
  }
}

void check_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }

double gu_likelihood(double x, double mu, double sigma) {
  check_sigma(sigma);
  const double upper = (x + 0.5 - mu) / sigma;
  const double lower = (x - 0.5 - mu) / sigma;
  // Evaluate in whichever tail keeps both terms small to avoid cancellation.
  if (lower + upper > 0) {
    return 0.5 * (std::erfc(lower * kInvSqrt2) - std::erfc(upper * kInvSqrt2));
  }
  return 0.5 * (std::erfc(-upper * kInvSqrt2) - std::erfc(-lower * kInvSqrt2));
}

double gu_pmf(std::int64_t k, double mu, double sigma) {
  return gu_likelihood(static_cast<double>(k), mu, sigma);
}

Tensor gu_bits_map(const QuantizedFeature& zhat, const GaussianParams& params) {
  check_same_shape(zhat.shape, params.mu.shape, "gu_bits");
  check_same_shape(zhat.shape, params.sigma.shape, "gu_bits");
  Tensor out(zhat.shape);
  for (std::size_t i = 0; i < zhat.size(); ++i) {
    const double p = gu_pmf(zhat.values[i], params.mu[i], params.sigma[i]);
    out[i] = -std::log2(std::max(p, 1e-300));
  }
  return out;
}

double gu_bits(const QuantizedFeature& zhat, const GaussianParams& params) {
  const Tensor map = gu_bits_map(zhat, params);
  double total = 0.0;
  for (double b : map.data) total += b;
  return total;
}

RelaxedRate relaxed_bits(const Tensor& value, const GaussianParams& params) {
  check_same_shape(value.shape, params.mu.shape, "relaxed_bits");
  check_same_shape(value.shape, params.sigma.shape, "relaxed_bits");
  RelaxedRate out{0.0, Tensor(value.shape), Tensor(value.shape), Tensor(value.shape)};
  const double inv_ln2 = 1.0 / std::numbers::ln2;
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double mu = params.mu[i];
    const double sigma = params.sigma[i];
    const double p = gu_likelihood(value[i], mu, sigma);
    const double pf = std::max(p, kLikelihoodFloor);
    out.bits -= std::log2(pf);
    const double upper = (value[i] + 0.5 - mu) / sigma;
    const double lower = (value[i] - 0.5 - mu) / sigma;
    const double pu = std_normal_pdf(upper);
    const double pl = std_normal_pdf(lower);
    const double dp_dx = (pu - pl) / sigma;
    const double dp_dsigma = -(upper * pu - lower * pl) / sigma;
    const double scale = -inv_ln2 / pf;
    out.d_value[i] = scale * dp_dx;
    out.d_mu[i] = -scale * dp_dx;
    out.d_sigma[i] = scale * dp_dsigma;
  }
  return out;
}

double sigma_from_raw(double raw) { return std::max(softplus(raw), kSigmaMin); }

double raw_sigma_grad(double raw, double d_sigma) {
  if (softplus(raw) < kSigmaMin && d_sigma > 0) return 0.0;
  return d_sigma * sigmoid(raw);
}

GaussianParams split_params(const Tensor& raw) {
  if (raw.rank() != 3 || raw.shape[0] % 2 != 0) {
    throw ShapeError("split_params: expected (2C,h,w), got " + shape_str(raw.shape));
  }
  const std::size_t c = raw.shape[0] / 2;
  GaussianParams p{slice_channels(raw, 0, c), slice_channels(raw, c, c)};
  for (double& s : p.sigma.data) s = sigma_from_raw(s);
  return p;
}

Tensor split_params_backward(const Tensor& raw, const Tensor& d_mu, const Tensor& d_sigma) {
  const std::size_t half = raw.size() / 2;
  if (d_mu.size() != half || d_sigma.size() != half) throw ShapeError("split_params_backward: size mismatch");
  Tensor g(raw.shape);
  for (std::size_t i = 0; i < half; ++i) {
    g[i] = d_mu[i];
    g[half + i] = raw_sigma_grad(raw[half + i], d_sigma[i]);
  }
  return g;
}

FactorizedPrior make_factorized_prior(std::size_t channels) {
  FactorizedPrior prior;
  prior.params.entries.push_back({"mu", Tensor({channels}, 0.0)});
  prior.params.entries.push_back({"raw_sigma", Tensor({channels}, kRawSigmaOne)});
  return prior;
}

GaussianParams factorized_params(const FactorizedPrior& prior, const Shape& shape) {
  if (shape.empty() || shape[0] != prior.channels()) {
    throw ShapeError("factorized_params: prior has " + std::to_string(prior.channels()) +
                     " channels, shape is " + shape_str(shape));
  }
  const Tensor& mu = prior.params.at("mu");
  const Tensor& raw = prior.params.at("raw_sigma");
  GaussianParams p{Tensor(shape), Tensor(shape)};
  const std::size_t plane = numel(shape) / shape[0];
  for (std::size_t c = 0; c < shape[0]; ++c) {
    const double s = sigma_from_raw(raw[c]);
    for (std::size_t j = 0; j < plane; ++j) {
      p.mu[c * plane + j] = mu[c];
      p.sigma[c * plane + j] = s;
    }
  }
  return p;
}

diffcore::ParamStore factorized_params_backward(const FactorizedPrior& prior, const Shape& shape,
                                                const Tensor& d_mu, const Tensor& d_sigma) {
  diffcore::ParamStore g = prior.params.zeros_like();
  const Tensor& raw = prior.params.at("raw_sigma");
  Tensor& gm = g.at("mu");
  Tensor& gr = g.at("raw_sigma");
  const std::size_t plane = numel(shape) / shape[0];
  for (std::size_t c = 0; c < shape[0]; ++c) {
    double sm = 0.0, ss = 0.0;
    for (std::size_t j = 0; j < plane; ++j) {
      sm += d_mu[c * plane + j];
      ss += d_sigma[c * plane + j];
    }
    gm[c] = sm;
    gr[c] = raw_sigma_grad(raw[c], ss);
  }
  return g;
}

HyperModel make_hyper_model(const Shape& feature_shape, std::size_t hyper_channels, std::size_t hidden,
                            std::mt19937_64& rng) {
  using namespace diffcore;
  if (feature_shape.size() != 3) throw ShapeError("hyper model expects (C,h,w) features");
  const std::size_t c = feature_shape[0], h = feature_shape[1], w = feature_shape[2];
  HyperModel m;
  m.encoder.input_shape = feature_shape;
  m.encoder.layers = {conv2d(c, c, 3, 1, 1), leaky_relu(), conv2d(c, hyper_channels, 3, 2, 1)};
  const Shape v_shape = m.encoder.output_shape();
  const std::size_t nv = numel(v_shape);
  m.decoder.input_shape = v_shape;
  m.decoder.layers = {reshape({nv}), dense(nv, hidden), leaky_relu(), dense(hidden, 2 * c * h * w),
                      reshape({2 * c, h, w})};
  m.encoder_params = init_params(m.encoder, rng);
  m.decoder_params = init_params(m.decoder, rng);
  set_output_layer(m.decoder, m.decoder_params, {0.0, kRawSigmaOne});
  m.prior = make_factorized_prior(hyper_channels);
  return m;
}

HyperResult hyper_path(const Tensor& z, const HyperModel& model, Mode mode, std::mt19937_64* rng) {
  HyperResult r;
  r.encoder_trace = diffcore::forward_trace(model.encoder, model.encoder_params, z);
  r.v_latent = r.encoder_trace.output();
  if (mode == Mode::train) {
    if (rng == nullptr) throw Error("hyper_path: train mode needs a generator");
    r.v_coded = quantizer::add_uniform_noise(r.v_latent, *rng);
  } else {
    r.v_coded = quantizer::round_nearest(r.v_latent).to_tensor();
  }
  r.decoder_trace = diffcore::forward_trace(model.decoder, model.decoder_params, r.v_coded);
  r.feature_params = split_params(r.decoder_trace.output());
  return r;
}

TemporalModel make_temporal_model(const Shape& feature_shape, std::size_t order, std::size_t hidden,
                                  std::mt19937_64& rng) {
  using namespace diffcore;
  if (feature_shape.size() != 3) throw ShapeError("temporal model expects (C,h,w) features");
  if (order == 0) throw Error("temporal model order must be >= 1");
  const std::size_t c = feature_shape[0];
  TemporalModel m;
  m.order = order;
  m.transform.input_shape = {order * c, feature_shape[1], feature_shape[2]};
  m.transform.layers = {conv2d(order * c, hidden, 3, 1, 1), leaky_relu(), conv2d(hidden, hidden, 3, 1, 1),
                        leaky_relu(), conv2d(hidden, 2 * c, 1, 1, 0)};
  m.params = init_params(m.transform, rng);
  set_output_layer(m.transform, m.params, {0.0, kRawSigmaOne});
  return m;
}

Tensor temporal_input(std::span<const QuantizedFeature> history, const TemporalModel& model) {
  if (history.size() != model.order) {
    throw Error("temporal model of order " + std::to_string(model.order) + " given history of length " +
                std::to_string(history.size()));
  }
  std::vector<Tensor> parts;
  parts.reserve(history.size());
  for (const auto& f : history) {
    if (f.shape != history.front().shape) throw ShapeError("temporal history shapes differ");
    parts.push_back(f.to_tensor());
  }
  return concat_channels(parts);
}

GaussianParams temporal_params(std::span<const QuantizedFeature> history, const TemporalModel& model) {
  return split_params(diffcore::graph_forward(model.transform, model.params, temporal_input(history, model)));
}

}  // namespace tocom::entropy
