#pragma once

// Probability models over quantized features. All three models (factorized
// prior, hyperprior conditional, temporal conditional) emit per-element
// Gaussian parameters and share the Gaussian-convolved-with-unit-uniform pmf.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "tocom/diffcore.hpp"
#include "tocom/quantizer.hpp"
#include "tocom/tensor.hpp"

namespace tocom::entropy {

inline constexpr double kSigmaMin = 0.11;
// softplus(kRawSigmaOne) == 1.0
inline constexpr double kRawSigmaOne = 0.54132485461291810;
// Likelihood floor used by the training-time rate estimate.
inline constexpr double kLikelihoodFloor = 1e-9;

struct GaussianParams {
  Tensor mu;
  Tensor sigma;
};

double std_normal_cdf(double x);

// Mass of [x - 0.5, x + 0.5) under N(mu, sigma^2). x may be non-integer
// (training relaxation). Throws if sigma < kSigmaMin.
double gu_likelihood(double x, double mu, double sigma);
double gu_pmf(std::int64_t k, double mu, double sigma);

// Sum of -log2 gu_pmf over elements; 0 for an empty feature.
double gu_bits(const QuantizedFeature& zhat, const GaussianParams& params);
// Same, per element, shaped like zhat.
Tensor gu_bits_map(const QuantizedFeature& zhat, const GaussianParams& params);

// Differentiable rate of a continuous (noisy) tensor, in bits, with
// gradients w.r.t. the value, mu and sigma. Likelihoods are floored at
// kLikelihoodFloor; below the floor the gradient passes through.
struct RelaxedRate {
  double bits = 0.0;
  Tensor d_value;
  Tensor d_mu;
  Tensor d_sigma;
};
RelaxedRate relaxed_bits(const Tensor& value, const GaussianParams& params);

double sigma_from_raw(double raw);
// d(loss)/d(raw) given d(loss)/d(sigma). Clamped outputs pass the gradient
// only when it pushes sigma upward.
double raw_sigma_grad(double raw, double d_sigma);

// Splits a (2C,h,w) transform output into (mu, sigma) of shape (C,h,w).
GaussianParams split_params(const Tensor& raw);
// Gradient w.r.t. the raw (2C,h,w) output.
Tensor split_params_backward(const Tensor& raw, const Tensor& d_mu, const Tensor& d_sigma);

// Per-channel learnable location/scale: entries "mu" and "raw_sigma", each (C).
struct FactorizedPrior {
  diffcore::ParamStore params;
  std::size_t channels() const { return params.at("mu").size(); }
};

FactorizedPrior make_factorized_prior(std::size_t channels);
// Broadcasts per-channel params over a (C,h,w) shape.
GaussianParams factorized_params(const FactorizedPrior& prior, const Shape& shape);
// Accumulates per-element gradients into per-channel prior gradients.
diffcore::ParamStore factorized_params_backward(const FactorizedPrior& prior, const Shape& shape,
                                                const Tensor& d_mu, const Tensor& d_sigma);

struct HyperModel {
  diffcore::NetSpec encoder;
  diffcore::ParamStore encoder_params;
  diffcore::NetSpec decoder;
  diffcore::ParamStore decoder_params;
  FactorizedPrior prior;
};

// Hyper encoder: two convs, the second stride 2 (spatial ceil(h/2) x ceil(w/2)).
// Hyper decoder: dense layers back to (2C,h,w); output layer initialized so
// that mu = 0 and sigma = 1 everywhere.
HyperModel make_hyper_model(const Shape& feature_shape, std::size_t hyper_channels, std::size_t hidden,
                            std::mt19937_64& rng);

enum class Mode { train, infer };

struct HyperResult {
  Tensor v_latent;
  Tensor v_coded;  // noisy in train mode, integer-valued in infer mode
  GaussianParams feature_params;
  diffcore::Trace encoder_trace;
  diffcore::Trace decoder_trace;
};

// `rng` is required in train mode.
HyperResult hyper_path(const Tensor& z, const HyperModel& model, Mode mode, std::mt19937_64* rng = nullptr);

struct TemporalModel {
  diffcore::NetSpec transform;
  diffcore::ParamStore params;
  std::size_t order = 1;
};

TemporalModel make_temporal_model(const Shape& feature_shape, std::size_t order, std::size_t hidden,
                                  std::mt19937_64& rng);

// Channel concatenation of the history, oldest first.
Tensor temporal_input(std::span<const QuantizedFeature> history, const TemporalModel& model);
// `history` holds exactly `order` features in chronological order.
GaussianParams temporal_params(std::span<const QuantizedFeature> history, const TemporalModel& model);

}  // namespace tocom::entropy
