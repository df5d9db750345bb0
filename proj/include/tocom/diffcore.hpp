#pragma once

// Small deterministic differentiable kernel: dense/conv2d layers, pointwise
// nonlinearities, a parameter store and an Adam optimizer. Every network in
// the pipeline (extractors, hyper transforms, temporal model, predictors) is
// expressed as a NetSpec evaluated by graph_forward/graph_backward.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tocom/tensor.hpp"

namespace tocom::diffcore {

enum class LayerKind : std::uint8_t { dense, conv2d, relu, leaky_relu, softplus, reshape };

std::string to_string(LayerKind kind);

struct Layer {
  LayerKind kind = LayerKind::relu;
  // dense
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  // conv2d, square kernels
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  // leaky_relu
  double slope = 0.01;
  // reshape
  Shape target;

  bool trainable() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }
};

Layer dense(std::size_t in, std::size_t out);
Layer conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride = 1,
             std::size_t padding = 0);
Layer relu();
Layer leaky_relu(double slope = 0.01);
Layer softplus();
Layer reshape(Shape target);

struct NetSpec {
  Shape input_shape;
  std::vector<Layer> layers;

  // Shapes of every activation: [input, after layer 0, ..., output].
  // Throws ShapeError naming the first layer that does not compose.
  std::vector<Shape> activation_shapes() const;
  Shape output_shape() const { return activation_shapes().back(); }
};

struct Param {
  std::string name;  // "<layer index>.weight" / "<layer index>.bias"
  Tensor value;
};

// Parameters in layer-index order; weights precede biases.
class ParamStore {
 public:
  std::vector<Param> entries;

  std::size_t size() const { return entries.size(); }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  // Zero-valued store with the same names and shapes.
  ParamStore zeros_like() const;
  std::size_t scalar_count() const;

  friend bool operator==(const ParamStore& a, const ParamStore& b);
};

std::string weight_name(std::size_t layer);
std::string bias_name(std::size_t layer);

// Uniform(-b, b) weights with b = sqrt(6 / fan_in) scaled by `gain`, zero biases.
ParamStore init_params(const NetSpec& spec, std::mt19937_64& rng, double gain = 1.0);

// Throws unless `params` holds exactly one correctly shaped weight/bias per trainable layer.
void validate_params(const NetSpec& spec, const ParamStore& params);

// Zeroes the final trainable layer's weights and sets its bias per channel
// (conv) or per output (dense) from `bias_per_group`, repeated in groups.
void set_output_layer(const NetSpec& spec, ParamStore& params, const std::vector<double>& bias_per_group);

// Layer inputs recorded during a forward pass, consumed by the backward pass.
struct Trace {
  std::vector<Tensor> activations;  // activations[i] is the input to layer i; back() is the output
  const Tensor& output() const { return activations.back(); }
};

Trace forward_trace(const NetSpec& spec, const ParamStore& params, const Tensor& input);
Tensor graph_forward(const NetSpec& spec, const ParamStore& params, const Tensor& input);

struct Gradients {
  ParamStore params;
  Tensor input;
};

Gradients backward_trace(const NetSpec& spec, const ParamStore& params, const Trace& trace,
                         const Tensor& out_grad);
Gradients graph_backward(const NetSpec& spec, const ParamStore& params, const Tensor& input,
                         const Tensor& out_grad);

// Adds `src` into `dst` elementwise (same layout required).
void accumulate(ParamStore& dst, const ParamStore& src, double scale = 1.0);
void scale(ParamStore& grads, double factor);

// Max relative error between analytic and central-difference gradients of
// <r, output> over all parameters, for a fixed pseudo-random projection r.
double gradient_check(const NetSpec& spec, const ParamStore& params, const Tensor& input, double eps);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptState {
  AdamConfig config;
  std::uint64_t step = 0;
  ParamStore m;
  ParamStore v;
};

OptState make_opt_state(const ParamStore& params, AdamConfig config = {});

// One bias-corrected Adam update in parameter order. Throws NumericError on
// non-finite gradients.
void adam_step(ParamStore& params, const ParamStore& grads, OptState& state);

}  // namespace tocom::diffcore
