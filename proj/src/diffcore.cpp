#include "tocom/diffcore.hpp"

#include <algorithm>
#include <cmath>

#include "tocom/error.hpp"

namespace tocom::diffcore {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::leaky_relu: return "leaky_relu";
    case LayerKind::softplus: return "softplus";
    case LayerKind::reshape: return "reshape";
  }
  return "unknown";
}

Layer dense(std::size_t in, std::size_t out) {
  Layer l;
  l.kind = LayerKind::dense;
  l.in_features = in;
  l.out_features = out;
  return l;
}

Layer conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
             std::size_t padding) {
  Layer l;
  l.kind = LayerKind::conv2d;
  l.in_channels = in_ch;
  l.out_channels = out_ch;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = padding;
  return l;
}

Layer relu() { return Layer{}; }

Layer leaky_relu(double slope) {
  Layer l;
  l.kind = LayerKind::leaky_relu;
  l.slope = slope;
  return l;
}

Layer softplus() {
  Layer l;
  l.kind = LayerKind::softplus;
  return l;
}

Layer reshape(Shape target) {
  Layer l;
  l.kind = LayerKind::reshape;
  l.target = std::move(target);
  return l;
}

namespace {

std::string layer_label(std::size_t index, const Layer& layer) {
  return "layer " + std::to_string(index) + " (" + to_string(layer.kind) + ")";
}

Shape next_shape(std::size_t index, const Layer& layer, const Shape& in) {
  switch (layer.kind) {
    case LayerKind::dense:
      if (in.size() != 1 || in[0] != layer.in_features) {
        throw ShapeError(layer_label(index, layer) + ": expected input (" +
                         std::to_string(layer.in_features) + "), got " + shape_str(in));
      }
      return {layer.out_features};
    case LayerKind::conv2d: {
      if (in.size() != 3 || in[0] != layer.in_channels) {
        throw ShapeError(layer_label(index, layer) + ": expected input with " +
                         std::to_string(layer.in_channels) + " channels, got " + shape_str(in));
      }
      if (layer.kernel == 0 || layer.stride == 0) {
        throw ShapeError(layer_label(index, layer) + ": kernel and stride must be positive");
      }
      const std::size_t h = in[1] + 2 * layer.padding;
      const std::size_t w = in[2] + 2 * layer.padding;
      if (h < layer.kernel || w < layer.kernel) {
        throw ShapeError(layer_label(index, layer) + ": kernel larger than padded input " +
                         shape_str(in));
      }
      return {layer.out_channels, (h - layer.kernel) / layer.stride + 1,
              (w - layer.kernel) / layer.stride + 1};
    }
    case LayerKind::reshape:
      if (numel(layer.target) != numel(in)) {
        throw ShapeError(layer_label(index, layer) + ": cannot reshape " + shape_str(in) + " to " +
                         shape_str(layer.target));
      }
      return layer.target;
    default:
      return in;
  }
}

Shape weight_shape(const Layer& l) {
  if (l.kind == LayerKind::dense) return {l.out_features, l.in_features};
  return {l.out_channels, l.in_channels, l.kernel, l.kernel};
}

Shape bias_shape(const Layer& l) {
  return {l.kind == LayerKind::dense ? l.out_features : l.out_channels};
}

double softplus_value(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void conv_forward(const Layer& l, const Tensor& in, const Tensor& w, const Tensor& b, Tensor& out) {
  const std::size_t cin = in.shape[0], ih = in.shape[1], iw = in.shape[2];
  const std::size_t cout = out.shape[0], oh = out.shape[1], ow = out.shape[2];
  const std::size_t k = l.kernel, s = l.stride;
  const auto p = static_cast<std::ptrdiff_t>(l.padding);
  for (std::size_t co = 0; co < cout; ++co) {
    double* o = out.data.data() + co * oh * ow;
    std::fill(o, o + oh * ow, b[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* src = in.data.data() + ci * ih * iw;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wv = w[((co * cin + ci) * k + ky) * k + kx];
          if (wv == 0.0) continue;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * s + ky) - p;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(ih)) continue;
            const double* row = src + static_cast<std::size_t>(iy) * iw;
            double* orow = o + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * s + kx) - p;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(iw)) continue;
              orow[ox] += wv * row[ix];
            }
          }
        }
      }
    }
  }
}

void conv_backward(const Layer& l, const Tensor& in, const Tensor& w, const Tensor& g, Tensor& dw,
                   Tensor& db, Tensor& din) {
  const std::size_t cin = in.shape[0], ih = in.shape[1], iw = in.shape[2];
  const std::size_t cout = g.shape[0], oh = g.shape[1], ow = g.shape[2];
  const std::size_t k = l.kernel, s = l.stride;
  const auto p = static_cast<std::ptrdiff_t>(l.padding);
  for (std::size_t co = 0; co < cout; ++co) {
    const double* go = g.data.data() + co * oh * ow;
    double bsum = 0.0;
    for (std::size_t i = 0; i < oh * ow; ++i) bsum += go[i];
    db[co] += bsum;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* src = in.data.data() + ci * ih * iw;
      double* dsrc = din.data.data() + ci * ih * iw;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t widx = ((co * cin + ci) * k + ky) * k + kx;
          const double wv = w[widx];
          double acc = 0.0;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * s + ky) - p;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(ih)) continue;
            const double* row = src + static_cast<std::size_t>(iy) * iw;
            double* drow = dsrc + static_cast<std::size_t>(iy) * iw;
            const double* grow = go + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * s + kx) - p;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(iw)) continue;
              acc += grow[ox] * row[ix];
              drow[ix] += wv * grow[ox];
            }
          }
          dw[widx] += acc;
        }
      }
    }
  }
}

}  // namespace

std::vector<Shape> NetSpec::activation_shapes() const {
  if (layers.empty()) throw ShapeError("NetSpec has no layers");
  std::vector<Shape> shapes{input_shape};
  shapes.reserve(layers.size() + 1);
  for (std::size_t i = 0; i < layers.size(); ++i) shapes.push_back(next_shape(i, layers[i], shapes.back()));
  return shapes;
}

std::string weight_name(std::size_t layer) { return std::to_string(layer) + ".weight"; }
std::string bias_name(std::size_t layer) { return std::to_string(layer) + ".bias"; }

Tensor& ParamStore::at(const std::string& name) {
  for (auto& e : entries) {
    if (e.name == name) return e.value;
  }
  throw Error("parameter not found: " + name);
}

const Tensor& ParamStore::at(const std::string& name) const {
  return const_cast<ParamStore*>(this)->at(name);
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(entries.begin(), entries.end(), [&](const Param& p) { return p.name == name; });
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out;
  out.entries.reserve(entries.size());
  for (const auto& e : entries) out.entries.push_back({e.name, Tensor(e.value.shape)});
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.value.size();
  return n;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.entries.size() != b.entries.size()) return false;
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    if (a.entries[i].name != b.entries[i].name || !(a.entries[i].value == b.entries[i].value)) return false;
  }
  return true;
}

ParamStore init_params(const NetSpec& spec, std::mt19937_64& rng, double gain) {
  spec.activation_shapes();
  ParamStore store;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& l = spec.layers[i];
    if (!l.trainable()) continue;
    Tensor w(weight_shape(l));
    const double fan_in = static_cast<double>(w.size() / w.shape[0]);
    const double bound = gain * std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : w.data) v = dist(rng);
    store.entries.push_back({weight_name(i), std::move(w)});
    store.entries.push_back({bias_name(i), Tensor(bias_shape(l))});
  }
  return store;
}

void validate_params(const NetSpec& spec, const ParamStore& params) {
  std::size_t expected = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& l = spec.layers[i];
    if (!l.trainable()) continue;
    expected += 2;
    if (!params.contains(weight_name(i)) || !params.contains(bias_name(i))) {
      throw ShapeError("missing parameters for " + layer_label(i, l));
    }
    if (params.at(weight_name(i)).shape != weight_shape(l) || params.at(bias_name(i)).shape != bias_shape(l)) {
      throw ShapeError("parameter shape mismatch for " + layer_label(i, l));
    }
  }
  if (expected != params.size()) throw ShapeError("parameter store has extra entries");
}

void set_output_layer(const NetSpec& spec, ParamStore& params, const std::vector<double>& bias_per_group) {
  for (std::size_t i = spec.layers.size(); i-- > 0;) {
    if (!spec.layers[i].trainable()) continue;
    params.at(weight_name(i)).fill(0.0);
    Tensor& b = params.at(bias_name(i));
    if (bias_per_group.empty()) {
      b.fill(0.0);
      return;
    }
    const std::size_t group = b.size() / bias_per_group.size();
    if (group == 0 || group * bias_per_group.size() != b.size()) {
      throw ShapeError("set_output_layer: bias groups do not divide output size");
    }
    for (std::size_t j = 0; j < b.size(); ++j) b[j] = bias_per_group[j / group];
    return;
  }
  throw ShapeError("set_output_layer: network has no trainable layer");
}

Trace forward_trace(const NetSpec& spec, const ParamStore& params, const Tensor& input) {
  const auto shapes = spec.activation_shapes();
  if (input.shape != spec.input_shape) {
    throw ShapeError("input shape " + shape_str(input.shape) + " does not match declared " +
                     shape_str(spec.input_shape));
  }
  Trace trace;
  trace.activations.reserve(spec.layers.size() + 1);
  trace.activations.push_back(input);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& l = spec.layers[i];
    const Tensor& in = trace.activations.back();
    Tensor out(shapes[i + 1]);
    switch (l.kind) {
      case LayerKind::dense: {
        const Tensor& w = params.at(weight_name(i));
        const Tensor& b = params.at(bias_name(i));
        for (std::size_t o = 0; o < l.out_features; ++o) {
          double acc = b[o];
          const double* row = w.data.data() + o * l.in_features;
          for (std::size_t j = 0; j < l.in_features; ++j) acc += row[j] * in[j];
          out[o] = acc;
        }
        break;
      }
      case LayerKind::conv2d:
        conv_forward(l, in, params.at(weight_name(i)), params.at(bias_name(i)), out);
        break;
      case LayerKind::relu:
        for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] > 0 ? in[j] : 0.0;
        break;
      case LayerKind::leaky_relu:
        for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] > 0 ? in[j] : l.slope * in[j];
        break;
      case LayerKind::softplus:
        for (std::size_t j = 0; j < in.size(); ++j) out[j] = softplus_value(in[j]);
        break;
      case LayerKind::reshape:
        out.data = in.data;
        break;
    }
    trace.activations.push_back(std::move(out));
  }
  return trace;
}

Tensor graph_forward(const NetSpec& spec, const ParamStore& params, const Tensor& input) {
  return std::move(forward_trace(spec, params, input).activations.back());
}

Gradients backward_trace(const NetSpec& spec, const ParamStore& params, const Trace& trace,
                         const Tensor& out_grad) {
  if (out_grad.shape != trace.output().shape) {
    throw ShapeError("output gradient shape " + shape_str(out_grad.shape) + " does not match output " +
                     shape_str(trace.output().shape));
  }
  Gradients grads{params.zeros_like(), {}};
  Tensor g = out_grad;
  for (std::size_t i = spec.layers.size(); i-- > 0;) {
    const Layer& l = spec.layers[i];
    const Tensor& in = trace.activations[i];
    Tensor din(in.shape);
    switch (l.kind) {
      case LayerKind::dense: {
        const Tensor& w = params.at(weight_name(i));
        Tensor& dw = grads.params.at(weight_name(i));
        Tensor& db = grads.params.at(bias_name(i));
        for (std::size_t o = 0; o < l.out_features; ++o) {
          const double go = g[o];
          db[o] += go;
          if (go == 0.0) continue;
          const double* row = w.data.data() + o * l.in_features;
          double* drow = dw.data.data() + o * l.in_features;
          for (std::size_t j = 0; j < l.in_features; ++j) {
            drow[j] += go * in[j];
            din[j] += go * row[j];
          }
        }
        break;
      }
      case LayerKind::conv2d:
        conv_backward(l, in, params.at(weight_name(i)), g, grads.params.at(weight_name(i)),
                      grads.params.at(bias_name(i)), din);
        break;
      case LayerKind::relu:
        for (std::size_t j = 0; j < in.size(); ++j) din[j] = in[j] > 0 ? g[j] : 0.0;
        break;
      case LayerKind::leaky_relu:
        for (std::size_t j = 0; j < in.size(); ++j) din[j] = in[j] > 0 ? g[j] : l.slope * g[j];
        break;
      case LayerKind::softplus:
        for (std::size_t j = 0; j < in.size(); ++j) din[j] = g[j] * sigmoid(in[j]);
        break;
      case LayerKind::reshape:
        din.data = g.data;
        break;
    }
    g = std::move(din);
  }
  grads.input = std::move(g);
  return grads;
}

Gradients graph_backward(const NetSpec& spec, const ParamStore& params, const Tensor& input,
                         const Tensor& out_grad) {
  return backward_trace(spec, params, forward_trace(spec, params, input), out_grad);
}

void accumulate(ParamStore& dst, const ParamStore& src, double factor) {
  if (dst.entries.size() != src.entries.size()) throw ShapeError("accumulate: store size mismatch");
  for (std::size_t i = 0; i < dst.entries.size(); ++i) {
    auto& d = dst.entries[i].value.data;
    const auto& s = src.entries[i].value.data;
    if (d.size() != s.size()) throw ShapeError("accumulate: entry size mismatch at " + dst.entries[i].name);
    for (std::size_t j = 0; j < d.size(); ++j) d[j] += factor * s[j];
  }
}

void scale(ParamStore& grads, double factor) {
  for (auto& e : grads.entries) {
    for (double& v : e.value.data) v *= factor;
  }
}

double gradient_check(const NetSpec& spec, const ParamStore& params, const Tensor& input, double eps) {
  if (!(eps > 0)) throw Error("gradient_check: eps must be positive");
  const Shape out_shape = spec.output_shape();
  Tensor projection(out_shape);
  std::mt19937_64 rng(0x5eedULL);
  std::uniform_real_distribution<double> dist(0.5, 1.5);
  for (double& v : projection.data) v = dist(rng);

  auto objective = [&](const ParamStore& p) {
    const Tensor out = graph_forward(spec, p, input);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += projection[i] * out[i];
    if (!std::isfinite(acc)) throw NumericError("gradient_check: non-finite objective");
    return acc;
  };

  const Gradients analytic = graph_backward(spec, params, input, projection);
  ParamStore work = params;
  double worst = 0.0;
  for (std::size_t e = 0; e < work.entries.size(); ++e) {
    auto& values = work.entries[e].value.data;
    const auto& grad = analytic.params.entries[e].value.data;
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + eps;
      const double up = objective(work);
      values[j] = saved - eps;
      const double down = objective(work);
      values[j] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(grad[j]), std::abs(numeric), 1e-12});
      worst = std::max(worst, std::abs(grad[j] - numeric) / denom);
    }
  }
  return worst;
}

OptState make_opt_state(const ParamStore& params, AdamConfig config) {
  return OptState{config, 0, params.zeros_like(), params.zeros_like()};
}

void adam_step(ParamStore& params, const ParamStore& grads, OptState& state) {
  if (params.entries.size() != grads.entries.size() || params.entries.size() != state.m.entries.size()) {
    throw ShapeError("adam_step: parameter/gradient/state layout mismatch");
  }
  for (const auto& e : grads.entries) {
    for (double v : e.value.data) {
      if (!std::isfinite(v)) throw NumericError("adam_step: non-finite gradient in " + e.name);
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t e = 0; e < params.entries.size(); ++e) {
    auto& p = params.entries[e].value.data;
    const auto& g = grads.entries[e].value.data;
    auto& m = state.m.entries[e].value.data;
    auto& v = state.v.entries[e].value.data;
    if (p.size() != g.size() || p.size() != m.size()) {
      throw ShapeError("adam_step: size mismatch at " + params.entries[e].name);
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

}  // namespace tocom::diffcore
