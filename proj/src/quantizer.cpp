#include "tocom/quantizer.hpp"

#include <cmath>

#include "tocom/error.hpp"

namespace tocom {

Tensor QuantizedFeature::to_tensor() const {
  Tensor t(shape);
  for (std::size_t i = 0; i < values.size(); ++i) t[i] = values[i];
  return t;
}

namespace quantizer {

QuantizedFeature round_nearest(const Tensor& z, std::uint16_t device_id, std::uint32_t timestamp) {
  QuantizedFeature q;
  q.shape = z.shape;
  q.device_id = device_id;
  q.timestamp = timestamp;
  q.values.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double v = z[i];
    if (!std::isfinite(v)) throw NumericError("round_nearest: non-finite input at element " + std::to_string(i));
    // std::round rounds halfway cases away from zero.
    const double r = std::round(v);
    if (r < -2147483648.0 || r > 2147483647.0) {
      throw NumericError("round_nearest: value out of int32 range at element " + std::to_string(i));
    }
    q.values[i] = static_cast<std::int32_t>(r);
  }
  return q;
}

Tensor add_uniform_noise(const Tensor& z, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-0.5, 0.5);
  Tensor out = z;
  for (double& v : out.data) v += dist(rng);
  return out;
}

}  // namespace quantizer
}  // namespace tocom
