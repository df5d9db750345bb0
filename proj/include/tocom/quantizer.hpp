#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "tocom/tensor.hpp"

namespace tocom {

// Integer-lattice feature: the unit that is entropy coded and transmitted.
struct QuantizedFeature {
  Shape shape;
  std::vector<std::int32_t> values;
  std::uint16_t device_id = 0;
  std::uint32_t timestamp = 0;

  std::size_t size() const { return values.size(); }
  Tensor to_tensor() const;

  friend bool operator==(const QuantizedFeature&, const QuantizedFeature&) = default;
};

namespace quantizer {

// Nearest integer, ties away from zero. Throws NumericError on non-finite
// input or values outside the int32 range.
QuantizedFeature round_nearest(const Tensor& z, std::uint16_t device_id = 0, std::uint32_t timestamp = 0);

// z + U(-0.5, 0.5), one independent draw per element.
Tensor add_uniform_noise(const Tensor& z, std::mt19937_64& rng);

}  // namespace quantizer
}  // namespace tocom
