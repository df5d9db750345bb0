#include "tocom/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "tocom/error.hpp"

namespace tocom {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != numel(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
}

Tensor Tensor::reshaped(Shape s) const {
  if (numel(s) != data.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
  }
  return Tensor(std::move(s), data);
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& first = parts.front();
  if (first.rank() != 3) throw ShapeError("concat_channels: expected rank-3 tensors");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.rank() != 3 || p.shape[1] != first.shape[1] || p.shape[2] != first.shape[2]) {
      throw ShapeError("concat_channels: spatial mismatch " + shape_str(p.shape) + " vs " +
                       shape_str(first.shape));
    }
    channels += p.shape[0];
  }
  Tensor out({channels, first.shape[1], first.shape[2]});
  auto it = out.data.begin();
  for (const auto& p : parts) it = std::copy(p.data.begin(), p.data.end(), it);
  return out;
}

Tensor slice_channels(const Tensor& t, std::size_t first, std::size_t count) {
  if (t.rank() != 3 || first + count > t.shape[0]) {
    throw ShapeError("slice_channels: bad range on " + shape_str(t.shape));
  }
  const std::size_t plane = t.shape[1] * t.shape[2];
  Tensor out({count, t.shape[1], t.shape[2]});
  std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(first * plane),
            t.data.begin() + static_cast<std::ptrdiff_t>((first + count) * plane), out.data.begin());
  return out;
}

}  // namespace tocom
