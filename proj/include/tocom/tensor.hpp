#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace tocom {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool empty() const { return data.empty(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<double> values() { return data; }
  std::span<const double> values() const { return data; }

  // Same storage, new shape; the element count must not change.
  Tensor reshaped(Shape s) const;

  void fill(double v);
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Concatenates rank-3 (c,h,w) tensors along the channel axis.
Tensor concat_channels(std::span<const Tensor> parts);

// Extracts channels [first, first+count) from a rank-3 tensor.
Tensor slice_channels(const Tensor& t, std::size_t first, std::size_t count);

}  // namespace tocom
