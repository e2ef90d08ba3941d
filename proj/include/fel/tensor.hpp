#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fel {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor of 64-bit floats. The grad buffer is empty unless
// the tensor is used as a trainable parameter.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double value);

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  bool has_grad() const { return !grad.empty(); }
  void ensure_grad();
  void zero_grad();

  // channel-height-width addressing for rank-3 tensors
  double& at(int c, int y, int x);
  double at(int c, int y, int x) const;

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

}  // namespace fel
