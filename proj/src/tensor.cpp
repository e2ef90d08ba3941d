#include "fel/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fel {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape s, std::vector<double> values)
    : shape(std::move(s)), data(std::move(values)) {
  for (int d : shape) {
    if (d <= 0)
      throw std::invalid_argument("tensor dimension must be positive, got " +
                                  shape_str(shape));
  }
  if (numel(shape) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("tensor data length " +
                                std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
}

Tensor Tensor::zeros(Shape s) {
  const auto n = numel(s);
  return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(Shape s, double value) {
  const auto n = numel(s);
  return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), value));
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!grad.empty()) grad.assign(grad.size(), 0.0);
}

double& Tensor::at(int c, int y, int x) {
  const int h = shape[1], w = shape[2];
  return data[static_cast<std::size_t>((static_cast<std::int64_t>(c) * h + y) * w + x)];
}

double Tensor::at(int c, int y, int x) const {
  const int h = shape[1], w = shape[2];
  return data[static_cast<std::size_t>((static_cast<std::int64_t>(c) * h + y) * w + x)];
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace fel
