#pragma once

#include <string>

#include "fel/tensor.hpp"

namespace fel {

// Writes a 3xHxW tensor as a binary 8-bit PPM. Values are clamped to [0,1]
// and rounded to the nearest of 256 levels.
void write_ppm(const std::string& path, const Tensor& image);

// Reads a binary 8-bit PPM back into a 3xHxW tensor with values in [0,1].
Tensor read_ppm(const std::string& path);

// Min-max normalizes an arbitrary 3xHxW map into [0,1] for visualization.
// A constant map comes back as all 0.5.
Tensor tensor_to_image(const Tensor& t);

}  // namespace fel
