#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fel/data.hpp"
#include "fel/enhancer.hpp"
#include "fel/ops.hpp"

namespace fel {

// Small convolutional classifier used as the downstream consumer. Two conv
// blocks with 2x2 max pooling, then a linear layer over the flattened map.
struct HeadParams {
  int in_channels = 3;
  int input_size = 64;  // square inputs, must be divisible by 4
  int num_classes = kNumShapeClasses;
  Tensor c1_w, c1_b;  // in_channels -> 16
  Tensor c2_w, c2_b;  // 16 -> 32
  Tensor fc_w, fc_b;  // 32*(input_size/4)^2 -> num_classes

  static HeadParams init(int in_channels, int input_size, int num_classes,
                         std::uint64_t seed);
  void for_each_param(
      const std::function<void(const std::string&, Tensor&)>& fn);
};

// Produces one logit vector of length num_classes.
Var head_forward(Var x, HeadParams& p);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Mean loss and accuracy over a split. With an enhancer, the image runs
// through it first; otherwise the raw image feeds the head directly.
EvalResult evaluate(const std::vector<Sample>& samples, HeadParams& head,
                    EnhancerParams* enhancer);

}  // namespace fel
