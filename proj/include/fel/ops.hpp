#pragma once

#include <vector>

#include "fel/tape.hpp"

namespace fel {

// Spatial convolution geometry.
struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int padding = 1;

  // kernel k with the centered padding k/2 used everywhere in this project
  static ConvSpec same(int kernel, int stride = 1);

  // floor((in + 2*padding - kernel) / stride) + 1
  int out_size(int in) const;
};

// 2-d convolution of a CHW tensor. w is [out_c, in_c, k, k], b is [out_c].
Var conv2d(Var x, Var w, Var b, const ConvSpec& spec);

Var relu(Var x);
Var add(Var a, Var b);   // elementwise, shapes must match
Var mul(Var a, Var b);   // elementwise, shapes must match
Var scale(Var x, double factor);

Var concat_channels(const std::vector<Var>& parts);
Var slice_channels(Var x, int begin, int end);  // half-open channel range

Var matmul(Var a, Var b);      // [m,k] x [k,n] -> [m,n]
Var transpose(Var a);          // rank-2 only
Var reshape(Var x, Shape to);  // element count must match

// Softmax over the last axis, independently per row.
Var softmax_last_dim(Var x);

// Bilinear interpolation with half-pixel centers and edge clamping.
Var bilinear_resize(Var x, int out_h, int out_w);
// Same, restricted to enlargement; the fusion path never shrinks a map.
Var bilinear_upsample(Var x, int out_h, int out_w);

Var max_pool2d(Var x, int window);  // stride == window, remainder dropped
Var adaptive_avg_pool(Var x, int out_h, int out_w);

Var sum(Var x);   // scalar
Var mean(Var x);  // scalar

// Softmax cross-entropy of one logit vector against a class index (scalar).
Var cross_entropy(Var logits, int target);

}  // namespace fel
