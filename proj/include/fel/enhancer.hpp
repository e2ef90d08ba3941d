#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fel/ops.hpp"
#include "fel/rng.hpp"
#include "fel/tape.hpp"

namespace fel {

// How the two reduced scales are produced from the input image.
enum class DownsampleMethod { conv, maxpool, adaptive_avg_pool, interpolate };

// How two feature maps are merged: plain skip addition, their average, or
// block-wise dot-product attention.
enum class AggregationMode { safa, skip, average };

// Which projection provides the attention values.
enum class ValueSource { keys, queries };

enum class OutputProjection { none, to_rgb };

const char* to_string(DownsampleMethod m);
const char* to_string(AggregationMode m);
const char* to_string(ValueSource v);
const char* to_string(OutputProjection p);
bool parse_downsample(const std::string& s, DownsampleMethod& out);
bool parse_aggregation(const std::string& s, AggregationMode& out);
bool parse_value_source(const std::string& s, ValueSource& out);
bool parse_output_projection(const std::string& s, OutputProjection& out);

struct EnhancerConfig {
  // reduction factors of the two extra scales relative to the input; the
  // second must be a multiple of the first
  std::pair<int, int> scale_pair{4, 8};
  int num_blocks = 8;  // attention blocks the channel axis splits into
  int channels = 32;   // feature width produced by the encoder
  DownsampleMethod downsample_method = DownsampleMethod::conv;
  AggregationMode aggregation_high = AggregationMode::safa;
  AggregationMode aggregation_low = AggregationMode::skip;
  ValueSource value_source = ValueSource::keys;
  bool attention_scaling = false;  // scores times 1/sqrt(d) before softmax
  OutputProjection output_projection = OutputProjection::to_rgb;
  bool share_fen = true;  // one encoder for all scales vs. one per scale

  int attention_dim() const { return channels / num_blocks; }
  void validate() const;  // throws std::invalid_argument
};

// The six-layer encoder with symmetric skip concatenations. Layers 1-3
// narrow nothing; layers 4-6 consume the concat of the running feature and
// its mirror from the first half, so they see 2x channels.
struct FenParams {
  Tensor stem_w, stem_b;
  std::array<Tensor, 6> conv_w;
  std::array<Tensor, 6> conv_b;
};

struct EnhancerParams {
  EnhancerConfig config;
  std::vector<FenParams> fen;  // one entry when shared, three otherwise
  // strided downsampling convolutions (conv method only)
  Tensor down1_w, down1_b, down2_w, down2_b;
  // attention projections (only when the high aggregation is attentional)
  Tensor q1_w, q1_b, q2_w, q2_b, k_w, k_b;
  // optional 1x1 map back to three channels
  Tensor rgb_w, rgb_b;

  static EnhancerParams init(const EnhancerConfig& cfg, std::uint64_t seed);

  // visits every allocated tensor in a fixed order with a stable name
  void for_each_param(
      const std::function<void(const std::string&, Tensor&)>& fn);
};

struct ScalePyramid {
  Var full, mid, low;
};

struct SafaProjection {
  Var q, k;  // token grids on the low-resolution lattice, `channels` deep
};

// Everything the pipeline produces along the way, for inspection and tests.
struct EnhanceTrace {
  ScalePyramid scales;
  Var feat_full, feat_mid, feat_low;
  Var agg_high;
  Var fused;
  Var output;
};

// Builds the two reduced scales from a 3xHxW image.
ScalePyramid build_scales(Var image, EnhancerParams& p);

// Runs the encoder on one scale. `which` picks the per-scale parameter set
// when encoders are not shared (0 = full, 1 = mid, 2 = low).
Var fen_forward(Var x, EnhancerParams& p, int which);

// Projects the full- and mid-scale features onto the low-resolution token
// grid (queries from the full scale, keys from the mid scale).
SafaProjection safa_project(Var feat_full, Var feat_mid, EnhancerParams& p);

// Dot-product attention for one block. q, k, v are [tokens, dim] matrices;
// every query row attends over all key rows.
Var block_attention(Var q, Var k, Var v, bool scaled);

// Splits projections into blocks along the channel axis, attends per block,
// and concatenates the results back into a [channels, h, w] map.
Var safa_forward(Var feat_full, Var feat_mid, EnhancerParams& p);

// Merges the full- and mid-scale features onto the low grid according to
// config.aggregation_high.
Var aggregate_high(Var feat_full, Var feat_mid, EnhancerParams& p);

// Combines the aggregated map with the low-scale features and lifts the
// result to out_h x out_w according to config.aggregation_low.
Var fuse(Var agg_high, Var feat_low, int out_h, int out_w, EnhancerParams& p);

// Full pipeline: scales, per-scale encoding, aggregation, fusion, optional
// projection back to RGB.
Var enhance(Var image, EnhancerParams& p);
EnhanceTrace enhance_trace(Var image, EnhancerParams& p);

// Closed-form number of trainable scalars for a configuration, excluding the
// optional output projection.
std::int64_t param_count(const EnhancerConfig& cfg);

// Total across all allocated tensors (includes the output projection).
std::int64_t param_count_total(EnhancerParams& p);

}  // namespace fel
