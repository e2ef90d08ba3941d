#include "fel/enhancer.hpp"

#include <cmath>
#include <stdexcept>

namespace fel {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

// strided same-padding convs use the smallest odd kernel covering the stride
int kernel_for_stride(int stride) { return 2 * stride - 1; }

std::int64_t conv_param_count(int out_c, int in_c, int k) {
  return static_cast<std::int64_t>(out_c) * in_c * k * k + out_c;
}

[[noreturn]] void config_error(const std::string& detail) {
  throw std::invalid_argument("EnhancerConfig: " + detail);
}

// [channels, h, w] -> num_blocks matrices of shape [h*w, dim]
std::vector<Var> split_blocks(Var feat, int num_blocks) {
  Tape& t = *feat.tape;
  const Tensor& fv = t.value(feat);
  const int c = fv.dim(0), h = fv.dim(1), w = fv.dim(2);
  const int d = c / num_blocks;
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(num_blocks));
  for (int n = 0; n < num_blocks; ++n) {
    Var block = slice_channels(feat, n * d, (n + 1) * d);
    out.push_back(transpose(reshape(block, {d, h * w})));
  }
  return out;
}

// inverse of split_blocks once every block has been transformed
Var merge_blocks(const std::vector<Var>& blocks, int h, int w) {
  std::vector<Var> maps;
  maps.reserve(blocks.size());
  for (Var b : blocks) {
    const Tensor& bv = b.tape->value(b);
    maps.push_back(reshape(transpose(b), {bv.dim(1), h, w}));
  }
  return concat_channels(maps);
}

// block attention where the first map provides queries and the second keys;
// used by the attentional aggregation paths
Var block_attention_map(Var query_map, Var key_map, const EnhancerConfig& cfg) {
  Tape& t = *query_map.tape;
  const Tensor& qv = t.value(query_map);
  const Tensor& kv = t.value(key_map);
  if (!qv.same_shape(kv))
    throw std::invalid_argument("attention: query grid " + shape_str(qv.shape) +
                                " does not match key grid " +
                                shape_str(kv.shape));
  std::vector<Var> qs = split_blocks(query_map, cfg.num_blocks);
  std::vector<Var> ks = split_blocks(key_map, cfg.num_blocks);
  std::vector<Var> outs;
  outs.reserve(qs.size());
  for (std::size_t n = 0; n < qs.size(); ++n) {
    Var v = cfg.value_source == ValueSource::keys ? ks[n] : qs[n];
    outs.push_back(block_attention(qs[n], ks[n], v, cfg.attention_scaling));
  }
  return merge_blocks(outs, qv.dim(1), qv.dim(2));
}

}  // namespace

const char* to_string(DownsampleMethod m) {
  switch (m) {
    case DownsampleMethod::conv: return "conv";
    case DownsampleMethod::maxpool: return "maxpool";
    case DownsampleMethod::adaptive_avg_pool: return "adaptive_avg_pool";
    case DownsampleMethod::interpolate: return "interpolate";
  }
  return "?";
}

const char* to_string(AggregationMode m) {
  switch (m) {
    case AggregationMode::safa: return "safa";
    case AggregationMode::skip: return "sc";
    case AggregationMode::average: return "average";
  }
  return "?";
}

const char* to_string(ValueSource v) {
  return v == ValueSource::keys ? "k" : "q";
}

const char* to_string(OutputProjection p) {
  return p == OutputProjection::to_rgb ? "to_rgb" : "none";
}

bool parse_downsample(const std::string& s, DownsampleMethod& out) {
  if (s == "conv") out = DownsampleMethod::conv;
  else if (s == "maxpool") out = DownsampleMethod::maxpool;
  else if (s == "adaptive_avg_pool" || s == "adavgpool")
    out = DownsampleMethod::adaptive_avg_pool;
  else if (s == "interpolate" || s == "interpolation")
    out = DownsampleMethod::interpolate;
  else return false;
  return true;
}

bool parse_aggregation(const std::string& s, AggregationMode& out) {
  if (s == "safa") out = AggregationMode::safa;
  else if (s == "sc" || s == "skip") out = AggregationMode::skip;
  else if (s == "average" || s == "avg") out = AggregationMode::average;
  else return false;
  return true;
}

bool parse_value_source(const std::string& s, ValueSource& out) {
  if (s == "k" || s == "keys") out = ValueSource::keys;
  else if (s == "q" || s == "queries") out = ValueSource::queries;
  else return false;
  return true;
}

bool parse_output_projection(const std::string& s, OutputProjection& out) {
  if (s == "to_rgb") out = OutputProjection::to_rgb;
  else if (s == "none") out = OutputProjection::none;
  else return false;
  return true;
}

void EnhancerConfig::validate() const {
  const int a = scale_pair.first, b = scale_pair.second;
  if (a < 2) config_error("first scale factor must be at least 2, got " +
                          std::to_string(a));
  if (b <= a) config_error("second scale factor " + std::to_string(b) +
                           " must exceed the first " + std::to_string(a));
  if (b % a != 0)
    config_error("second scale factor " + std::to_string(b) +
                 " must be a multiple of the first " + std::to_string(a));
  if (channels < 1)
    config_error("channels must be positive, got " + std::to_string(channels));
  if (num_blocks < 1)
    config_error("num_blocks must be positive, got " +
                 std::to_string(num_blocks));
  if (channels % num_blocks != 0)
    config_error("channels " + std::to_string(channels) +
                 " must split evenly into " + std::to_string(num_blocks) +
                 " blocks");
}

EnhancerParams EnhancerParams::init(const EnhancerConfig& cfg,
                                    std::uint64_t seed) {
  cfg.validate();
  EnhancerParams p;
  p.config = cfg;
  Rng rng(seed);
  auto he_conv = [&rng](int out_c, int in_c, int k) {
    Tensor w = Tensor::zeros({out_c, in_c, k, k});
    const double sd = std::sqrt(2.0 / (in_c * k * k));
    for (double& v : w.data) v = rng.gaussian() * sd;
    return w;
  };
  const int c = cfg.channels;
  auto make_fen = [&] {
    FenParams f;
    f.stem_w = he_conv(c, 3, 3);
    f.stem_b = Tensor::zeros({c});
    for (int i = 0; i < 6; ++i) {
      const int in_c = i < 3 ? c : 2 * c;
      f.conv_w[static_cast<std::size_t>(i)] = he_conv(c, in_c, 3);
      f.conv_b[static_cast<std::size_t>(i)] = Tensor::zeros({c});
    }
    return f;
  };
  p.fen.push_back(make_fen());
  if (!cfg.share_fen) {
    p.fen.push_back(make_fen());
    p.fen.push_back(make_fen());
  }
  const int s1 = cfg.scale_pair.first;
  const int s2 = cfg.scale_pair.second / s1;
  if (cfg.downsample_method == DownsampleMethod::conv) {
    p.down1_w = he_conv(3, 3, kernel_for_stride(s1));
    p.down1_b = Tensor::zeros({3});
    p.down2_w = he_conv(3, 3, kernel_for_stride(s2));
    p.down2_b = Tensor::zeros({3});
  }
  if (cfg.aggregation_high == AggregationMode::safa) {
    p.q1_w = he_conv(c, c, kernel_for_stride(s1));
    p.q1_b = Tensor::zeros({c});
    p.q2_w = he_conv(c, c, kernel_for_stride(s2));
    p.q2_b = Tensor::zeros({c});
    p.k_w = he_conv(c, c, kernel_for_stride(s2));
    p.k_b = Tensor::zeros({c});
  }
  if (cfg.output_projection == OutputProjection::to_rgb) {
    p.rgb_w = he_conv(3, c, 1);
    p.rgb_b = Tensor::zeros({3});
  }
  return p;
}

void EnhancerParams::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  static const char* kFenNames[3] = {"fen_full", "fen_mid", "fen_low"};
  for (std::size_t i = 0; i < fen.size(); ++i) {
    const std::string prefix = config.share_fen ? "fen" : kFenNames[i];
    FenParams& f = fen[i];
    fn(prefix + ".stem.w", f.stem_w);
    fn(prefix + ".stem.b", f.stem_b);
    for (int l = 0; l < 6; ++l) {
      const std::string layer = prefix + ".conv" + std::to_string(l + 1);
      fn(layer + ".w", f.conv_w[static_cast<std::size_t>(l)]);
      fn(layer + ".b", f.conv_b[static_cast<std::size_t>(l)]);
    }
  }
  if (!down1_w.data.empty()) {
    fn("down1.w", down1_w);
    fn("down1.b", down1_b);
    fn("down2.w", down2_w);
    fn("down2.b", down2_b);
  }
  if (!q1_w.data.empty()) {
    fn("safa.q1.w", q1_w);
    fn("safa.q1.b", q1_b);
    fn("safa.q2.w", q2_w);
    fn("safa.q2.b", q2_b);
    fn("safa.k.w", k_w);
    fn("safa.k.b", k_b);
  }
  if (!rgb_w.data.empty()) {
    fn("to_rgb.w", rgb_w);
    fn("to_rgb.b", rgb_b);
  }
}

ScalePyramid build_scales(Var image, EnhancerParams& p) {
  Tape& t = *image.tape;
  const Tensor& iv = t.value(image);
  if (iv.rank() != 3 || iv.dim(0) != 3)
    throw std::invalid_argument("build_scales: expected a 3xHxW image, got " +
                                shape_str(iv.shape));
  const int h = iv.dim(1), w = iv.dim(2);
  const int s1 = p.config.scale_pair.first;
  const int s2 = p.config.scale_pair.second / s1;
  ScalePyramid out;
  out.full = image;
  switch (p.config.downsample_method) {
    case DownsampleMethod::conv:
      out.mid = conv2d(image, t.param(p.down1_w), t.param(p.down1_b),
                       ConvSpec::same(kernel_for_stride(s1), s1));
      out.low = conv2d(out.mid, t.param(p.down2_w), t.param(p.down2_b),
                       ConvSpec::same(kernel_for_stride(s2), s2));
      break;
    case DownsampleMethod::maxpool:
      out.mid = max_pool2d(image, s1);
      out.low = max_pool2d(out.mid, s2);
      break;
    case DownsampleMethod::adaptive_avg_pool:
      out.mid = adaptive_avg_pool(image, ceil_div(h, s1), ceil_div(w, s1));
      out.low = adaptive_avg_pool(out.mid, ceil_div(ceil_div(h, s1), s2),
                                  ceil_div(ceil_div(w, s1), s2));
      break;
    case DownsampleMethod::interpolate:
      out.mid = bilinear_resize(image, ceil_div(h, s1), ceil_div(w, s1));
      out.low = bilinear_resize(out.mid, ceil_div(ceil_div(h, s1), s2),
                                ceil_div(ceil_div(w, s1), s2));
      break;
  }
  return out;
}

Var fen_forward(Var x, EnhancerParams& p, int which) {
  if (which < 0 || which > 2)
    throw std::invalid_argument("fen_forward: scale index " +
                                std::to_string(which) + " out of range");
  FenParams& f = p.fen[p.config.share_fen ? 0 : static_cast<std::size_t>(which)];
  Tape& t = *x.tape;
  const ConvSpec s3 = ConvSpec::same(3, 1);
  auto layer = [&](Var in, Tensor& w, Tensor& b) {
    return relu(conv2d(in, t.param(w), t.param(b), s3));
  };
  Var x0 = layer(x, f.stem_w, f.stem_b);
  Var x1 = layer(x0, f.conv_w[0], f.conv_b[0]);
  Var x2 = layer(x1, f.conv_w[1], f.conv_b[1]);
  Var x3 = layer(x2, f.conv_w[2], f.conv_b[2]);
  // second half mirrors the first through channel concatenation
  Var x4 = layer(concat_channels({x3, x2}), f.conv_w[3], f.conv_b[3]);
  Var x5 = layer(concat_channels({x4, x1}), f.conv_w[4], f.conv_b[4]);
  Var x6 = layer(concat_channels({x5, x0}), f.conv_w[5], f.conv_b[5]);
  return x6;
}

SafaProjection safa_project(Var feat_full, Var feat_mid, EnhancerParams& p) {
  if (p.q1_w.data.empty())
    throw std::logic_error(
        "safa_project: attention projections are not allocated under this "
        "configuration");
  Tape& t = *feat_full.tape;
  const int s1 = p.config.scale_pair.first;
  const int s2 = p.config.scale_pair.second / s1;
  Var q = conv2d(feat_full, t.param(p.q1_w), t.param(p.q1_b),
                 ConvSpec::same(kernel_for_stride(s1), s1));
  q = conv2d(q, t.param(p.q2_w), t.param(p.q2_b),
             ConvSpec::same(kernel_for_stride(s2), s2));
  Var k = conv2d(feat_mid, t.param(p.k_w), t.param(p.k_b),
                 ConvSpec::same(kernel_for_stride(s2), s2));
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  if (!qv.same_shape(kv))
    throw std::invalid_argument(
        "safa_project: query grid " + shape_str(qv.shape) +
        " does not line up with key grid " + shape_str(kv.shape) +
        "; input sizes must be divisible by the scale factors");
  return {q, k};
}

Var block_attention(Var q, Var k, Var v, bool scaled) {
  Tape& t = *q.tape;
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  const Tensor& vv = t.value(v);
  if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2)
    throw std::invalid_argument("block_attention: operands must be matrices");
  if (qv.dim(1) != kv.dim(1))
    throw std::invalid_argument("block_attention: query dim " +
                                std::to_string(qv.dim(1)) +
                                " does not match key dim " +
                                std::to_string(kv.dim(1)));
  if (kv.dim(0) != vv.dim(0))
    throw std::invalid_argument("block_attention: " +
                                std::to_string(kv.dim(0)) + " keys vs " +
                                std::to_string(vv.dim(0)) + " values");
  Var scores = matmul(q, transpose(k));
  if (scaled)
    scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(qv.dim(1))));
  return matmul(softmax_last_dim(scores), v);
}

Var safa_forward(Var feat_full, Var feat_mid, EnhancerParams& p) {
  SafaProjection proj = safa_project(feat_full, feat_mid, p);
  return block_attention_map(proj.q, proj.k, p.config);
}

Var aggregate_high(Var feat_full, Var feat_mid, EnhancerParams& p) {
  if (p.config.aggregation_high == AggregationMode::safa)
    return safa_forward(feat_full, feat_mid, p);
  Tape& t = *feat_full.tape;
  const Tensor& fv = t.value(feat_full);
  const int b = p.config.scale_pair.second;
  const int hb = ceil_div(fv.dim(1), b), wb = ceil_div(fv.dim(2), b);
  Var s = add(bilinear_resize(feat_full, hb, wb),
              bilinear_resize(feat_mid, hb, wb));
  return p.config.aggregation_high == AggregationMode::average ? scale(s, 0.5)
                                                               : s;
}

Var fuse(Var agg_high, Var feat_low, int out_h, int out_w, EnhancerParams& p) {
  Var up_agg = bilinear_upsample(agg_high, out_h, out_w);
  switch (p.config.aggregation_low) {
    case AggregationMode::skip:
      return add(up_agg, bilinear_upsample(feat_low, out_h, out_w));
    case AggregationMode::average:
      return scale(add(up_agg, bilinear_upsample(feat_low, out_h, out_w)),
                   0.5);
    case AggregationMode::safa: {
      // parameter-free: the aggregate queries the low-scale features, and
      // the attended result replaces the raw low-scale contribution
      Var attended = block_attention_map(agg_high, feat_low, p.config);
      return add(up_agg, bilinear_upsample(attended, out_h, out_w));
    }
  }
  throw std::logic_error("fuse: unhandled aggregation mode");
}

EnhanceTrace enhance_trace(Var image, EnhancerParams& p) {
  p.config.validate();
  Tape& t = *image.tape;
  const Tensor& iv = t.value(image);
  if (iv.rank() != 3 || iv.dim(0) != 3)
    throw std::invalid_argument("enhance: expected a 3xHxW image, got " +
                                shape_str(iv.shape));
  const int b = p.config.scale_pair.second;
  if (iv.dim(1) % b != 0 || iv.dim(2) % b != 0)
    throw std::invalid_argument(
        "enhance: input " + std::to_string(iv.dim(1)) + "x" +
        std::to_string(iv.dim(2)) + " must be divisible by the coarse scale " +
        std::to_string(b));
  EnhanceTrace tr;
  tr.scales = build_scales(image, p);
  tr.feat_full = fen_forward(tr.scales.full, p, 0);
  tr.feat_mid = fen_forward(tr.scales.mid, p, 1);
  tr.feat_low = fen_forward(tr.scales.low, p, 2);
  tr.agg_high = aggregate_high(tr.feat_full, tr.feat_mid, p);
  tr.fused = fuse(tr.agg_high, tr.feat_low, iv.dim(1), iv.dim(2), p);
  if (p.config.output_projection == OutputProjection::to_rgb) {
    tr.output = conv2d(tr.fused, t.param(p.rgb_w), t.param(p.rgb_b),
                       ConvSpec{1, 1, 0});
  } else {
    tr.output = tr.fused;
  }
  return tr;
}

Var enhance(Var image, EnhancerParams& p) {
  return enhance_trace(image, p).output;
}

std::int64_t param_count(const EnhancerConfig& cfg) {
  cfg.validate();
  const int c = cfg.channels;
  std::int64_t fen = conv_param_count(c, 3, 3);
  fen += 3 * conv_param_count(c, c, 3);
  fen += 3 * conv_param_count(c, 2 * c, 3);
  std::int64_t total = cfg.share_fen ? fen : 3 * fen;
  const int s1 = cfg.scale_pair.first;
  const int s2 = cfg.scale_pair.second / s1;
  if (cfg.downsample_method == DownsampleMethod::conv) {
    total += conv_param_count(3, 3, kernel_for_stride(s1));
    total += conv_param_count(3, 3, kernel_for_stride(s2));
  }
  if (cfg.aggregation_high == AggregationMode::safa) {
    total += conv_param_count(c, c, kernel_for_stride(s1));
    total += 2 * conv_param_count(c, c, kernel_for_stride(s2));
  }
  return total;
}

std::int64_t param_count_total(EnhancerParams& p) {
  std::int64_t total = 0;
  p.for_each_param(
      [&total](const std::string&, Tensor& t) { total += t.size(); });
  return total;
}

}  // namespace fel
