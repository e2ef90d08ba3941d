#include "fel/head.hpp"

#include <cmath>
#include <stdexcept>

namespace fel {

namespace {
constexpr int kC1 = 16;
constexpr int kC2 = 32;
}  // namespace

HeadParams HeadParams::init(int in_channels, int input_size, int num_classes,
                            std::uint64_t seed) {
  if (in_channels < 1 || num_classes < 2)
    throw std::invalid_argument("HeadParams: need at least one input channel "
                                "and two classes");
  if (input_size < 4 || input_size % 4 != 0)
    throw std::invalid_argument("HeadParams: input size " +
                                std::to_string(input_size) +
                                " must be a positive multiple of 4");
  HeadParams p;
  p.in_channels = in_channels;
  p.input_size = input_size;
  p.num_classes = num_classes;
  Rng rng(seed);
  auto he = [&rng](Shape shape, int fan_in) {
    Tensor t = Tensor::zeros(std::move(shape));
    const double sd = std::sqrt(2.0 / fan_in);
    for (double& v : t.data) v = rng.gaussian() * sd;
    return t;
  };
  p.c1_w = he({kC1, in_channels, 3, 3}, in_channels * 9);
  p.c1_b = Tensor::zeros({kC1});
  p.c2_w = he({kC2, kC1, 3, 3}, kC1 * 9);
  p.c2_b = Tensor::zeros({kC2});
  const int flat = kC2 * (input_size / 4) * (input_size / 4);
  p.fc_w = he({flat, num_classes}, flat);
  p.fc_b = Tensor::zeros({num_classes});
  return p;
}

void HeadParams::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("head.c1.w", c1_w);
  fn("head.c1.b", c1_b);
  fn("head.c2.w", c2_w);
  fn("head.c2.b", c2_b);
  fn("head.fc.w", fc_w);
  fn("head.fc.b", fc_b);
}

Var head_forward(Var x, HeadParams& p) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  if (xv.rank() != 3 || xv.dim(0) != p.in_channels || xv.dim(1) != p.input_size ||
      xv.dim(2) != p.input_size)
    throw std::invalid_argument(
        "head_forward: expected " + std::to_string(p.in_channels) + "x" +
        std::to_string(p.input_size) + "x" + std::to_string(p.input_size) +
        ", got " + shape_str(xv.shape));
  const ConvSpec s3 = ConvSpec::same(3, 1);
  Var h = relu(conv2d(x, t.param(p.c1_w), t.param(p.c1_b), s3));
  h = max_pool2d(h, 2);
  h = relu(conv2d(h, t.param(p.c2_w), t.param(p.c2_b), s3));
  h = max_pool2d(h, 2);
  const int flat = kC2 * (p.input_size / 4) * (p.input_size / 4);
  Var row = reshape(h, {1, flat});
  Var logits = add(matmul(row, t.param(p.fc_w)),
                   reshape(t.param(p.fc_b), {1, p.num_classes}));
  return reshape(logits, {p.num_classes});
}

EvalResult evaluate(const std::vector<Sample>& samples, HeadParams& head,
                    EnhancerParams* enhancer) {
  if (samples.empty()) return {};
  double loss_sum = 0.0;
  int correct = 0;
  for (const Sample& s : samples) {
    Tape tape;
    Var x = tape.leaf(s.image);
    if (enhancer != nullptr) x = enhance(x, *enhancer);
    Var logits = head_forward(x, head);
    Var loss = cross_entropy(logits, s.label);
    loss_sum += tape.value(loss).data[0];
    const Tensor& lv = tape.value(logits);
    int best = 0;
    for (int c = 1; c < head.num_classes; ++c)
      if (lv.data[static_cast<std::size_t>(c)] >
          lv.data[static_cast<std::size_t>(best)])
        best = c;
    if (best == s.label) ++correct;
  }
  EvalResult out;
  out.loss = loss_sum / static_cast<double>(samples.size());
  out.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  return out;
}

}  // namespace fel
