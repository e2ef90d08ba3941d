#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "fel/ops.hpp"
#include "fel/oracle.hpp"
#include "fel/rng.hpp"
#include "fel/tape.hpp"

using namespace fel;

namespace {

Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t = Tensor::zeros(shape);
  Rng rng(seed);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// finite-difference check of a scalar graph against every parameter
double pipeline_worst_err(const std::function<Var(Tape&, std::vector<Var>&)>& build,
                          std::vector<Tensor>& params) {
  auto objective = [&] {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (Tensor& p : params) vars.push_back(tape.param(p));
    Var loss = build(tape, vars);
    return tape.value(loss).data[0];
  };
  for (Tensor& p : params) {
    p.ensure_grad();
    p.zero_grad();
  }
  {
    Tape tape;
    std::vector<Var> vars;
    for (Tensor& p : params) vars.push_back(tape.param(p));
    tape.backward(build(tape, vars));
  }
  double worst = 0.0;
  for (Tensor& p : params) {
    const std::vector<double> numeric = finite_diff_grad(objective, p);
    worst = std::max(worst, max_rel_err(p.grad, numeric));
  }
  return worst;
}

}  // namespace

TEST_CASE("tensor construction and indexing") {
  Tensor t = Tensor::zeros({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rank() == 3);
  t.at(1, 2, 3) = 5.0;
  CHECK(t.data[23] == 5.0);
  Tensor f = Tensor::full({2, 2}, 0.25);
  CHECK(f.data[3] == 0.25);
  CHECK(shape_str({3, 64, 64}) == "[3x64x64]");
}

TEST_CASE("conv2d matches the hand-counted ones-kernel oracle") {
  // all-ones 5x5 input and 3x3 kernel: each output counts the overlapping
  // taps, which is 4 in corners, 6 on edges, 9 inside
  Tape tape;
  Var x = tape.leaf(Tensor::full({1, 5, 5}, 1.0));
  Var w = tape.leaf(Tensor::full({1, 1, 3, 3}, 1.0));
  Var b = tape.leaf(Tensor::zeros({1}));
  Var y = conv2d(x, w, b, ConvSpec::same(3));
  const Tensor& out = tape.value(y);
  REQUIRE(out.shape == Shape{1, 5, 5});
  const double expected[5][5] = {{4, 6, 6, 6, 4},
                                 {6, 9, 9, 9, 6},
                                 {6, 9, 9, 9, 6},
                                 {6, 9, 9, 9, 6},
                                 {4, 6, 6, 6, 4}};
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c)
      CHECK(out.at(0, r, c) == doctest::Approx(expected[r][c]).epsilon(1e-12));
}

TEST_CASE("strided conv output geometry") {
  const ConvSpec spec = ConvSpec::same(7, 4);
  CHECK(spec.padding == 3);
  CHECK(spec.out_size(64) == 16);
  CHECK(spec.out_size(256) == 64);
  CHECK(ConvSpec::same(3, 2).out_size(16) == 8);

  Tape tape;
  Var x = tape.leaf(random_tensor({3, 64, 64}, 11));
  Var w = tape.leaf(random_tensor({5, 3, 7, 7}, 12));
  Var b = tape.leaf(random_tensor({5}, 13));
  Var y = conv2d(x, w, b, spec);
  CHECK(tape.value(y).shape == Shape{5, 16, 16});
}

TEST_CASE("conv2d gradients agree with central differences") {
  std::vector<Tensor> params;
  params.push_back(random_tensor({2, 6, 6}, 21, 0.0, 1.0));   // x
  params.push_back(random_tensor({3, 2, 3, 3}, 22));          // w
  params.push_back(random_tensor({3}, 23));                   // b
  auto build = [](Tape&, std::vector<Var>& v) {
    return sum(relu(conv2d(v[0], v[1], v[2], ConvSpec::same(3, 2))));
  };
  CHECK(pipeline_worst_err(build, params) < 1e-6);
}

TEST_CASE("bilinear resize follows half-pixel sampling") {
  Tape tape;
  Tensor in = Tensor::zeros({1, 1, 2});
  in.data = {1.0, 3.0};
  Var y = bilinear_resize(tape.leaf(in), 1, 4);
  const Tensor& out = tape.value(y);
  REQUIRE(out.shape == Shape{1, 1, 4});
  const double expected[4] = {1.0, 1.5, 2.5, 3.0};
  for (int i = 0; i < 4; ++i)
    CHECK(out.data[static_cast<std::size_t>(i)] ==
          doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("bilinear resize round numbers on a 2x upsample") {
  // 2x2 ramp upsampled to 4x4 keeps corners and interpolates midpoints
  Tape tape;
  Tensor in = Tensor::zeros({1, 2, 2});
  in.data = {0.0, 1.0, 2.0, 3.0};
  Var y = bilinear_upsample(tape.leaf(in), 4, 4);
  const Tensor& out = tape.value(y);
  CHECK(out.at(0, 0, 0) == doctest::Approx(0.0));
  CHECK(out.at(0, 3, 3) == doctest::Approx(3.0));
  CHECK(out.at(0, 0, 3) == doctest::Approx(1.0));
  CHECK(out.at(0, 3, 0) == doctest::Approx(2.0));
  // center of the grid averages all four source pixels
  CHECK(out.at(0, 1, 1) + out.at(0, 1, 2) + out.at(0, 2, 1) +
            out.at(0, 2, 2) ==
        doctest::Approx(6.0));
}

TEST_CASE("bilinear gradients agree with central differences") {
  std::vector<Tensor> params;
  params.push_back(random_tensor({2, 3, 5}, 31));
  auto build = [](Tape&, std::vector<Var>& v) {
    return sum(mul(bilinear_resize(v[0], 7, 4), bilinear_resize(v[0], 7, 4)));
  };
  CHECK(pipeline_worst_err(build, params) < 1e-6);
}

TEST_CASE("adaptive average pool on a ramp") {
  Tape tape;
  Tensor in = Tensor::zeros({1, 4, 4});
  for (int i = 0; i < 16; ++i) in.data[static_cast<std::size_t>(i)] = i;
  Var y = adaptive_avg_pool(tape.leaf(in), 2, 2);
  const Tensor& out = tape.value(y);
  CHECK(out.at(0, 0, 0) == doctest::Approx(2.5));
  CHECK(out.at(0, 0, 1) == doctest::Approx(4.5));
  CHECK(out.at(0, 1, 0) == doctest::Approx(10.5));
  CHECK(out.at(0, 1, 1) == doctest::Approx(12.5));
}

TEST_CASE("adaptive average pool covers uneven extents") {
  // 5 -> 2 bins split as [0,3) and [2,5): every input row lands somewhere
  std::vector<Tensor> params;
  params.push_back(random_tensor({1, 5, 5}, 41));
  auto build = [](Tape&, std::vector<Var>& v) {
    return sum(adaptive_avg_pool(v[0], 2, 2));
  };
  CHECK(pipeline_worst_err(build, params) < 1e-6);

  Tape tape;
  Var y = adaptive_avg_pool(tape.leaf(Tensor::full({1, 5, 5}, 1.0)), 2, 2);
  for (double v : tape.value(y).data) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("max pool takes the window maximum and routes its gradient") {
  Tape tape;
  Tensor in = Tensor::zeros({1, 2, 4});
  in.data = {1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 0.0};
  Var x = tape.leaf(in);
  Var y = max_pool2d(x, 2);
  const Tensor& out = tape.value(y);
  REQUIRE(out.shape == Shape{1, 1, 2});
  CHECK(out.data[0] == 5.0);
  CHECK(out.data[1] == 9.0);

  std::vector<Tensor> params;
  params.push_back(in);
  // distinct values keep the argmax stable under the probe step
  auto build = [](Tape&, std::vector<Var>& v) {
    return sum(max_pool2d(v[0], 2));
  };
  CHECK(pipeline_worst_err(build, params) < 1e-6);
}

TEST_CASE("softmax rows are normalized and match a closed form") {
  Tape tape;
  Tensor in = Tensor::zeros({1, 2});
  in.data = {std::log(2.0), 0.0};
  Var y = softmax_last_dim(tape.leaf(in));
  const Tensor& out = tape.value(y);
  CHECK(out.data[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(out.data[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Tape tape2;
  const Tensor& rows =
      tape2.value(softmax_last_dim(tape2.leaf(random_tensor({8, 5}, 50))));
  for (int r = 0; r < 8; ++r) {
    double s = 0.0;
    for (int c = 0; c < 5; ++c) s += rows.data[static_cast<std::size_t>(r * 5 + c)];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax gradients agree with central differences") {
  std::vector<Tensor> params;
  params.push_back(random_tensor({4, 6}, 51, -3.0, 3.0));
  params.push_back(random_tensor({4, 6}, 52));
  auto build = [](Tape&, std::vector<Var>& v) {
    return sum(mul(softmax_last_dim(v[0]), v[1]));
  };
  CHECK(pipeline_worst_err(build, params) < 1e-6);
}

TEST_CASE("matmul transpose reshape concat and slice") {
  std::vector<Tensor> params;
  params.push_back(random_tensor({3, 4}, 61));
  params.push_back(random_tensor({3, 5}, 62));
  auto build = [](Tape&, std::vector<Var>& v) {
    Var prod = matmul(transpose(v[0]), v[1]);       // [4,5]
    Var grid = reshape(prod, Shape{5, 2, 2});       // channels first
    Var both = concat_channels({grid, grid});       // [10,2,2]
    return mean(slice_channels(both, 4, 9));
  };
  CHECK(pipeline_worst_err(build, params) < 1e-6);

  Tape tape;
  Tensor a = Tensor::zeros({2, 2});
  a.data = {1.0, 2.0, 3.0, 4.0};
  Tensor b = Tensor::zeros({2, 2});
  b.data = {5.0, 6.0, 7.0, 8.0};
  const Tensor& prod = tape.value(matmul(tape.leaf(a), tape.leaf(b)));
  CHECK(prod.data == std::vector<double>{19.0, 22.0, 43.0, 50.0});
}

TEST_CASE("cross entropy of uniform logits is log of the class count") {
  Tape tape;
  Var logits = tape.leaf(Tensor::zeros({4}));
  Var loss = cross_entropy(logits, 2);
  CHECK(tape.value(loss).data[0] ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  std::vector<Tensor> params;
  params.push_back(random_tensor({6}, 71, -2.0, 2.0));
  auto build = [](Tape&, std::vector<Var>& v) {
    return cross_entropy(v[0], 3);
  };
  CHECK(pipeline_worst_err(build, params) < 1e-6);
}

TEST_CASE("relu add scale mean compose") {
  std::vector<Tensor> params;
  params.push_back(random_tensor({2, 3, 3}, 81));
  params.push_back(random_tensor({2, 3, 3}, 82));
  auto build = [](Tape&, std::vector<Var>& v) {
    return mean(relu(add(scale(v[0], 1.5), v[1])));
  };
  CHECK(pipeline_worst_err(build, params) < 1e-6);
}

TEST_CASE("backward rejects a second call and non-scalar losses") {
  Tensor p = random_tensor({3}, 91);
  Tape tape;
  Var v = tape.param(p);
  Var loss = sum(v);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), std::logic_error);

  Tape tape2;
  Var w = tape2.param(p);
  CHECK_THROWS_AS(tape2.backward(w), std::invalid_argument);
}

TEST_CASE("parameter gradients accumulate across tapes until cleared") {
  Tensor p = Tensor::full({2}, 1.0);
  for (int round = 0; round < 2; ++round) {
    Tape tape;
    tape.backward(sum(tape.param(p)));
  }
  REQUIRE(p.has_grad());
  CHECK(p.grad[0] == doctest::Approx(2.0));
  p.zero_grad();
  CHECK(p.grad[0] == 0.0);
}

TEST_CASE("first_nonfinite points at the earliest bad node") {
  Tensor p = Tensor::full({1}, -1.0);
  Tape tape;
  Var v = tape.param(p);
  Var big = scale(v, 1e308);   // still finite
  Var worse = mul(big, big);   // overflows to inf
  (void)worse;
  const std::string where = tape.first_nonfinite();
  CHECK(where == "mul#2");

  Tape clean;
  (void)clean.leaf(Tensor::full({2}, 1.0));
  CHECK(clean.first_nonfinite().empty());
}

TEST_CASE("finite differences reject a nondeterministic objective") {
  Tensor p = Tensor::full({1}, 1.0);
  int calls = 0;
  auto noisy = [&calls]() -> double { return static_cast<double>(calls++); };
  CHECK_THROWS_AS(finite_diff_grad(noisy, p), std::logic_error);
}

TEST_CASE("max_rel_err uses a symmetric denominator with a floor") {
  CHECK(max_rel_err({1.0}, {1.0}) == 0.0);
  CHECK(max_rel_err({0.0}, {0.0}) == 0.0);
  CHECK(max_rel_err({2.0}, {1.0}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("rng streams are stable and independent") {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 8; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK(derive_seed(1, 2, 3) != derive_seed(1, 2, 4));
  CHECK(derive_seed(1, 2, 3) != derive_seed(1, 3, 3));
  CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));

  Rng c(7);
  for (int i = 0; i < 5; ++i) (void)c.uniform();
  const auto snap = c.state();
  const double next = c.uniform();
  Rng d(0);
  d.set_state(snap);
  CHECK(d.uniform() == next);

  Rng e(9);
  for (int i = 0; i < 1000; ++i) {
    const auto v = e.below(10);
    CHECK(v < 10);
  }
}
