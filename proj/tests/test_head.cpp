#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "fel/head.hpp"
#include "fel/oracle.hpp"
#include "fel/rng.hpp"

using namespace fel;

namespace {

Tensor random_image(int channels, int size, std::uint64_t seed) {
  Tensor t = Tensor::zeros({channels, size, size});
  Rng rng(seed);
  for (double& v : t.data) v = rng.uniform(0.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("head produces one logit per class") {
  HeadParams head = HeadParams::init(3, 16, 4, 1);
  Tape tape;
  Var logits = head_forward(tape.leaf(random_image(3, 16, 2)), head);
  CHECK(tape.value(logits).shape == Shape{4});

  HeadParams wide = HeadParams::init(8, 8, 6, 1);
  Tape tape2;
  Var l2 = head_forward(tape2.leaf(random_image(8, 8, 3)), wide);
  CHECK(tape2.value(l2).shape == Shape{6});
}

TEST_CASE("head rejects sizes the two poolings cannot host") {
  CHECK_THROWS_AS(HeadParams::init(3, 10, 4, 1), std::invalid_argument);
  CHECK_THROWS_AS(HeadParams::init(3, 0, 4, 1), std::invalid_argument);
}

TEST_CASE("head gradients agree with central differences") {
  HeadParams head = HeadParams::init(2, 8, 3, 7);
  // push the zero-initialized biases off the relu kinks; at an exact kink
  // the two-sided quotient and the reported subgradient legitimately differ
  Rng jitter(8);
  head.for_each_param([&](const std::string&, Tensor& t) {
    for (double& v : t.data) v += jitter.uniform(-0.05, 0.05);
  });
  Tensor image = random_image(2, 8, 8);
  auto objective = [&] {
    Tape tape;
    Var loss = cross_entropy(head_forward(tape.leaf(image), head), 1);
    return tape.value(loss).data[0];
  };
  std::vector<std::pair<std::string, Tensor*>> params;
  head.for_each_param([&](const std::string& name, Tensor& t) {
    t.ensure_grad();
    t.zero_grad();
    params.emplace_back(name, &t);
  });
  {
    Tape tape;
    tape.backward(cross_entropy(head_forward(tape.leaf(image), head), 1));
  }
  for (auto& [name, p] : params) {
    const std::vector<double> numeric = finite_diff_grad(objective, *p);
    INFO("tensor " << name);
    CHECK(max_rel_err(p->grad, numeric) < 1e-5);
  }
}

TEST_CASE("evaluation reports loss and accuracy over a split") {
  HeadParams head = HeadParams::init(3, 8, 4, 11);
  std::vector<Sample> split;
  for (int i = 0; i < 6; ++i) {
    Sample s;
    s.image = random_image(3, 8, static_cast<std::uint64_t>(20 + i));
    s.label = i % 4;
    split.push_back(std::move(s));
  }
  EvalResult r = evaluate(split, head, nullptr);
  CHECK(std::isfinite(r.loss));
  CHECK(r.accuracy >= 0.0);
  CHECK(r.accuracy <= 1.0);
  EvalResult again = evaluate(split, head, nullptr);
  CHECK(r.loss == again.loss);
  CHECK(r.accuracy == again.accuracy);
}

TEST_CASE("head parameter names enumerate in a fixed order") {
  HeadParams head = HeadParams::init(3, 8, 4, 1);
  std::vector<std::string> names;
  head.for_each_param(
      [&](const std::string& name, Tensor&) { names.push_back(name); });
  const std::vector<std::string> expected = {"head.c1.w", "head.c1.b",
                                             "head.c2.w", "head.c2.b",
                                             "head.fc.w", "head.fc.b"};
  CHECK(names == expected);
}
