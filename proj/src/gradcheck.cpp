#include "fel/gradcheck.hpp"

#include "fel/head.hpp"
#include "fel/oracle.hpp"

namespace fel {

GradCheckReport gradcheck_pipeline(const EnhancerConfig& cfg, int image_size,
                                   std::uint64_t seed, double tolerance) {
  cfg.validate();
  EnhancerParams enh = EnhancerParams::init(cfg, derive_seed(seed, 20, 0));
  const int head_in =
      cfg.output_projection == OutputProjection::to_rgb ? 3 : cfg.channels;
  HeadParams head = HeadParams::init(head_in, image_size, kNumShapeClasses,
                                     derive_seed(seed, 21, 0));
  // Nudge every parameter off the init point. Zero-initialized biases leave
  // dead feature regions whose next pre-activation is exactly 0.0, i.e. the
  // loss sits on a relu kink: the two-sided difference quotient measures the
  // mean of both slopes there while the reverse sweep reports one of them.
  Rng jitter(derive_seed(seed, 23, 0));
  auto nudge = [&jitter](const std::string&, Tensor& t) {
    for (double& v : t.data) v += jitter.uniform(-0.05, 0.05);
  };
  enh.for_each_param(nudge);
  head.for_each_param(nudge);
  Tensor image = Tensor::zeros({3, image_size, image_size});
  Rng rng(derive_seed(seed, 22, 0));
  for (double& v : image.data) v = rng.uniform();
  const int label = 1;

  auto objective = [&]() {
    Tape tape;
    Var x = tape.leaf(image);
    Var logits = head_forward(enhance(x, enh), head);
    return tape.value(cross_entropy(logits, label)).data[0];
  };

  // analytic gradients from one reverse sweep
  std::vector<std::pair<std::string, Tensor*>> params;
  auto visit = [&params](const std::string& name, Tensor& t) {
    t.zero_grad();
    params.emplace_back(name, &t);
  };
  enh.for_each_param(visit);
  head.for_each_param(visit);
  {
    Tape tape;
    Var x = tape.leaf(image);
    Var logits = head_forward(enhance(x, enh), head);
    tape.backward(cross_entropy(logits, label));
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto& [name, tensor] : params) {
    const std::vector<double> numeric = finite_diff_grad(objective, *tensor);
    const double err = max_rel_err(tensor->grad, numeric);
    report.per_tensor.emplace_back(name, err);
    if (err > report.worst_err) {
      report.worst_err = err;
      report.worst_name = name;
    }
  }
  report.pass = report.worst_err < tolerance;
  return report;
}

}  // namespace fel
