#include "fel/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fel {

std::vector<double> finite_diff_grad(const std::function<double()>& f,
                                     Tensor& param, double eps) {
  if (eps <= 0.0)
    throw std::invalid_argument("finite_diff_grad: eps must be positive");
  // a non-deterministic objective would make the quotients meaningless
  if (f() != f())
    throw std::logic_error(
        "finite_diff_grad: objective is not deterministic across calls");
  std::vector<double> out(param.data.size());
  for (std::size_t i = 0; i < param.data.size(); ++i) {
    const double saved = param.data[i];
    param.data[i] = saved + eps;
    const double hi = f();
    param.data[i] = saved - eps;
    const double lo = f();
    param.data[i] = saved;
    out[i] = (hi - lo) / (2.0 * eps);
  }
  return out;
}

double max_rel_err(const std::vector<double>& analytic,
                   const std::vector<double>& numeric, double floor) {
  if (analytic.size() != numeric.size())
    throw std::invalid_argument("max_rel_err: size mismatch " +
                                std::to_string(analytic.size()) + " vs " +
                                std::to_string(numeric.size()));
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom =
        std::max(std::abs(analytic[i]) + std::abs(numeric[i]), floor);
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace fel
