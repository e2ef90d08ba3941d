#pragma once

#include <functional>
#include <vector>

#include "fel/tensor.hpp"

namespace fel {

// Central-difference gradient of f with respect to every entry of param.
// f must rebuild its computation from the current parameter values on each
// call; it is evaluated twice per entry and must be deterministic (checked).
std::vector<double> finite_diff_grad(const std::function<double()>& f,
                                     Tensor& param, double eps = 1e-5);

// max over i of |a_i - n_i| / max(|a_i| + |n_i|, floor)
double max_rel_err(const std::vector<double>& analytic,
                   const std::vector<double>& numeric, double floor = 1e-6);

}  // namespace fel
