#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fel/enhancer.hpp"

namespace fel {

struct GradCheckReport {
  bool pass = false;
  double tolerance = 1e-4;
  double worst_err = 0.0;
  std::string worst_name;
  std::vector<std::pair<std::string, double>> per_tensor;
};

// Differentiates the full pipeline (enhance -> classifier -> loss) on one
// synthetic input and compares every parameter gradient against central
// differences. Deterministic in `seed`.
GradCheckReport gradcheck_pipeline(const EnhancerConfig& cfg, int image_size,
                                   std::uint64_t seed, double tolerance);

}  // namespace fel
