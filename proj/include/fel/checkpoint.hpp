#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fel/data.hpp"
#include "fel/enhancer.hpp"

namespace fel {

enum class OptimizerKind { sgd, adamw };
const char* to_string(OptimizerKind k);
bool parse_optimizer(const std::string& s, OptimizerKind& out);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double lr = 0.01;
  double momentum = 0.9;     // sgd
  double beta1 = 0.9;        // adamw
  double beta2 = 0.999;      // adamw
  double eps = 1e-8;         // adamw
  double weight_decay = 0.0; // adamw, decoupled
};

// Slot buffers are kept in the same order the model visits its parameters.
struct OptimizerState {
  OptimizerConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> slot_m;  // sgd velocity / adamw first moment
  std::vector<Tensor> slot_v;  // adamw second moment, unused for sgd
};

// Everything needed to continue a run exactly where it stopped.
struct Checkpoint {
  bool has_enhancer = false;
  EnhancerConfig enhancer_config;  // meaningful when has_enhancer
  int head_in_channels = 3;
  int head_input_size = 64;
  int head_num_classes = kNumShapeClasses;
  OptimizerState opt;
  int epochs_done = 0;
  std::array<std::uint64_t, 4> rng_state{};
  std::vector<std::pair<std::string, Tensor>> tensors;  // model parameters
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);

// Verifies the digest and version before trusting anything else.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace fel
