#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fel/checkpoint.hpp"
#include "fel/data.hpp"
#include "fel/head.hpp"

namespace fel {

struct TrainSettings {
  int epochs = 2;
  int batch_size = 16;
  std::uint64_t seed = 1;
  bool use_enhancer = true;
  // the seconds column records wall time only on request so that repeated
  // runs with one seed produce byte-identical metrics
  bool wall_clock = false;
  int checkpoint_every = 0;    // extra snapshot every k epochs (0 = off)
  std::string run_label = "default";
  std::string checkpoint_dir;  // empty = keep everything in memory
  OptimizerConfig optimizer;
  EnhancerConfig enhancer;     // consulted when use_enhancer
  std::ostream* progress = nullptr;  // per-epoch status lines, if set
};

struct MetricsRow {
  std::string config;
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double seconds = 0.0;
};

// Renders rows under the fixed header
// config,epoch,train_loss,val_loss,val_acc,seconds
std::string metrics_csv(const std::vector<MetricsRow>& rows);

struct Model {
  std::optional<EnhancerParams> enhancer;
  HeadParams head;

  // enhancer parameters first, then the head, in a fixed order
  void for_each_param(
      const std::function<void(const std::string&, Tensor&)>& fn);
};

Model build_model(const TrainSettings& s, int image_size, int num_classes);
Model model_from_checkpoint(const Checkpoint& ck);
Checkpoint snapshot(Model& model, const OptimizerState& opt, int epochs_done,
                    const Rng& rng);

struct TrainResult {
  std::vector<MetricsRow> metrics;
  double final_val_acc = 0.0;
  std::string final_checkpoint;  // path, empty when nothing was written
};

// Trains from scratch. Deterministic for a fixed dataset and settings.
TrainResult train(const Dataset& ds, const TrainSettings& s);

// Continues a run from a snapshot; the remaining epochs replay exactly as
// they would have in the uninterrupted run.
TrainResult resume(const Dataset& ds, const TrainSettings& s,
                   const std::string& checkpoint_path);

struct AblationRun {
  std::string axis;
  std::string label;
  EnhancerConfig config;
};

// Grid rows for one axis ("aggregation", "fusion", "downsample", "scales",
// "blocks") or "all". Rows derive from `base` with one knob changed.
std::vector<AblationRun> make_grid(const std::string& axis,
                                   const EnhancerConfig& base);

// Trains every row and writes one metrics CSV per axis into out_dir.
void run_ablation(const std::string& axis, const Dataset& ds,
                  const TrainSettings& base, const std::string& out_dir);

}  // namespace fel
