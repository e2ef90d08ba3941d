#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fel/checkpoint.hpp"
#include "fel/data.hpp"
#include "fel/gradcheck.hpp"
#include "fel/image.hpp"
#include "fel/serialize.hpp"
#include "fel/trainer.hpp"

namespace {

using namespace fel;

// bad flag combinations exit with 2, runtime failures with 1
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EnhancerCliOpts {
  int scale_mid = 4;
  int scale_low = 8;
  int blocks = 8;
  int channels = 32;
  std::string downsample = "conv";
  std::string agg_high = "safa";
  std::string agg_low = "sc";
  std::string value_source = "k";
  std::string projection = "to_rgb";
  bool attention_scaling = false;
  bool no_share_fen = false;
};

void add_enhancer_options(CLI::App* cmd, EnhancerCliOpts& o) {
  cmd->add_option("--scale-mid", o.scale_mid, "first reduction factor")
      ->capture_default_str();
  cmd->add_option("--scale-low", o.scale_low,
                  "second reduction factor (multiple of the first)")
      ->capture_default_str();
  cmd->add_option("--blocks", o.blocks, "attention blocks")
      ->capture_default_str();
  cmd->add_option("--channels", o.channels, "feature width")
      ->capture_default_str();
  cmd->add_option("--downsample", o.downsample, "scale construction method")
      ->check(CLI::IsMember(
          {"conv", "maxpool", "adaptive_avg_pool", "interpolate"}))
      ->capture_default_str();
  cmd->add_option("--agg-high", o.agg_high, "full/mid scale aggregation")
      ->check(CLI::IsMember({"safa", "sc", "average"}))
      ->capture_default_str();
  cmd->add_option("--agg-low", o.agg_low, "fusion with the low scale")
      ->check(CLI::IsMember({"sc", "safa", "average"}))
      ->capture_default_str();
  cmd->add_option("--value-source", o.value_source,
                  "attention values come from keys or queries")
      ->check(CLI::IsMember({"k", "q"}))
      ->capture_default_str();
  cmd->add_flag("--attention-scaling", o.attention_scaling,
                "scale attention scores by 1/sqrt(dim)");
  cmd->add_option("--projection", o.projection, "output projection")
      ->check(CLI::IsMember({"to_rgb", "none"}))
      ->capture_default_str();
  cmd->add_flag("--no-share-fen", o.no_share_fen,
                "use a separate encoder per scale");
}

EnhancerConfig to_config(const EnhancerCliOpts& o) {
  EnhancerConfig c;
  c.scale_pair = {o.scale_mid, o.scale_low};
  c.num_blocks = o.blocks;
  c.channels = o.channels;
  if (!parse_downsample(o.downsample, c.downsample_method))
    throw UsageError("unknown downsample method: " + o.downsample);
  if (!parse_aggregation(o.agg_high, c.aggregation_high))
    throw UsageError("unknown aggregation: " + o.agg_high);
  if (!parse_aggregation(o.agg_low, c.aggregation_low))
    throw UsageError("unknown aggregation: " + o.agg_low);
  if (!parse_value_source(o.value_source, c.value_source))
    throw UsageError("unknown value source: " + o.value_source);
  c.attention_scaling = o.attention_scaling;
  if (!parse_output_projection(o.projection, c.output_projection))
    throw UsageError("unknown projection: " + o.projection);
  c.share_fen = !o.no_share_fen;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return c;
}

void kv(const std::string& key, const std::string& value) {
  std::cout << "[config] " << key << " = " << value << "\n";
}

void kv(const std::string& key, std::int64_t value) {
  kv(key, std::to_string(value));
}

void banner_enhancer(const EnhancerConfig& c) {
  kv("scale_pair", "(" + std::to_string(c.scale_pair.first) + "," +
                       std::to_string(c.scale_pair.second) + ")");
  kv("num_blocks", c.num_blocks);
  kv("channels", c.channels);
  kv("downsample", to_string(c.downsample_method));
  kv("aggregation_high", to_string(c.aggregation_high));
  kv("aggregation_low", to_string(c.aggregation_low));
  kv("value_source", to_string(c.value_source));
  kv("attention_scaling", c.attention_scaling ? "true" : "false");
  kv("output_projection", to_string(c.output_projection));
  kv("share_fen", c.share_fen ? "true" : "false");
}

void ensure_parent_dir(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

// Fills options of `cmd` from key=value lines; keys mirror the long option
// names without the leading dashes and values given on the command line win.
// Done by hand because CLI11 only processes a config registered on the root
// app, and ours would have to live on each subcommand.
void apply_config_file(CLI::App* cmd, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path);
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = path + ":" + std::to_string(lineno);
    std::string s = line.substr(0, line.find('#'));
    auto trim = [](const std::string& t) {
      const auto b = t.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      return t.substr(b, t.find_last_not_of(" \t\r") - b + 1);
    };
    s = trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw UsageError(where + ": expected key=value, got \"" + s + "\"");
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (key.empty() || key == "config")
      throw UsageError(where + ": bad config key \"" + key + "\"");
    if (!seen.insert(key).second)
      throw UsageError(where + ": duplicate key " + key);
    CLI::Option* op = cmd->get_option_no_throw("--" + key);
    if (op == nullptr)
      throw UsageError(where + ": unknown config key " + key);
    if (op->count() > 0) continue;
    op->add_result(value);
    op->run_callback();  // converts, validates and stores the value
  }
}

// ---------------------------------------------------------------- gen-data

struct GenOpts {
  std::string out = "data.feld";
  std::string config;
  DatasetSpec spec;
};

void run_gen(const GenOpts& g) {
  kv("out", g.out);
  kv("seed", static_cast<std::int64_t>(g.spec.seed));
  kv("image_size", g.spec.image_size);
  kv("train_count", g.spec.train_count);
  kv("val_count", g.spec.val_count);
  kv("num_classes", g.spec.num_classes);
  try {
    g.spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  Dataset ds = generate_dataset(g.spec);
  ensure_parent_dir(g.out);
  write_dataset(g.out, ds);
  std::cout << "wrote " << ds.train.size() << " train and " << ds.val.size()
            << " val samples to " << g.out << "\n";
}

// ------------------------------------------------------------------- train

struct TrainOpts {
  std::string data;
  std::string out = "runs/train";
  std::string metrics;
  std::string resume_path;
  std::string label;
  std::string config;
  std::string optimizer = "sgd";
  bool baseline = false;
  bool wall_clock = false;
  int epochs = 2;
  int batch = 16;
  int checkpoint_every = 0;
  std::uint64_t seed = 1;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  EnhancerCliOpts enh;
};

void run_train(const TrainOpts& t) {
  TrainSettings s;
  s.epochs = t.epochs;
  s.batch_size = t.batch;
  s.seed = t.seed;
  s.use_enhancer = !t.baseline;
  s.wall_clock = t.wall_clock;
  s.checkpoint_every = t.checkpoint_every;
  s.run_label = t.label.empty() ? (t.baseline ? "baseline" : "enhanced")
                                : t.label;
  s.checkpoint_dir = t.out;
  if (!parse_optimizer(t.optimizer, s.optimizer.kind))
    throw UsageError("unknown optimizer: " + t.optimizer);
  s.optimizer.lr = t.lr;
  s.optimizer.momentum = t.momentum;
  s.optimizer.weight_decay = t.weight_decay;
  if (s.use_enhancer) s.enhancer = to_config(t.enh);
  s.progress = &std::cout;

  kv("data", t.data);
  kv("out", t.out);
  kv("label", s.run_label);
  kv("epochs", s.epochs);
  kv("batch_size", s.batch_size);
  kv("seed", static_cast<std::int64_t>(s.seed));
  kv("optimizer", to_string(s.optimizer.kind));
  kv("lr", std::to_string(s.optimizer.lr));
  kv("model", s.use_enhancer ? "enhanced" : "baseline");
  if (s.use_enhancer) banner_enhancer(s.enhancer);

  Dataset ds = read_dataset(t.data);
  TrainResult r = t.resume_path.empty() ? train(ds, s)
                                        : resume(ds, s, t.resume_path);
  const std::string metrics_path =
      t.metrics.empty() ? t.out + "/metrics.csv" : t.metrics;
  ensure_parent_dir(metrics_path);
  write_file(metrics_path, metrics_csv(r.metrics));
  std::cout << "metrics written to " << metrics_path << "\n";
  if (!r.final_checkpoint.empty())
    std::cout << "checkpoint written to " << r.final_checkpoint << "\n";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", r.final_val_acc);
  std::cout << "final val_acc " << buf << "\n";
}

// -------------------------------------------------------------------- eval

struct EvalOpts {
  std::string data;
  std::string checkpoint;
  std::string split = "val";
};

void run_eval(const EvalOpts& e) {
  Dataset ds = read_dataset(e.data);
  Checkpoint ck = load_checkpoint(e.checkpoint);
  Model model = model_from_checkpoint(ck);
  EnhancerParams* enh = model.enhancer ? &*model.enhancer : nullptr;
  auto report = [&](const char* name, const std::vector<Sample>& split) {
    EvalResult r = evaluate(split, model.head, enh);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s: loss=%.6f acc=%.4f", name, r.loss,
                  r.accuracy);
    std::cout << buf << "\n";
  };
  if (e.split == "train" || e.split == "both") report("train", ds.train);
  if (e.split == "val" || e.split == "both") report("val", ds.val);
}

// ------------------------------------------------------------------ ablate

struct AblateOpts {
  std::string grid = "all";
  std::string out = "runs/ablation";
  std::string config;
  std::string optimizer = "sgd";
  int epochs = 2;
  int batch = 16;
  int size = 32;
  int train_count = 300;
  int val_count = 100;
  std::uint64_t seed = 1;
  double lr = 0.01;
  bool wall_clock = false;
  EnhancerCliOpts enh;
};

void run_ablate(const AblateOpts& a) {
  TrainSettings base;
  base.epochs = a.epochs;
  base.batch_size = a.batch;
  base.seed = a.seed;
  base.wall_clock = a.wall_clock;
  if (!parse_optimizer(a.optimizer, base.optimizer.kind))
    throw UsageError("unknown optimizer: " + a.optimizer);
  base.optimizer.lr = a.lr;
  base.enhancer = to_config(a.enh);
  base.progress = &std::cout;
  try {
    (void)make_grid(a.grid, base.enhancer);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  kv("grid", a.grid);
  kv("out", a.out);
  kv("epochs", a.epochs);
  kv("batch_size", a.batch);
  kv("seed", static_cast<std::int64_t>(a.seed));
  kv("image_size", a.size);
  kv("train_count", a.train_count);
  kv("val_count", a.val_count);
  banner_enhancer(base.enhancer);

  DatasetSpec dspec;
  dspec.image_size = a.size;
  dspec.train_count = a.train_count;
  dspec.val_count = a.val_count;
  dspec.seed = a.seed;
  Dataset ds = generate_dataset(dspec);
  run_ablation(a.grid, ds, base, a.out);
  std::cout << "ablation results written to " << a.out << "\n";
}

// --------------------------------------------------------------- gradcheck

struct GradOpts {
  int size = 16;
  std::uint64_t seed = 5;
  double tol = 1e-4;
  EnhancerCliOpts enh;
};

void run_gradcheck(const GradOpts& g) {
  EnhancerConfig cfg = to_config(g.enh);
  kv("image_size", g.size);
  kv("seed", static_cast<std::int64_t>(g.seed));
  kv("tolerance", std::to_string(g.tol));
  banner_enhancer(cfg);
  GradCheckReport report = gradcheck_pipeline(cfg, g.size, g.seed, g.tol);
  for (const auto& [name, err] : report.per_tensor) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%-18s max rel err %.3e", name.c_str(), err);
    std::cout << buf << "\n";
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "worst: %s at %.3e (tolerance %.1e)",
                report.worst_name.c_str(), report.worst_err, report.tolerance);
  std::cout << buf << "\n";
  if (!report.pass)
    throw std::runtime_error("gradient check failed");
  std::cout << "gradient check passed\n";
}

// --------------------------------------------------------------- visualize

struct VizOpts {
  std::string data;
  std::string out = "runs/viz";
  std::string checkpoint;
  std::string split = "val";
  int index = 0;
  std::uint64_t seed = 1;
  EnhancerCliOpts enh;
};

void run_visualize(const VizOpts& v) {
  Dataset ds = read_dataset(v.data);
  const std::vector<Sample>& split = v.split == "train" ? ds.train : ds.val;
  if (v.index < 0 || v.index >= static_cast<int>(split.size()))
    throw UsageError("index " + std::to_string(v.index) +
                     " out of range for the " + v.split + " split of " +
                     std::to_string(split.size()) + " samples");
  const Sample& sample = split[static_cast<std::size_t>(v.index)];

  EnhancerParams enh;
  if (!v.checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(v.checkpoint);
    if (!ck.has_enhancer)
      throw UsageError("checkpoint " + v.checkpoint +
                       " holds a baseline model without an enhancer");
    Model model = model_from_checkpoint(ck);
    enh = std::move(*model.enhancer);
  } else {
    enh = EnhancerParams::init(to_config(v.enh), derive_seed(v.seed, 20, 0));
  }
  if (enh.config.output_projection != OutputProjection::to_rgb)
    throw UsageError("visualize needs the to_rgb output projection");

  std::filesystem::create_directories(v.out);
  const std::string tag = v.split + "_" + std::to_string(v.index);
  Tape tape;
  Var out = enhance(tape.leaf(sample.image), enh);
  const std::string input_path = v.out + "/input_" + tag + ".ppm";
  const std::string enhanced_path = v.out + "/enhanced_" + tag + ".ppm";
  write_ppm(input_path, sample.image);
  write_ppm(enhanced_path, tensor_to_image(tape.value(out)));
  std::cout << "label " << shape_class_name(sample.label) << "\n";
  std::cout << "wrote " << input_path << "\n";
  std::cout << "wrote " << enhanced_path << "\n";
}

// ------------------------------------------------------------------ params

void run_params(const EnhancerCliOpts& o) {
  EnhancerConfig cfg = to_config(o);
  banner_enhancer(cfg);
  EnhancerParams p = EnhancerParams::init(cfg, 1);

  // group sizes by the first segment of each parameter name
  std::vector<std::pair<std::string, std::int64_t>> groups;
  std::int64_t projection = 0;
  p.for_each_param([&](const std::string& name, Tensor& t) {
    const std::string group = name.substr(0, name.find('.'));
    if (group == "to_rgb") {
      projection += t.size();
      return;
    }
    if (groups.empty() || groups.back().first != group)
      groups.emplace_back(group, 0);
    groups.back().second += t.size();
  });
  std::int64_t enumerated = 0;
  for (const auto& [group, count] : groups) {
    std::cout << group << " " << count << "\n";
    enumerated += count;
  }
  const std::int64_t core = param_count(cfg);
  if (enumerated != core)
    throw std::runtime_error(
        "parameter accounting mismatch: closed form says " +
        std::to_string(core) + ", enumeration says " +
        std::to_string(enumerated));
  std::cout << "core parameter count " << core << "\n";
  if (projection > 0) {
    std::cout << "output projection " << projection << "\n";
    std::cout << "total with projection " << core + projection << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "low-light feature enhancement testbed: multi-scale enhancer, synthetic "
      "shape data, training and ablation tools"};
  app.require_subcommand(1);

  GenOpts gen_opts;
  auto* gen = app.add_subcommand("gen-data",
                                 "render and darken a synthetic shape dataset");
  gen->add_option("--out", gen_opts.out, "output archive")->capture_default_str();
  gen->add_option("--seed", gen_opts.spec.seed, "dataset seed")
      ->envname("FEL_SEED")
      ->capture_default_str();
  gen->add_option("--size", gen_opts.spec.image_size, "square image size")
      ->capture_default_str();
  gen->add_option("--train", gen_opts.spec.train_count, "training samples")
      ->capture_default_str();
  gen->add_option("--val", gen_opts.spec.val_count, "validation samples")
      ->capture_default_str();
  gen->add_option("--classes", gen_opts.spec.num_classes, "shape classes")
      ->capture_default_str();
  gen->add_option("--gamma-lo", gen_opts.spec.gamma_lo)->capture_default_str();
  gen->add_option("--gamma-hi", gen_opts.spec.gamma_hi)->capture_default_str();
  gen->add_option("--brightness-lo", gen_opts.spec.brightness_lo)
      ->capture_default_str();
  gen->add_option("--brightness-hi", gen_opts.spec.brightness_hi)
      ->capture_default_str();
  gen->add_option("--noise", gen_opts.spec.noise_sigma, "gaussian noise sigma")
      ->capture_default_str();
  gen->add_option("--config", gen_opts.config,
                  "read options from a key=value file");
  gen->callback([&gen_opts, gen] {
    if (!gen_opts.config.empty()) apply_config_file(gen, gen_opts.config);
    run_gen(gen_opts);
  });

  TrainOpts train_opts;
  auto* tr = app.add_subcommand("train", "train the classifier, optionally "
                                         "behind the enhancer");
  tr->add_option("--data", train_opts.data, "dataset archive")->required();
  tr->add_option("--out", train_opts.out, "run directory")
      ->capture_default_str();
  tr->add_option("--metrics", train_opts.metrics,
                 "metrics csv path (default <out>/metrics.csv)");
  tr->add_option("--epochs", train_opts.epochs)->capture_default_str();
  tr->add_option("--batch", train_opts.batch)->capture_default_str();
  tr->add_option("--seed", train_opts.seed)
      ->envname("FEL_SEED")
      ->capture_default_str();
  tr->add_option("--optimizer", train_opts.optimizer)
      ->check(CLI::IsMember({"sgd", "adamw"}))
      ->capture_default_str();
  tr->add_option("--lr", train_opts.lr)->capture_default_str();
  tr->add_option("--momentum", train_opts.momentum)->capture_default_str();
  tr->add_option("--weight-decay", train_opts.weight_decay)
      ->capture_default_str();
  tr->add_flag("--baseline", train_opts.baseline,
               "train on raw images without the enhancer");
  tr->add_flag("--wall-clock", train_opts.wall_clock,
               "record real epoch durations in the metrics");
  tr->add_option("--checkpoint-every", train_opts.checkpoint_every,
                 "extra snapshot every k epochs")
      ->capture_default_str();
  tr->add_option("--resume", train_opts.resume_path,
                 "continue from a checkpoint");
  tr->add_option("--label", train_opts.label,
                 "config column value in the metrics csv");
  add_enhancer_options(tr, train_opts.enh);
  tr->add_option("--config", train_opts.config,
                 "read options from a key=value file");
  tr->callback([&train_opts, tr] {
    if (!train_opts.config.empty()) apply_config_file(tr, train_opts.config);
    run_train(train_opts);
  });

  EvalOpts eval_opts;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  ev->add_option("--data", eval_opts.data, "dataset archive")->required();
  ev->add_option("--checkpoint", eval_opts.checkpoint)->required();
  ev->add_option("--split", eval_opts.split)
      ->check(CLI::IsMember({"train", "val", "both"}))
      ->capture_default_str();
  ev->callback([&eval_opts] { run_eval(eval_opts); });

  AblateOpts ablate_opts;
  ablate_opts.enh.channels = 16;  // keep the sweep affordable
  auto* ab = app.add_subcommand("ablate", "sweep design axes and record "
                                          "metrics per variant");
  ab->add_option("--grid", ablate_opts.grid,
                 "aggregation, fusion, downsample, scales, blocks or all")
      ->capture_default_str();
  ab->add_option("--out", ablate_opts.out, "output directory")
      ->capture_default_str();
  ab->add_option("--epochs", ablate_opts.epochs)->capture_default_str();
  ab->add_option("--batch", ablate_opts.batch)->capture_default_str();
  ab->add_option("--seed", ablate_opts.seed)
      ->envname("FEL_SEED")
      ->capture_default_str();
  ab->add_option("--lr", ablate_opts.lr)->capture_default_str();
  ab->add_option("--optimizer", ablate_opts.optimizer)
      ->check(CLI::IsMember({"sgd", "adamw"}))
      ->capture_default_str();
  ab->add_option("--size", ablate_opts.size, "image size for the sweep")
      ->capture_default_str();
  ab->add_option("--train-count", ablate_opts.train_count)
      ->capture_default_str();
  ab->add_option("--val-count", ablate_opts.val_count)->capture_default_str();
  ab->add_flag("--wall-clock", ablate_opts.wall_clock,
               "record real epoch durations");
  add_enhancer_options(ab, ablate_opts.enh);
  ab->add_option("--config", ablate_opts.config,
                 "read options from a key=value file");
  ab->callback([&ablate_opts, ab] {
    if (!ablate_opts.config.empty()) apply_config_file(ab, ablate_opts.config);
    run_ablate(ablate_opts);
  });

  GradOpts grad_opts;
  grad_opts.enh.channels = 8;
  grad_opts.enh.blocks = 2;
  auto* gc = app.add_subcommand(
      "gradcheck", "compare analytic gradients with central differences");
  gc->add_option("--size", grad_opts.size, "square input size")
      ->capture_default_str();
  gc->add_option("--seed", grad_opts.seed)
      ->envname("FEL_SEED")
      ->capture_default_str();
  gc->add_option("--tol", grad_opts.tol, "max relative error accepted")
      ->capture_default_str();
  add_enhancer_options(gc, grad_opts.enh);
  gc->callback([&grad_opts] { run_gradcheck(grad_opts); });

  VizOpts viz_opts;
  auto* vz = app.add_subcommand("visualize",
                                "write input and enhanced images as ppm");
  vz->add_option("--data", viz_opts.data, "dataset archive")->required();
  vz->add_option("--out", viz_opts.out, "output directory")
      ->capture_default_str();
  vz->add_option("--checkpoint", viz_opts.checkpoint,
                 "enhancer weights (default: fresh initialization)");
  vz->add_option("--split", viz_opts.split)
      ->check(CLI::IsMember({"train", "val"}))
      ->capture_default_str();
  vz->add_option("--index", viz_opts.index, "sample index")
      ->capture_default_str();
  vz->add_option("--seed", viz_opts.seed)
      ->envname("FEL_SEED")
      ->capture_default_str();
  add_enhancer_options(vz, viz_opts.enh);
  vz->callback([&viz_opts] { run_visualize(viz_opts); });

  EnhancerCliOpts params_opts;
  auto* pc = app.add_subcommand("params",
                                "print the trainable parameter count");
  add_enhancer_options(pc, params_opts);
  pc->callback([&params_opts] { run_params(params_opts); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
