#include "fel/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "fel/serialize.hpp"

namespace fel {

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::vector<Tensor*> collect_params(Model& m) {
  std::vector<Tensor*> out;
  m.for_each_param(
      [&out](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

void init_slots(OptimizerState& opt, const std::vector<Tensor*>& params) {
  opt.slot_m.clear();
  opt.slot_v.clear();
  for (const Tensor* p : params) opt.slot_m.push_back(Tensor::zeros(p->shape));
  if (opt.config.kind == OptimizerKind::adamw)
    for (const Tensor* p : params) opt.slot_v.push_back(Tensor::zeros(p->shape));
}

void optimizer_step(OptimizerState& opt, const std::vector<Tensor*>& params,
                    double lr, int batch_n) {
  if (opt.slot_m.size() != params.size())
    throw std::logic_error("optimizer state does not match the parameter set");
  const double inv = 1.0 / static_cast<double>(batch_n);
  const OptimizerConfig& c = opt.config;
  if (c.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      p.ensure_grad();
      std::vector<double>& vel = opt.slot_m[i].data;
      for (std::size_t j = 0; j < p.data.size(); ++j) {
        const double g = p.grad[j] * inv;
        vel[j] = c.momentum * vel[j] + g;
        p.data[j] -= lr * vel[j];
      }
    }
  } else {
    ++opt.step;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      p.ensure_grad();
      std::vector<double>& m = opt.slot_m[i].data;
      std::vector<double>& v = opt.slot_v[i].data;
      for (std::size_t j = 0; j < p.data.size(); ++j) {
        const double g = p.grad[j] * inv;
        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        p.data[j] -=
            lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * p.data[j]);
      }
    }
  }
  for (Tensor* p : params) p->zero_grad();
}

std::string checkpoint_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_epoch_%03d.felc", epoch);
  return buf;
}

TrainResult train_impl(const Dataset& ds, const TrainSettings& s, Model& model,
                       OptimizerState& opt, Rng& rng, int start_epoch) {
  if (s.epochs < 1)
    throw std::invalid_argument("train: epochs must be positive");
  if (s.batch_size < 1)
    throw std::invalid_argument("train: batch size must be positive");
  if (ds.train.empty())
    throw std::invalid_argument("train: the dataset has no training split");

  std::vector<Tensor*> params = collect_params(model);
  if (opt.slot_m.empty()) init_slots(opt, params);
  for (Tensor* p : params) p->zero_grad();

  // the last fifth of the run uses a tenth of the rate
  int decay_start = (8 * s.epochs) / 10;
  if (decay_start == 0) decay_start = s.epochs;

  if (!s.checkpoint_dir.empty())
    std::filesystem::create_directories(s.checkpoint_dir);

  TrainResult result;
  const int n = static_cast<int>(ds.train.size());
  for (int e = start_epoch; e < s.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = s.optimizer.lr * (e >= decay_start ? 0.1 : 1.0);

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(
          rng.below(static_cast<std::uint64_t>(i) + 1));
      std::swap(order[static_cast<std::size_t>(i)], order[j]);
    }

    double loss_sum = 0.0;
    for (int batch_start = 0; batch_start < n; batch_start += s.batch_size) {
      const int bn = std::min(s.batch_size, n - batch_start);
      for (int k = 0; k < bn; ++k) {
        const Sample& sample =
            ds.train[static_cast<std::size_t>(order[static_cast<std::size_t>(
                batch_start + k)])];
        Tape tape;
        Var x = tape.leaf(sample.image);
        if (model.enhancer) x = enhance(x, *model.enhancer);
        Var logits = head_forward(x, model.head);
        Var loss = cross_entropy(logits, sample.label);
        const double lv = tape.value(loss).data[0];
        if (!std::isfinite(lv)) {
          const std::string where = tape.first_nonfinite();
          throw std::runtime_error(
              "training diverged at epoch " + std::to_string(e + 1) +
              ", sample " + std::to_string(batch_start + k) +
              ": first non-finite value at " +
              (where.empty() ? std::string("the loss") : where));
        }
        loss_sum += lv;
        tape.backward(loss);
      }
      optimizer_step(opt, params, lr, bn);
    }

    EvalResult ev = evaluate(ds.val, model.head,
                             model.enhancer ? &*model.enhancer : nullptr);
    double seconds = 0.0;
    if (s.wall_clock) {
      seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              t0)
                    .count();
    }
    result.metrics.push_back({s.run_label, e + 1,
                              loss_sum / static_cast<double>(n), ev.loss,
                              ev.accuracy, seconds});
    result.final_val_acc = ev.accuracy;

    if (s.progress) {
      char buf[192];
      std::snprintf(buf, sizeof buf,
                    "[%s] epoch %d/%d train_loss %.6f val_loss %.6f "
                    "val_acc %.4f",
                    s.run_label.c_str(), e + 1, s.epochs,
                    loss_sum / static_cast<double>(n), ev.loss, ev.accuracy);
      *s.progress << buf << std::endl;
    }

    if (!s.checkpoint_dir.empty()) {
      const bool periodic =
          s.checkpoint_every > 0 && (e + 1) % s.checkpoint_every == 0;
      const bool last = e + 1 == s.epochs;
      if (periodic || last) {
        Checkpoint ck = snapshot(model, opt, e + 1, rng);
        if (periodic)
          save_checkpoint(s.checkpoint_dir + "/" + checkpoint_name(e + 1), ck);
        if (last) {
          result.final_checkpoint = s.checkpoint_dir + "/final.felc";
          save_checkpoint(result.final_checkpoint, ck);
        }
      }
    }
  }
  return result;
}

}  // namespace

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "config,epoch,train_loss,val_loss,val_acc,seconds\n";
  for (const MetricsRow& r : rows) {
    out += csv_field(r.config);
    out += ',' + std::to_string(r.epoch);
    out += ',' + fmt("%.6f", r.train_loss);
    out += ',' + fmt("%.6f", r.val_loss);
    out += ',' + fmt("%.4f", r.val_acc);
    out += ',' + fmt("%.3f", r.seconds);
    out += '\n';
  }
  return out;
}

void Model::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  if (enhancer) enhancer->for_each_param(fn);
  head.for_each_param(fn);
}

Model build_model(const TrainSettings& s, int image_size, int num_classes) {
  Model m;
  int head_in = 3;
  if (s.use_enhancer) {
    s.enhancer.validate();
    if (image_size % s.enhancer.scale_pair.second != 0)
      throw std::invalid_argument(
          "build_model: image size " + std::to_string(image_size) +
          " is not divisible by the coarse scale " +
          std::to_string(s.enhancer.scale_pair.second));
    m.enhancer = EnhancerParams::init(s.enhancer, derive_seed(s.seed, 20, 0));
    if (s.enhancer.output_projection == OutputProjection::none)
      head_in = s.enhancer.channels;
  }
  m.head = HeadParams::init(head_in, image_size, num_classes,
                            derive_seed(s.seed, 21, 0));
  return m;
}

Model model_from_checkpoint(const Checkpoint& ck) {
  Model m;
  if (ck.has_enhancer)
    m.enhancer = EnhancerParams::init(ck.enhancer_config, 0);
  m.head = HeadParams::init(ck.head_in_channels, ck.head_input_size,
                            ck.head_num_classes, 0);
  std::size_t i = 0;
  m.for_each_param([&](const std::string& name, Tensor& t) {
    if (i >= ck.tensors.size())
      throw std::runtime_error(
          "checkpoint is missing tensors; stopped before " + name);
    const auto& [stored_name, stored] = ck.tensors[i++];
    if (stored_name != name)
      throw std::runtime_error("checkpoint tensor order mismatch: expected " +
                               name + ", found " + stored_name);
    if (stored.shape != t.shape)
      throw std::runtime_error("checkpoint tensor " + name + " has shape " +
                               shape_str(stored.shape) + ", expected " +
                               shape_str(t.shape));
    t.data = stored.data;
  });
  if (i != ck.tensors.size())
    throw std::runtime_error("checkpoint carries " +
                             std::to_string(ck.tensors.size() - i) +
                             " unexpected extra tensors");
  return m;
}

Checkpoint snapshot(Model& model, const OptimizerState& opt, int epochs_done,
                    const Rng& rng) {
  Checkpoint ck;
  ck.has_enhancer = model.enhancer.has_value();
  if (model.enhancer) ck.enhancer_config = model.enhancer->config;
  ck.head_in_channels = model.head.in_channels;
  ck.head_input_size = model.head.input_size;
  ck.head_num_classes = model.head.num_classes;
  ck.opt = opt;
  ck.epochs_done = epochs_done;
  ck.rng_state = rng.state();
  model.for_each_param([&ck](const std::string& name, Tensor& t) {
    ck.tensors.emplace_back(name, t);
  });
  return ck;
}

TrainResult train(const Dataset& ds, const TrainSettings& s) {
  Model model = build_model(s, ds.spec.image_size, ds.spec.num_classes);
  OptimizerState opt;
  opt.config = s.optimizer;
  Rng rng(derive_seed(s.seed, 3, 0));
  return train_impl(ds, s, model, opt, rng, 0);
}

TrainResult resume(const Dataset& ds, const TrainSettings& s,
                   const std::string& checkpoint_path) {
  Checkpoint ck = load_checkpoint(checkpoint_path);
  if (ck.head_input_size != ds.spec.image_size ||
      ck.head_num_classes != ds.spec.num_classes)
    throw std::invalid_argument(
        "resume: checkpoint was trained on " +
        std::to_string(ck.head_input_size) + "px/" +
        std::to_string(ck.head_num_classes) + "-class data, dataset is " +
        std::to_string(ds.spec.image_size) + "px/" +
        std::to_string(ds.spec.num_classes) + "-class");
  if (ck.epochs_done >= s.epochs)
    throw std::invalid_argument("resume: checkpoint already covers " +
                                std::to_string(ck.epochs_done) +
                                " epochs, nothing left of the requested " +
                                std::to_string(s.epochs));
  Model model = model_from_checkpoint(ck);
  OptimizerState opt = ck.opt;
  Rng rng(0);
  rng.set_state(ck.rng_state);
  // the stored optimizer settings are authoritative for the replay
  TrainSettings eff = s;
  eff.optimizer = ck.opt.config;
  eff.use_enhancer = ck.has_enhancer;
  if (ck.has_enhancer) eff.enhancer = ck.enhancer_config;
  return train_impl(ds, eff, model, opt, rng, ck.epochs_done);
}

std::vector<AblationRun> make_grid(const std::string& axis,
                                   const EnhancerConfig& base) {
  std::vector<AblationRun> out;
  auto add = [&out](const char* ax, std::string label, EnhancerConfig c) {
    c.validate();
    out.push_back({ax, std::move(label), std::move(c)});
  };
  const bool all = axis == "all";
  if (all || axis == "aggregation") {
    for (AggregationMode mode : {AggregationMode::average, AggregationMode::skip,
                                 AggregationMode::safa}) {
      EnhancerConfig c = base;
      c.aggregation_high = mode;
      add("aggregation", to_string(mode), c);
    }
  }
  if (all || axis == "fusion") {
    const struct {
      AggregationMode high, low;
      const char* label;
    } combos[] = {
        {AggregationMode::skip, AggregationMode::skip, "(SC,SC)"},
        {AggregationMode::safa, AggregationMode::safa, "(SAFA,SAFA)"},
        {AggregationMode::skip, AggregationMode::safa, "(SC,SAFA)"},
        {AggregationMode::safa, AggregationMode::skip, "(SAFA,SC)"},
    };
    for (const auto& combo : combos) {
      EnhancerConfig c = base;
      c.aggregation_high = combo.high;
      c.aggregation_low = combo.low;
      add("fusion", combo.label, c);
    }
  }
  if (all || axis == "downsample") {
    const struct {
      DownsampleMethod method;
      const char* label;
    } methods[] = {
        {DownsampleMethod::maxpool, "maxpool"},
        {DownsampleMethod::adaptive_avg_pool, "adaptive_avg_pool"},
        {DownsampleMethod::interpolate, "interpolation"},
        {DownsampleMethod::conv, "conv"},
    };
    for (const auto& m : methods) {
      EnhancerConfig c = base;
      c.downsample_method = m.method;
      add("downsample", m.label, c);
    }
  }
  if (all || axis == "scales") {
    const std::pair<int, int> pairs[] = {{2, 4}, {4, 8}, {4, 16}, {8, 16}};
    for (const auto& pr : pairs) {
      EnhancerConfig c = base;
      c.scale_pair = pr;
      add("scales",
          "(" + std::to_string(pr.first) + "," + std::to_string(pr.second) + ")",
          c);
    }
  }
  if (all || axis == "blocks") {
    // twelve blocks cannot split the default width evenly, so this axis runs
    // at the smallest width every block count divides
    EnhancerConfig c = base;
    if (c.channels % 24 != 0) c.channels = 24;
    for (int n : {2, 4, 8, 12}) {
      c.num_blocks = n;
      add("blocks", std::to_string(n), c);
    }
  }
  if (out.empty())
    throw std::invalid_argument(
        "unknown ablation axis '" + axis +
        "' (expected aggregation, fusion, downsample, scales, blocks or all)");
  return out;
}

void run_ablation(const std::string& axis, const Dataset& ds,
                  const TrainSettings& base, const std::string& out_dir) {
  const std::vector<AblationRun> grid = make_grid(axis, base.enhancer);
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> axis_order;
  for (const AblationRun& run : grid)
    if (axis_order.empty() || axis_order.back() != run.axis)
      axis_order.push_back(run.axis);
  for (const std::string& ax : axis_order) {
    std::vector<MetricsRow> rows;
    for (const AblationRun& run : grid) {
      if (run.axis != ax) continue;
      if (base.progress)
        *base.progress << "[ablate] " << ax << " = " << run.label << std::endl;
      TrainSettings s = base;
      s.use_enhancer = true;
      s.enhancer = run.config;
      s.run_label = run.label;
      s.checkpoint_dir.clear();
      TrainResult r = train(ds, s);
      rows.insert(rows.end(), r.metrics.begin(), r.metrics.end());
    }
    write_file(out_dir + "/ablation_" + ax + ".csv", metrics_csv(rows));
  }
}

}  // namespace fel
