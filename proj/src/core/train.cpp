// SPDX-License-Identifier: Apache-2.0
#include "core/train.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "core/common.hpp"
#include "core/metrics.hpp"
#include "json.hpp"

namespace kdf {

using njson = nlohmann::ordered_json;
using clock_type = std::chrono::steady_clock;

namespace {

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

}  // namespace

// -------------------------------------------------------------- TrainConfig

TrainConfig TrainConfig::from_config(const Config& cfg) {
  TrainConfig tc;
  tc.batch_size = cfg.get_int("batch_size", tc.batch_size);
  tc.epochs = cfg.get_int("epochs", tc.epochs);
  tc.lr = cfg.get_double("lr", tc.lr);
  tc.momentum = cfg.get_double("momentum", tc.momentum);
  tc.plateau_factor = cfg.get_double("plateau_factor", tc.plateau_factor);
  tc.plateau_patience = cfg.get_int("plateau_patience", tc.plateau_patience);
  tc.plateau_metric = cfg.get_string("plateau_metric", tc.plateau_metric);
  tc.plateau_tolerance = cfg.get_double("plateau_tolerance", tc.plateau_tolerance);
  tc.min_lr = cfg.get_double("min_lr", tc.min_lr);
  tc.seed = cfg.get_uint("seed", tc.seed);
  tc.flip_probability = cfg.get_double("flip_probability", tc.flip_probability);
  tc.deterministic = cfg.get_bool("deterministic", tc.deterministic);
  tc.class_weighting = cfg.get_string("class_weighting", tc.class_weighting);
  tc.eval_batch = cfg.get_int("eval_batch", tc.eval_batch);
  tc.validate();
  return tc;
}

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (batch_size < 1) problems.push_back("batch_size must be >= 1");
  if (epochs < 1) problems.push_back("epochs must be >= 1");
  if (!(lr > 0.0)) problems.push_back("lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) problems.push_back("momentum must be in [0, 1)");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) {
    problems.push_back("plateau_factor must be in (0, 1)");
  }
  if (plateau_patience < 1) problems.push_back("plateau_patience must be >= 1");
  if (plateau_metric != "val_loss" && plateau_metric != "val_accuracy") {
    problems.push_back("plateau_metric must be val_loss or val_accuracy");
  }
  if (plateau_tolerance < 0.0) problems.push_back("plateau_tolerance must be >= 0");
  if (min_lr < 0.0) problems.push_back("min_lr must be >= 0");
  if (flip_probability < 0.0 || flip_probability > 1.0) {
    problems.push_back("flip_probability must be in [0, 1]");
  }
  if (class_weighting != "inverse" && class_weighting != "uniform") {
    problems.push_back("class_weighting must be inverse or uniform");
  }
  if (eval_batch < 1) problems.push_back("eval_batch must be >= 1");
  if (!problems.empty()) {
    std::string msg = "invalid training config: ";
    for (size_t i = 0; i < problems.size(); ++i) {
      if (i) msg += "; ";
      msg += problems[i];
    }
    fail(ErrorKind::InvalidArgument, msg);
  }
}

// ------------------------------------------------------------- SgdOptimizer

SgdOptimizer::SgdOptimizer(const std::vector<ParamInfo>& params, double lr, double momentum)
    : lr_(lr), momentum_(momentum) {
  for (const ParamInfo& p : params) {
    if (!p.trainable) continue;
    params_.push_back(p);
    velocity_.emplace_back(p.tensor.numel(), 0.0f);
  }
}

void SgdOptimizer::step() {
  for (size_t k = 0; k < params_.size(); ++k) {
    Tensor t = params_[k].tensor;
    if (!t.has_grad()) {
      fail(ErrorKind::InvalidArgument,
           "sgd step: parameter '" + params_[k].name + "' has no gradient");
    }
    const std::vector<float>& g = t.grad();
    std::vector<float>& v = velocity_[k];
    float* p = t.data();
    for (size_t i = 0; i < v.size(); ++i) {
      v[i] = (float)(momentum_ * (double)v[i] + (double)g[i]);
      p[i] = (float)((double)p[i] - lr_ * (double)v[i]);
    }
    t.zero_grad();
  }
}

// --------------------------------------------------------- PlateauScheduler

PlateauScheduler::PlateauScheduler(double lr, double factor, int64_t patience, double tolerance,
                                   double min_lr, bool higher_is_better)
    : lr_(lr),
      factor_(factor),
      tolerance_(tolerance),
      min_lr_(min_lr),
      patience_(patience),
      higher_is_better_(higher_is_better) {}

double PlateauScheduler::observe(double metric) {
  if (!has_best_) {
    has_best_ = true;
    best_ = metric;
    return lr_;
  }
  bool improved = higher_is_better_ ? metric > best_ + tolerance_ : metric < best_ - tolerance_;
  if (improved) {
    best_ = metric;
    bad_ = 0;
  } else if (++bad_ >= patience_) {
    lr_ = std::max(min_lr_, lr_ * factor_);
    bad_ = 0;
  }
  return lr_;
}

// -------------------------------------------------------------- TrainReport

namespace {

njson history_to_json(const std::vector<EpochRow>& history, bool distilled) {
  njson rows = njson::array();
  for (const EpochRow& e : history) {
    njson r;
    r["epoch"] = e.epoch;
    r["lr"] = e.lr;
    r["train_loss"] = e.train_loss;
    r["train_accuracy"] = e.train_accuracy;
    r["val_loss"] = e.val_loss;
    r["val_accuracy"] = e.val_accuracy;
    if (distilled) {
      r["hard_loss"] = e.hard_loss;
      r["soft_loss"] = e.soft_loss;
    }
    r["seconds"] = e.seconds;
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

std::string TrainReport::to_json() const {
  bool distilled = kind == "distill_report";
  njson j;
  j["kind"] = kind;
  j["model"] = model;
  j["dataset"] = dataset;
  if (distilled) {
    j["teacher"] = teacher;
    j["temperature"] = temperature;
    j["alpha"] = alpha;
    j["hard_weight"] = hard_weight;
  }
  j["seed"] = seed;
  j["deterministic"] = deterministic;
  j["epochs"] = (int64_t)history.size();
  j["best_epoch"] = best_epoch;
  j["best_val_loss"] = best_val_loss;
  j["best_val_accuracy"] = best_val_accuracy;
  j["final_val_loss"] = final_val_loss;
  j["final_val_accuracy"] = final_val_accuracy;
  j["checkpoint"] = checkpoint;
  j["total_seconds"] = total_seconds;
  j["history"] = history_to_json(history, distilled);
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------- fit

namespace {

std::vector<double> training_class_weights(const Dataset& ds, int64_t num_classes,
                                           const std::string& mode) {
  if (mode == "uniform") return {};
  std::vector<int64_t> counts((size_t)num_classes, 0);
  for (const Sample& s : ds.train) {
    if (s.label < 0 || s.label >= num_classes) {
      fail(ErrorKind::InvalidArgument,
           "training label " + std::to_string(s.label) + " outside 0.." +
               std::to_string(num_classes - 1));
    }
    counts[(size_t)s.label]++;
  }
  // Absent classes get weight 0 rather than failing; fixtures rarely cover
  // every class.
  std::vector<double> w((size_t)num_classes, 0.0);
  double n = (double)ds.train.size();
  for (int64_t c = 0; c < num_classes; ++c) {
    if (counts[(size_t)c] > 0) w[(size_t)c] = n / ((double)num_classes * (double)counts[(size_t)c]);
  }
  return w;
}

}  // namespace

TrainReport fit(Model& model, Model* teacher, const Dataset& ds, const TrainConfig& tc,
                const DistillConfig* dc, const std::string& checkpoint_path,
                const Config& run_config) {
  if (ds.train.empty()) fail(ErrorKind::InvalidArgument, "training split is empty");
  if (tc.batch_size < 1) fail(ErrorKind::InvalidArgument, "batch_size must be >= 1");
  if (tc.eval_batch < 1) fail(ErrorKind::InvalidArgument, "eval_batch must be >= 1");
  if (tc.epochs < 1) fail(ErrorKind::InvalidArgument, "epochs must be >= 1");
  bool soft_term = dc != nullptr && dc->alpha > 0.0;
  if (soft_term && teacher == nullptr) {
    fail(ErrorKind::InvalidArgument, "distillation with alpha > 0 needs a teacher model");
  }
  if (dc != nullptr) dc->validate();

  TrainReport report;
  report.kind = dc != nullptr ? "distill_report" : "train_report";
  report.model = model.config().name;
  report.dataset = ds.source;
  report.seed = tc.seed;
  report.deterministic = tc.deterministic;
  report.checkpoint = checkpoint_path;
  if (dc != nullptr) {
    if (teacher != nullptr) report.teacher = teacher->config().name;
    report.temperature = dc->temperature;
    report.alpha = dc->alpha;
    report.hard_weight = dc->effective_hard_weight();
  }

  const int64_t num_classes = model.config().num_classes;
  const int64_t in_channels = model.config().input_channels;
  std::vector<double> weights = training_class_weights(ds, num_classes, tc.class_weighting);
  const std::vector<Sample>& val = ds.has_val() ? ds.val : ds.train;

  SgdOptimizer opt(model.params(), tc.lr, tc.momentum);
  PlateauScheduler sched(tc.lr, tc.plateau_factor, tc.plateau_patience, tc.plateau_tolerance,
                         tc.min_lr, tc.plateau_metric == "val_accuracy");
  const bool higher = tc.plateau_metric == "val_accuracy";
  bool has_best = false;
  double best_metric = 0.0;

  const int64_t n = (int64_t)ds.train.size();
  const int64_t steps = (n + tc.batch_size - 1) / tc.batch_size;
  auto run_start = clock_type::now();

  for (int64_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    auto epoch_start = clock_type::now();
    auto shuffle_rng = seeded_rng(tc.seed, "shuffle", (uint64_t)epoch);
    auto augment_rng = seeded_rng(tc.seed, "augment", (uint64_t)epoch);
    auto dropout_rng = seeded_rng(tc.seed, "dropout", (uint64_t)epoch);
    std::vector<size_t> order = shuffled_indices((size_t)n, shuffle_rng);

    double loss_sum = 0.0, hard_sum = 0.0, soft_sum = 0.0;
    int64_t correct = 0;
    for (int64_t s = 0; s < steps; ++s) {
      int64_t lo = s * tc.batch_size;
      int64_t count = std::min(tc.batch_size, n - lo);
      std::vector<size_t> slice(order.begin() + lo, order.begin() + lo + count);
      Batch batch = make_batch(ds.train, slice, in_channels, tc.flip_probability, &augment_rng);

      Tensor teacher_logits;
      if (soft_term) {
        NoGradGuard ng;
        teacher_logits = teacher->forward(batch.images, false);
      }
      Tensor logits = model.forward(batch.images, true, &dropout_rng);

      Tensor total;
      double hard_v = 0.0, soft_v = 0.0;
      if (dc != nullptr) {
        DistillLoss dl = distill_loss(logits, teacher_logits, batch.labels, weights, *dc);
        total = dl.total;
        hard_v = (double)dl.hard.item();
        if (soft_term) soft_v = (double)dl.soft.item();
      } else {
        total = cross_entropy(logits, batch.labels, weights);
        hard_v = (double)total.item();
      }
      double loss_v = (double)total.item();
      if (!std::isfinite(loss_v)) {
        fail(ErrorKind::Numeric, "non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                     std::to_string(s + 1));
      }
      backward(total);
      opt.step();

      loss_sum += loss_v * (double)count;
      hard_sum += hard_v * (double)count;
      soft_sum += soft_v * (double)count;
      std::vector<int64_t> preds = argmax_rows(logits);
      for (int64_t i = 0; i < count; ++i) {
        if (preds[(size_t)i] == batch.labels[(size_t)i]) ++correct;
      }
    }

    EvalResult ev = evaluate(model, val, tc.eval_batch);
    EpochRow row;
    row.epoch = epoch;
    row.lr = opt.lr();
    row.train_loss = loss_sum / (double)n;
    row.train_accuracy = (double)correct / (double)n;
    row.hard_loss = hard_sum / (double)n;
    row.soft_loss = soft_sum / (double)n;
    row.val_loss = ev.loss;
    row.val_accuracy = ev.accuracy;
    row.seconds = tc.deterministic ? 0.0 : seconds_since(epoch_start);
    report.history.push_back(row);

    double metric = higher ? ev.accuracy : ev.loss;
    bool improved = !has_best || (higher ? metric > best_metric : metric < best_metric);
    if (improved) {
      has_best = true;
      best_metric = metric;
      report.best_epoch = epoch;
      report.best_val_loss = ev.loss;
      report.best_val_accuracy = ev.accuracy;
      if (!checkpoint_path.empty()) model.save_checkpoint(checkpoint_path, run_config);
    }
    opt.set_lr(sched.observe(metric));
  }

  report.final_val_loss = report.history.back().val_loss;
  report.final_val_accuracy = report.history.back().val_accuracy;
  report.total_seconds = tc.deterministic ? 0.0 : seconds_since(run_start);
  return report;
}

// -------------------------------------------------------------------- sweep

std::string SweepReport::to_json() const {
  njson j;
  j["kind"] = "sweep_report";
  j["student"] = student;
  j["teacher"] = teacher;
  j["dataset"] = dataset;
  njson grid;
  grid["temperatures"] = temperatures;
  grid["alphas"] = alphas;
  j["grid"] = std::move(grid);
  njson best;
  best["temperature"] = points[best_index].temperature;
  best["alpha"] = points[best_index].alpha;
  best["val_accuracy"] = points[best_index].val_accuracy;
  j["best"] = std::move(best);
  njson rows = njson::array();
  for (const SweepPoint& p : points) {
    njson r;
    r["temperature"] = p.temperature;
    r["alpha"] = p.alpha;
    r["val_loss"] = p.val_loss;
    r["val_accuracy"] = p.val_accuracy;
    r["best_epoch"] = p.best_epoch;
    r["seconds"] = p.seconds;
    rows.push_back(std::move(r));
  }
  j["points"] = std::move(rows);
  return j.dump(2) + "\n";
}

SweepReport sweep(const ModelConfig& student_cfg, Model& teacher, const Dataset& ds,
                  const TrainConfig& tc, const DistillConfig& base_dc,
                  const std::vector<double>& temperatures, const std::vector<double>& alphas,
                  bool parallel, int64_t max_threads) {
  if (temperatures.empty() || alphas.empty()) {
    fail(ErrorKind::InvalidArgument, "sweep grid must not be empty");
  }
  SweepReport report;
  report.student = student_cfg.name;
  report.teacher = teacher.config().name;
  report.dataset = ds.source;
  report.temperatures = temperatures;
  report.alphas = alphas;
  report.points.resize(temperatures.size() * alphas.size());
  for (size_t ti = 0; ti < temperatures.size(); ++ti) {
    for (size_t ai = 0; ai < alphas.size(); ++ai) {
      SweepPoint& p = report.points[ti * alphas.size() + ai];
      p.temperature = temperatures[ti];
      p.alpha = alphas[ai];
    }
  }

  // Every point trains a fresh student from the same seed, so the grid is a
  // controlled comparison of (T, alpha) alone.
  auto run_point = [&](size_t i) {
    SweepPoint& p = report.points[i];
    DistillConfig dc = base_dc;
    dc.temperature = p.temperature;
    dc.alpha = p.alpha;
    Model student(student_cfg, tc.seed);
    Config unused;
    TrainReport r = fit(student, &teacher, ds, tc, &dc, "", unused);
    p.val_loss = r.best_val_loss;
    p.val_accuracy = r.best_val_accuracy;
    p.best_epoch = r.best_epoch;
    p.seconds = r.total_seconds;
  };

  size_t npoints = report.points.size();
  size_t workers = parallel ? std::min<size_t>((size_t)std::max<int64_t>(1, max_threads), npoints)
                            : 1;
  if (workers <= 1) {
    for (size_t i = 0; i < npoints; ++i) run_point(i);
  } else {
    std::atomic<size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          size_t i = next.fetch_add(1);
          if (i >= npoints) return;
          try {
            run_point(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
            return;
          }
        }
      });
    }
    for (std::thread& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  for (size_t i = 1; i < npoints; ++i) {
    if (report.points[i].val_accuracy > report.points[report.best_index].val_accuracy) {
      report.best_index = i;
    }
  }
  return report;
}

}  // namespace kdf
