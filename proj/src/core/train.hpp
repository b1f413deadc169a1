// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "core/blocks.hpp"
#include "core/config.hpp"
#include "core/data.hpp"
#include "core/distill.hpp"
#include "core/model.hpp"

namespace kdf {

struct TrainConfig {
  int64_t batch_size = 16;
  int64_t epochs = 80;
  double lr = 1e-3;
  double momentum = 0.9;
  double plateau_factor = 0.1;
  int64_t plateau_patience = 5;
  std::string plateau_metric = "val_loss";  // val_loss or val_accuracy
  double plateau_tolerance = 1e-4;
  double min_lr = 1e-7;
  uint64_t seed = 0;
  double flip_probability = 0.5;
  bool deterministic = false;               // pins batch order to (seed, epoch); zeroes timing
  std::string class_weighting = "inverse";  // inverse (N/(C*n_c)) or uniform
  int64_t eval_batch = 64;

  static TrainConfig from_config(const Config& cfg);
  void validate() const;  // reports every problem at once
};

// Momentum SGD over the trainable parameters: v <- momentum*v + g,
// p <- p - lr*v, gradients cleared after the step.
class SgdOptimizer {
 public:
  SgdOptimizer(const std::vector<ParamInfo>& params, double lr, double momentum);
  void step();  // fails if any owned parameter is missing its gradient
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<ParamInfo> params_;  // trainable subset
  std::vector<std::vector<float>> velocity_;
  double lr_;
  double momentum_;
};

// Multiplies the rate by `factor` after `patience` consecutive observations
// without improvement beyond `tolerance`; the counter resets on improvement
// or decay, and the rate never drops below `min_lr`.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, int64_t patience, double tolerance, double min_lr,
                   bool higher_is_better);
  double observe(double metric);  // returns the rate to use after this epoch
  double lr() const { return lr_; }

 private:
  double lr_, factor_, tolerance_, min_lr_;
  int64_t patience_;
  bool higher_is_better_;
  bool has_best_ = false;
  double best_ = 0.0;
  int64_t bad_ = 0;
};

struct EpochRow {
  int64_t epoch = 0;  // 1-based
  double lr = 0.0;    // rate used during this epoch
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double hard_loss = 0.0;  // cross-entropy component (equals train_loss when not distilling)
  double soft_loss = 0.0;  // raw KL component; 0 when no teacher term ran
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::string kind = "train_report";  // distill_report when a teacher drove the run
  std::string model;
  std::string dataset;
  std::string teacher;  // empty for plain training
  uint64_t seed = 0;
  bool deterministic = false;
  double temperature = 0.0, alpha = 0.0, hard_weight = 0.0;  // distillation settings
  std::vector<EpochRow> history;
  int64_t best_epoch = 0;  // epoch whose monitored metric was best
  double best_val_loss = 0.0, best_val_accuracy = 0.0;
  double final_val_loss = 0.0, final_val_accuracy = 0.0;
  std::string checkpoint;  // empty when no path was given
  double total_seconds = 0.0;

  std::string to_json() const;
};

// Full training loop: seeded per-epoch shuffle and augmentation, class-
// weighted cross entropy, optional soft-target term from a frozen teacher,
// plateau-scheduled SGD, per-epoch validation, best-epoch checkpointing.
// The validation split falls back to the training split when absent.
// `teacher` must be non-null iff `dc` is non-null with alpha > 0; teacher
// parameters are never touched. Non-finite loss aborts naming epoch/step.
TrainReport fit(Model& model, Model* teacher, const Dataset& ds, const TrainConfig& tc,
                const DistillConfig* dc, const std::string& checkpoint_path,
                const Config& run_config);

struct SweepPoint {
  double temperature = 0.0, alpha = 0.0;
  double val_loss = 0.0, val_accuracy = 0.0;  // at the run's best epoch
  int64_t best_epoch = 0;
  double seconds = 0.0;
};

struct SweepReport {
  std::string student, teacher, dataset;
  std::vector<double> temperatures, alphas;
  std::vector<SweepPoint> points;  // temperature-major grid order
  size_t best_index = 0;           // highest val_accuracy, earliest on ties

  std::string to_json() const;
};

// Distills one fresh student per (temperature, alpha) grid point from a
// shared frozen teacher. Serial by default; with parallel=true the points
// run on at most max_threads workers, results still in grid order.
SweepReport sweep(const ModelConfig& student_cfg, Model& teacher, const Dataset& ds,
                  const TrainConfig& tc, const DistillConfig& base_dc,
                  const std::vector<double>& temperatures, const std::vector<double>& alphas,
                  bool parallel, int64_t max_threads);

}  // namespace kdf
