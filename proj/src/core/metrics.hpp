// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "core/data.hpp"
#include "core/model.hpp"

namespace kdf {

struct ConfusionMatrix {
  int64_t num_classes = 0;
  std::vector<int64_t> cells;  // row = truth, column = prediction

  explicit ConfusionMatrix(int64_t num_classes = 0)
      : num_classes(num_classes), cells((size_t)(num_classes * num_classes), 0) {}
  int64_t& at(int64_t truth, int64_t pred) { return cells[(size_t)(truth * num_classes + pred)]; }
  int64_t at(int64_t truth, int64_t pred) const { return cells[(size_t)(truth * num_classes + pred)]; }
  int64_t total() const;
  int64_t diagonal() const;
  double accuracy() const;  // diagonal / total
  // One-vs-rest accuracy per class: (TP + TN) / total.
  std::vector<double> per_class_accuracy() const;
  void merge(const ConfusionMatrix& other);
};

struct EvalResult {
  double loss = 0.0;      // mean unweighted cross entropy
  double accuracy = 0.0;  // fraction in [0, 1]
  ConfusionMatrix confusion;
};

// Eval-mode forward over the whole list in fixed order; no graph is built.
EvalResult evaluate(Model& model, const std::vector<Sample>& samples, int64_t batch_size);

std::string eval_report_json(const EvalResult& result, const std::string& model_name,
                             const std::string& split);

struct LatencyStats {
  double mean_ms = 0, median_ms = 0, p95_ms = 0, min_ms = 0, max_ms = 0;
  int64_t warmup = 0, runs = 0;
  int64_t height = 0, width = 0;  // spatial size of the probe input
};

// Batch-1 eval-mode forward latency; single-threaded, parameters untouched.
LatencyStats bench_latency(Model& model, int64_t height, int64_t width, int64_t warmup,
                           int64_t runs);

struct MemoryReport {
  int64_t trainable_params = 0;
  int64_t parameter_bytes = 0;            // 4 bytes per trainable element
  int64_t activation_estimate_bytes = 0;  // analytic batch-1 forward footprint
  int64_t peak_rss_bytes = 0;             // process high-water mark, platform probe
};

MemoryReport memory_report(const Model& model);

// Analytic single-pass float32 feature-map footprint at batch 1, excluding
// gradients and gemm workspace.
int64_t activation_estimate_bytes(const ModelConfig& cfg);

std::string bench_report_json(const std::string& model_name, const ModelConfig& cfg,
                              const LatencyStats& lat, const MemoryReport& mem,
                              bool zero_timing);

// (base - x) / base * 100, rounded to 2 decimals.
double improvement_pct(double base, double x);

struct CompareEntry {
  std::string name;
  std::vector<std::pair<std::string, double>> metrics;  // metric -> value
};

// First entry is the baseline; every later entry reports its rounded
// percentage improvement for each metric the baseline carries.
std::string compare_report_json(const std::vector<CompareEntry>& entries);

// Render any report produced by this library ("kind" field) as CSV or as an
// aligned text table.
std::string report_json_to_csv(const std::string& report_json);
std::string report_json_to_text(const std::string& report_json);

}  // namespace kdf
