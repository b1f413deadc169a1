// SPDX-License-Identifier: Apache-2.0
#include "core/distill.hpp"

#include <cmath>

#include "core/common.hpp"

namespace kdf {

DistillConfig DistillConfig::from_config(const Config& cfg) {
  DistillConfig dc;
  dc.temperature = cfg.get_double("temperature", dc.temperature);
  dc.alpha = cfg.get_double("alpha", dc.alpha);
  auto hw = cfg.get("hard_weight");
  if (hw.has_value() && !trim(*hw).empty()) dc.hard_weight = cfg.get_double("hard_weight", 0.0);
  dc.validate();
  return dc;
}

void DistillConfig::validate() const {
  if (!(temperature > 0.0)) {
    fail(ErrorKind::InvalidArgument, "temperature must be positive, got " + format_number(temperature));
  }
  if (alpha < 0.0 || alpha > 1.0) {
    fail(ErrorKind::InvalidArgument, "alpha must be in [0, 1], got " + format_number(alpha));
  }
  if (hard_weight >= 0.0 && hard_weight > 1e6) {
    fail(ErrorKind::InvalidArgument, "hard_weight is implausibly large: " + format_number(hard_weight));
  }
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels,
                     const std::vector<double>& class_weights) {
  if (logits.ndim() != 2) {
    fail(ErrorKind::InvalidArgument, "cross_entropy: expected 2-d logits, got " + shape_str(logits.shape()));
  }
  int64_t n = logits.dim(0), c = logits.dim(1);
  if ((int64_t)labels.size() != n) {
    fail(ErrorKind::InvalidArgument, "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                         std::to_string(n) + " rows");
  }
  if (!class_weights.empty() && (int64_t)class_weights.size() != c) {
    fail(ErrorKind::InvalidArgument, "cross_entropy: " + std::to_string(class_weights.size()) +
                                         " class weights for " + std::to_string(c) + " classes");
  }
  std::vector<float> mask((size_t)(n * c), 0.0f);
  double weight_sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    int64_t y = labels[(size_t)i];
    if (y < 0 || y >= c) {
      fail(ErrorKind::InvalidArgument, "cross_entropy: label " + std::to_string(y) + " at row " +
                                           std::to_string(i) + " is outside [0, " + std::to_string(c) + ")");
    }
    double w = class_weights.empty() ? 1.0 : class_weights[(size_t)y];
    mask[(size_t)(i * c + y)] = (float)w;
    weight_sum += w;
  }
  if (!(weight_sum > 0.0)) {
    fail(ErrorKind::InvalidArgument, "cross_entropy: class weights sum to zero over this batch");
  }
  Tensor picked = mul(Tensor::from_values({n, c}, std::move(mask)), log_softmax_rows(logits, 1.0));
  return scale(sum(picked), (float)(-1.0 / weight_sum));
}

std::pair<Tensor, Tensor> soft_targets(const Tensor& teacher_logits, double temperature) {
  if (teacher_logits.ndim() != 2) {
    fail(ErrorKind::InvalidArgument,
         "soft_targets: expected 2-d logits, got " + shape_str(teacher_logits.shape()));
  }
  if (!(temperature > 0.0)) {
    fail(ErrorKind::InvalidArgument, "soft_targets: temperature must be positive");
  }
  int64_t n = teacher_logits.dim(0), c = teacher_logits.dim(1);
  std::vector<float> probs((size_t)(n * c)), logprobs((size_t)(n * c));
  const float* in = teacher_logits.data();
  for (int64_t i = 0; i < n; ++i) {
    const float* row = in + i * c;
    double mx = -1e300;
    for (int64_t j = 0; j < c; ++j) mx = std::max(mx, (double)row[j] / temperature);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp((double)row[j] / temperature - mx);
    double lse = mx + std::log(z);
    for (int64_t j = 0; j < c; ++j) {
      double lp = (double)row[j] / temperature - lse;
      logprobs[(size_t)(i * c + j)] = (float)lp;
      probs[(size_t)(i * c + j)] = (float)std::exp(lp);
    }
  }
  return {Tensor::from_values({n, c}, std::move(probs)),
          Tensor::from_values({n, c}, std::move(logprobs))};
}

Tensor kl_to_teacher(const Tensor& teacher_probs, const Tensor& teacher_logprobs,
                     const Tensor& student_logits, double temperature) {
  if (teacher_probs.shape() != student_logits.shape() ||
      teacher_logprobs.shape() != student_logits.shape()) {
    fail(ErrorKind::InvalidArgument, "kl_to_teacher: teacher targets " + shape_str(teacher_probs.shape()) +
                                         " do not match student logits " + shape_str(student_logits.shape()));
  }
  int64_t n = student_logits.dim(0);
  Tensor student_logprobs = log_softmax_rows(student_logits, temperature);
  Tensor gap = sub(teacher_logprobs, student_logprobs);
  return scale(sum(mul(teacher_probs, gap)), (float)(1.0 / (double)n));
}

DistillLoss distill_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                         const std::vector<int64_t>& labels,
                         const std::vector<double>& class_weights, const DistillConfig& dc) {
  dc.validate();
  DistillLoss out;
  out.hard = cross_entropy(student_logits, labels, class_weights);
  double hw = dc.effective_hard_weight();
  if (dc.alpha == 0.0) {
    out.total = hw == 1.0 ? out.hard : scale(out.hard, (float)hw);
    return out;
  }
  auto [probs, logprobs] = soft_targets(teacher_logits, dc.temperature);
  out.soft = kl_to_teacher(probs, logprobs, student_logits, dc.temperature);
  double soft_w = dc.alpha * dc.temperature * dc.temperature;
  out.total = add(scale(out.hard, (float)hw), scale(out.soft, (float)soft_w));
  return out;
}

}  // namespace kdf
