// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <utility>
#include <vector>

#include "core/config.hpp"
#include "core/tensor.hpp"

namespace kdf {

// Soft-target transfer settings. The hard term's weight defaults to 1-alpha
// when not set explicitly.
struct DistillConfig {
  double temperature = 3.0;
  double alpha = 0.2;
  double hard_weight = -1.0;  // < 0 means "use 1 - alpha"

  static DistillConfig from_config(const Config& cfg);
  void validate() const;
  double effective_hard_weight() const { return hard_weight >= 0.0 ? hard_weight : 1.0 - alpha; }
};

// Class-weighted mean cross entropy from logits: per-sample -log p[y] scaled
// by weights[y], normalized by the summed weights of the realized labels.
// Uniform weighting is weights = {1, 1, ...} or an empty vector.
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels,
                     const std::vector<double>& class_weights);

// Tempered teacher targets, computed outside the graph: probabilities and
// their logs at temperature T.
std::pair<Tensor, Tensor> soft_targets(const Tensor& teacher_logits, double temperature);

// Row-mean KL(P || Q) where P is fixed and Q comes from the student logits at
// temperature T. Gradients flow into the student logits only.
Tensor kl_to_teacher(const Tensor& teacher_probs, const Tensor& teacher_logprobs,
                     const Tensor& student_logits, double temperature);

struct DistillLoss {
  Tensor total;
  Tensor hard;  // cross entropy term
  Tensor soft;  // undefined when alpha == 0 (no teacher term computed)
};

// total = hard_weight * CE(student, labels) + alpha * T^2 * KL(teacher || student).
// With alpha == 0 the teacher term is skipped entirely and, when the hard
// weight is exactly 1, total aliases the cross-entropy tensor bit for bit.
DistillLoss distill_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                         const std::vector<int64_t>& labels,
                         const std::vector<double>& class_weights, const DistillConfig& dc);

}  // namespace kdf
