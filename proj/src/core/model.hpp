// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "core/blocks.hpp"
#include "core/config.hpp"
#include "core/tensor.hpp"

namespace kdf {

// Structural description of one network. The four presets share a single
// family rule: each student halves every width of its parent except the
// class count.
struct ModelConfig {
  std::string name = "custom";
  int64_t input_channels = 3;
  int64_t input_height = 64;
  int64_t input_width = 64;
  std::vector<int64_t> conv_channels{64, 128, 256};
  int64_t se_channels = 256;
  int64_t se_reduction = 16;
  bool se_bias = false;
  std::vector<int64_t> residual_channels{256, 512, 1024};
  std::vector<int64_t> head_widths{1024, 512, 256, 7};
  double dropout_rate = 0.2;
  int64_t num_classes = 7;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.1;

  static ModelConfig preset(const std::string& name);
  static ModelConfig from_config(const Config& cfg);  // validates; reports every problem at once
  ModelConfig halved(const std::string& child_name) const;
  void validate() const;
  void apply_to(Config& cfg) const;

  // Output channels entering the classifier head (the last residual block
  // doubles its input width).
  int64_t final_channels() const { return residual_channels.back() * 2; }
  int64_t head_layers() const { return (int64_t)head_widths.size(); }
};

struct LayerSummary {
  std::string name;
  std::string kind;
  std::string detail;
  std::string output;  // batch-free output shape, "CxHxW" or a width
  int64_t trainable = 0;
  int64_t buffers = 0;
};

// Closed-form per-layer parameter table; matches the tensors a built Model
// actually allocates.
std::vector<LayerSummary> describe(const ModelConfig& cfg);
int64_t described_trainable(const ModelConfig& cfg);
int64_t described_buffers(const ModelConfig& cfg);

// Per-layer table plus totals, float32 sizes and, for the known presets, the
// comparison against the published parameter count.
std::string model_summary_json(const ModelConfig& cfg);

// Published totals the presets are checked against; 0 for unknown names.
int64_t reference_total(const std::string& preset_name);

class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed);

  // x is (N, input_channels, H, W); returns logits (N, num_classes).
  // dropout_rng is required when training with a nonzero dropout rate.
  Tensor forward(const Tensor& x, bool training, std::mt19937_64* dropout_rng = nullptr);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<ParamInfo>& params() const { return params_; }
  Tensor find(const std::string& name) const;  // fails on unknown name
  int64_t trainable_count() const;
  int64_t size_bytes() const;  // float32 payload of the trainable tensors

  // Snapshot container: magic, version, the run config as text, then every
  // named tensor including batch-norm running statistics.
  void save_checkpoint(const std::string& path, const Config& run_config) const;
  static Model load_checkpoint(const std::string& path, Config* run_config_out = nullptr);

 private:
  ModelConfig cfg_;
  std::vector<ConvBlock> stages_;
  SEBlock se_;
  std::vector<ResidualBlock> residual_;
  std::vector<LinearLayer> head_;
  std::vector<ParamInfo> params_;

  void collect_params();
};

}  // namespace kdf
