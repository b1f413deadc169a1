// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace kdf {

// Named handle into a module tree. Buffers (trainable=false) are serialized
// and updated by forward passes but never touched by the optimizer.
struct ParamInfo {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

int64_t count_trainable(const std::vector<ParamInfo>& params);
int64_t count_with_buffers(const std::vector<ParamInfo>& params);

// Weights draw from N(0, 2/fan_in); biases start at zero. All draws come from
// the caller's rng in construction order, so a fixed seed fixes every weight.
struct Conv2d {
  Tensor weight;  // (out_c, in_c, k, k)
  Tensor bias;    // undefined when constructed without bias
  int64_t stride = 1;
  int64_t padding = 0;

  Conv2d() = default;
  Conv2d(int64_t in_c, int64_t out_c, int64_t k, int64_t stride, int64_t padding, bool with_bias,
         std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<ParamInfo>& out) const;
};

struct BatchNorm2d {
  Tensor scale, shift;               // trainable
  Tensor running_mean, running_var;  // buffers
  float momentum = 0.1f;
  float eps = 1e-5f;

  BatchNorm2d() = default;
  BatchNorm2d(int64_t channels, float momentum, float eps);
  Tensor forward(const Tensor& x, bool training);
  void collect(const std::string& prefix, std::vector<ParamInfo>& out) const;
};

// conv3x3 (stride 1, pad 1) + batch norm + relu, optionally followed by a
// 2x2/2 max pool.
struct ConvBlock {
  Conv2d conv;
  BatchNorm2d bn;
  bool pool = true;

  ConvBlock() = default;
  ConvBlock(int64_t in_c, int64_t out_c, bool pool, float bn_momentum, float bn_eps,
            std::mt19937_64& rng);
  Tensor forward(const Tensor& x, bool training);
  void collect(const std::string& prefix, std::vector<ParamInfo>& out) const;
};

struct LinearLayer {
  Tensor weight;  // (out_f, in_f)
  Tensor bias;    // undefined when constructed without bias

  LinearLayer() = default;
  LinearLayer(int64_t in_f, int64_t out_f, bool with_bias, std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<ParamInfo>& out) const;
};

// Channel gate: global average pool, squeeze to channels/reduction, relu,
// excite back to channels, sigmoid, then scale the input per channel.
struct SEBlock {
  LinearLayer squeeze;  // channels -> channels/reduction
  LinearLayer excite;   // channels/reduction -> channels
  int64_t channels = 0;

  SEBlock() = default;
  SEBlock(int64_t channels, int64_t reduction, bool with_bias, std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<ParamInfo>& out) const;
};

// Two 3x3 conv+bn stages with a projected shortcut; the first conv and the
// projection carry the stride. relu(bn2(conv2(relu(bn1(conv1 x)))) + proj x).
struct ResidualBlock {
  Conv2d conv1, conv2;
  BatchNorm2d bn1, bn2;
  bool projected = false;
  Conv2d project;
  BatchNorm2d project_bn;

  ResidualBlock() = default;
  ResidualBlock(int64_t in_c, int64_t out_c, int64_t stride, float bn_momentum, float bn_eps,
                std::mt19937_64& rng);
  Tensor forward(const Tensor& x, bool training);
  void collect(const std::string& prefix, std::vector<ParamInfo>& out) const;
};

}  // namespace kdf
