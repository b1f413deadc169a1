// SPDX-License-Identifier: Apache-2.0
#include "core/blocks.hpp"

#include <cmath>

#include "core/common.hpp"

namespace kdf {

namespace {

float kaiming_std(int64_t fan_in) { return std::sqrt(2.0f / (float)fan_in); }

}  // namespace

int64_t count_trainable(const std::vector<ParamInfo>& params) {
  int64_t n = 0;
  for (const auto& p : params)
    if (p.trainable) n += p.tensor.numel();
  return n;
}

int64_t count_with_buffers(const std::vector<ParamInfo>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

// ------------------------------------------------------------------- Conv2d

Conv2d::Conv2d(int64_t in_c, int64_t out_c, int64_t k, int64_t stride, int64_t padding,
               bool with_bias, std::mt19937_64& rng)
    : stride(stride), padding(padding) {
  if (in_c < 1 || out_c < 1 || k < 1) {
    fail(ErrorKind::InvalidArgument, "conv layer: channel and kernel sizes must be positive");
  }
  weight = Tensor::randn({out_c, in_c, k, k}, rng, kaiming_std(in_c * k * k), true);
  if (with_bias) bias = Tensor::zeros({out_c}, true);
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d_raw(x, weight, bias, stride, padding); }

void Conv2d::collect(const std::string& prefix, std::vector<ParamInfo>& out) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

// -------------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(int64_t channels, float momentum, float eps)
    : momentum(momentum), eps(eps) {
  scale = Tensor::full({channels}, 1.0f, true);
  shift = Tensor::zeros({channels}, true);
  running_mean = Tensor::zeros({channels});
  running_var = Tensor::full({channels}, 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  return batch_norm2d(x, scale, shift, running_mean, running_var, training, momentum, eps);
}

void BatchNorm2d::collect(const std::string& prefix, std::vector<ParamInfo>& out) const {
  out.push_back({prefix + ".scale", scale, true});
  out.push_back({prefix + ".shift", shift, true});
  out.push_back({prefix + ".running_mean", running_mean, false});
  out.push_back({prefix + ".running_var", running_var, false});
}

// ---------------------------------------------------------------- ConvBlock

ConvBlock::ConvBlock(int64_t in_c, int64_t out_c, bool pool, float bn_momentum, float bn_eps,
                     std::mt19937_64& rng)
    : conv(in_c, out_c, 3, 1, 1, true, rng), bn(out_c, bn_momentum, bn_eps), pool(pool) {}

Tensor ConvBlock::forward(const Tensor& x, bool training) {
  Tensor y = relu(bn.forward(conv.forward(x), training));
  if (pool) y = max_pool2d(y, 2, 2);
  return y;
}

void ConvBlock::collect(const std::string& prefix, std::vector<ParamInfo>& out) const {
  conv.collect(prefix + ".conv", out);
  bn.collect(prefix + ".bn", out);
}

// -------------------------------------------------------------- LinearLayer

LinearLayer::LinearLayer(int64_t in_f, int64_t out_f, bool with_bias, std::mt19937_64& rng) {
  if (in_f < 1 || out_f < 1) fail(ErrorKind::InvalidArgument, "linear layer: feature sizes must be positive");
  weight = Tensor::randn({out_f, in_f}, rng, kaiming_std(in_f), true);
  if (with_bias) bias = Tensor::zeros({out_f}, true);
}

Tensor LinearLayer::forward(const Tensor& x) const { return linear(x, weight, bias); }

void LinearLayer::collect(const std::string& prefix, std::vector<ParamInfo>& out) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

// ------------------------------------------------------------------ SEBlock

SEBlock::SEBlock(int64_t channels, int64_t reduction, bool with_bias, std::mt19937_64& rng)
    : channels(channels) {
  if (reduction < 1 || channels < 1 || channels % reduction != 0) {
    fail(ErrorKind::InvalidArgument, "se block: reduction " + std::to_string(reduction) +
                                         " must divide channel count " + std::to_string(channels));
  }
  int64_t hidden = channels / reduction;
  squeeze = LinearLayer(channels, hidden, with_bias, rng);
  excite = LinearLayer(hidden, channels, with_bias, rng);
}

Tensor SEBlock::forward(const Tensor& x) const {
  if (x.ndim() != 4 || x.dim(1) != channels) {
    fail(ErrorKind::InvalidArgument, "se block: expected input with " + std::to_string(channels) +
                                         " channels, got " + shape_str(x.shape()));
  }
  int64_t n = x.dim(0);
  Tensor s = adaptive_avg_pool2d(x, 1, 1);
  s = reshape(s, {n, channels});
  s = relu(squeeze.forward(s));
  s = sigmoid(excite.forward(s));
  s = reshape(s, {n, channels, 1, 1});
  return mul(x, s);
}

void SEBlock::collect(const std::string& prefix, std::vector<ParamInfo>& out) const {
  squeeze.collect(prefix + ".squeeze", out);
  excite.collect(prefix + ".excite", out);
}

// ------------------------------------------------------------ ResidualBlock

ResidualBlock::ResidualBlock(int64_t in_c, int64_t out_c, int64_t stride, float bn_momentum,
                             float bn_eps, std::mt19937_64& rng)
    : conv1(in_c, out_c, 3, stride, 1, true, rng),
      conv2(out_c, out_c, 3, 1, 1, true, rng),
      bn1(out_c, bn_momentum, bn_eps),
      bn2(out_c, bn_momentum, bn_eps),
      projected(in_c != out_c || stride != 1) {
  if (projected) {
    project = Conv2d(in_c, out_c, 1, stride, 0, true, rng);
    project_bn = BatchNorm2d(out_c, bn_momentum, bn_eps);
  }
}

Tensor ResidualBlock::forward(const Tensor& x, bool training) {
  Tensor y = relu(bn1.forward(conv1.forward(x), training));
  y = bn2.forward(conv2.forward(y), training);
  Tensor shortcut = projected ? project_bn.forward(project.forward(x), training) : x;
  return relu(add(y, shortcut));
}

void ResidualBlock::collect(const std::string& prefix, std::vector<ParamInfo>& out) const {
  conv1.collect(prefix + ".conv1", out);
  bn1.collect(prefix + ".bn1", out);
  conv2.collect(prefix + ".conv2", out);
  bn2.collect(prefix + ".bn2", out);
  if (projected) {
    project.collect(prefix + ".project", out);
    project_bn.collect(prefix + ".project_bn", out);
  }
}

}  // namespace kdf
