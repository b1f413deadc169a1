// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace kdf {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorData;

// Dense row-major float32 value with optional participation in the reverse-mode
// graph. Graph ops never mutate their inputs; leaves may be rewritten in place
// between passes (optimizer steps, running statistics). Copying a Tensor copies
// the handle, not the payload.
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, float stddev, bool requires_grad = false);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const;
  int64_t ndim() const;
  int64_t dim(size_t i) const;
  int64_t numel() const;
  const float* data() const;
  float* data();
  const std::vector<float>& values() const;
  float item() const;  // scalar tensors only

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  const std::vector<float>& grad() const;
  std::vector<float>& mutable_grad();
  void zero_grad();

  // Same values, detached from the graph (no grad_fn, requires_grad=false).
  Tensor detach() const;

  uint64_t id() const;
  std::shared_ptr<TensorData> ptr() const { return d_; }

private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
  friend Tensor make_op_output(const char* name, Shape shape, std::vector<float> values,
                               std::vector<Tensor> inputs,
                               std::function<void(TensorData&)> backward);
};

// ------------------------------------------------------------- autograd mode

bool grad_enabled();

// Disables graph recording in scope; eval/bench/frozen-teacher paths use this.
class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

// ------------------------------------------------------------------ gradtape

// Ordered record of the primitive ops reachable from a root: every node's
// inputs precede it, and backward() sweeps exactly this list in reverse.
struct GradTape {
  struct Node {
    std::string op;
    uint64_t output_id;
    std::vector<uint64_t> input_ids;
  };
  std::vector<Node> nodes;
};

GradTape trace(const Tensor& root);

// Populates grad on every requires_grad leaf reachable from loss; the graph
// is consumed (node closures released) as the sweep progresses.
void backward(const Tensor& loss);

// ----------------------------------------------------------------- primitives

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // |denominator| clamped to >= 1e-12
Tensor scale(const Tensor& x, float c);
Tensor add_scalar(const Tensor& x, float c);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);  // argument clamped to <= 87 (float overflow guard)
Tensor log(const Tensor& x);  // argument clamped to >= 1e-12
Tensor matmul(const Tensor& a, const Tensor& b);           // (N,K) x (K,M)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x(N,F) w(O,F) [+b(O)]
Tensor conv2d_raw(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
                  int64_t padding);                        // x(N,C,H,W) w(O,C,k,k) [b(O)]
Tensor max_pool2d(const Tensor& x, int64_t kernel, int64_t stride);
Tensor adaptive_avg_pool2d(const Tensor& x, int64_t out_h, int64_t out_w);
Tensor mean(const Tensor& x);  // full reduce to scalar
Tensor sum(const Tensor& x);   // full reduce to scalar
Tensor reshape(const Tensor& x, Shape shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor softmax_rows(const Tensor& logits, double temperature);      // (N,C), T > 0
Tensor log_softmax_rows(const Tensor& logits, double temperature);  // (N,C), T > 0
Tensor batch_norm2d(const Tensor& x, const Tensor& scale, const Tensor& shift,
                    Tensor& running_mean, Tensor& running_var, bool training, float momentum,
                    float eps);
Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng);

// ------------------------------------------------------- non-graph utilities

std::vector<int64_t> argmax_rows(const Tensor& x);  // ties break to lowest index

// C[MxN] += A[MxK] * B[KxN]; fixed k-ascending accumulation order.
void gemm_nn(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n);
// C[MxN] += A[MxK] * B[NxK]^T
void gemm_nt(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n);
// C[MxN] += A[KxM]^T * B[KxN]
void gemm_tn(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n);

}  // namespace kdf
