// SPDX-License-Identifier: Apache-2.0
#include "core/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <unordered_set>

#include "core/common.hpp"

namespace kdf {

namespace {

std::atomic<uint64_t> g_next_id{1};

thread_local bool g_grad_enabled = true;

constexpr float kDivFloor = 1e-12f;
constexpr float kLogFloor = 1e-12f;
constexpr float kExpCeil = 87.0f;

float clamp_denom(float v) {
  if (v >= 0.0f) return std::max(v, kDivFloor);
  return std::min(v, -kDivFloor);
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

struct OpNode {
  std::string op;
  std::vector<std::shared_ptr<TensorData>> inputs;
  std::function<void(TensorData&)> backward;
};

struct TensorData {
  uint64_t id = 0;
  Shape shape;
  std::vector<float> values;
  bool requires_grad = false;
  std::vector<float> grad;
  std::unique_ptr<OpNode> node;
};

namespace {

std::shared_ptr<TensorData> make_data(Shape shape, std::vector<float> values, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) fail(ErrorKind::InvalidArgument, "tensor: non-positive dimension in " + shape_str(shape));
  }
  auto d = std::make_shared<TensorData>();
  d->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  d->shape = std::move(shape);
  d->values = std::move(values);
  d->requires_grad = requires_grad;
  if ((int64_t)d->values.size() != shape_numel(d->shape)) {
    fail(ErrorKind::InvalidArgument, "tensor: value count " + std::to_string(d->values.size()) +
                                         " does not match shape " + shape_str(d->shape));
  }
  return d;
}

float* grad_buf(const std::shared_ptr<TensorData>& t) {
  if (t->grad.empty()) t->grad.assign((size_t)shape_numel(t->shape), 0.0f);
  return t->grad.data();
}

bool wants_grad(const std::shared_ptr<TensorData>& t) { return t->requires_grad; }

}  // namespace

Tensor make_op_output(const char* name, Shape shape, std::vector<float> values,
                      std::vector<Tensor> inputs, std::function<void(TensorData&)> backward) {
  bool any = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs)
      if (in.defined() && in.requires_grad()) any = true;
  }
  auto d = make_data(std::move(shape), std::move(values), any);
  if (any) {
    auto node = std::make_unique<OpNode>();
    node->op = name;
    for (const auto& in : inputs)
      if (in.defined()) node->inputs.push_back(in.ptr());
    node->backward = std::move(backward);
    d->node = std::move(node);
  }
  return Tensor(std::move(d));
}

// ----------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(make_data(std::move(shape), std::vector<float>((size_t)n, 0.0f), requires_grad));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(make_data(std::move(shape), std::vector<float>((size_t)n, value), requires_grad));
}

Tensor Tensor::from_values(Shape shape, std::vector<float> values, bool requires_grad) {
  return Tensor(make_data(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor(make_data(Shape{1}, std::vector<float>{value}, requires_grad));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, float stddev, bool requires_grad) {
  auto n = shape_numel(shape);
  std::vector<float> v((size_t)n);
  for (auto& x : v) x = (float)(normal_sample(rng) * (double)stddev);
  return Tensor(make_data(std::move(shape), std::move(v), requires_grad));
}

const Shape& Tensor::shape() const { return d_->shape; }
int64_t Tensor::ndim() const { return (int64_t)d_->shape.size(); }
int64_t Tensor::dim(size_t i) const { return d_->shape.at(i); }
int64_t Tensor::numel() const { return shape_numel(d_->shape); }
const float* Tensor::data() const { return d_->values.data(); }
float* Tensor::data() { return d_->values.data(); }
const std::vector<float>& Tensor::values() const { return d_->values; }

float Tensor::item() const {
  if (numel() != 1) fail(ErrorKind::InvalidArgument, "item: tensor has shape " + shape_str(d_->shape) + ", expected a scalar");
  return d_->values[0];
}

bool Tensor::requires_grad() const { return d_ && d_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  d_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return d_ && !d_->grad.empty(); }

const std::vector<float>& Tensor::grad() const {
  if (!has_grad()) fail(ErrorKind::InvalidArgument, "grad: no gradient populated for this tensor");
  return d_->grad;
}

std::vector<float>& Tensor::mutable_grad() {
  grad_buf(d_);
  return d_->grad;
}

void Tensor::zero_grad() {
  if (d_) d_->grad.clear();
}

Tensor Tensor::detach() const {
  return Tensor(make_data(d_->shape, d_->values, false));
}

uint64_t Tensor::id() const { return d_->id; }

// ------------------------------------------------------------ autograd mode

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ----------------------------------------------------------------- traversal

namespace {

// Holds shared ownership: the sweep releases input edges as it consumes
// nodes, which would otherwise free producers still waiting to run.
std::vector<std::shared_ptr<TensorData>> collect_graph(const std::shared_ptr<TensorData>& root) {
  std::vector<std::shared_ptr<TensorData>> out;
  std::unordered_set<TensorData*> seen;
  std::vector<std::shared_ptr<TensorData>> stack{root};
  seen.insert(root.get());
  while (!stack.empty()) {
    std::shared_ptr<TensorData> t = stack.back();
    stack.pop_back();
    if (t->node) {
      for (const auto& in : t->node->inputs) {
        if (seen.insert(in.get()).second) stack.push_back(in);
      }
      out.push_back(std::move(t));
    }
  }
  return out;
}

}  // namespace

GradTape trace(const Tensor& root) {
  GradTape tape;
  if (!root.defined()) return tape;
  auto nodes = collect_graph(root.ptr());
  std::sort(nodes.begin(), nodes.end(), [](const auto& a, const auto& b) { return a->id < b->id; });
  for (const auto& t : nodes) {
    GradTape::Node n;
    n.op = t->node->op;
    n.output_id = t->id;
    for (const auto& in : t->node->inputs) n.input_ids.push_back(in->id);
    tape.nodes.push_back(std::move(n));
  }
  return tape;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) fail(ErrorKind::InvalidArgument, "backward: undefined tensor");
  if (loss.numel() != 1) {
    fail(ErrorKind::InvalidArgument, "backward: root has shape " + shape_str(loss.shape()) + ", expected a scalar");
  }
  if (!loss.requires_grad()) {
    fail(ErrorKind::InvalidArgument, "backward: root does not require grad (graph disabled or already consumed)");
  }
  auto root = loss.ptr();
  grad_buf(root);
  root->grad[0] = 1.0f;
  auto nodes = collect_graph(root);
  // ids are assigned in creation order and inputs are created before outputs,
  // so descending id is a valid reverse-topological sweep.
  std::sort(nodes.begin(), nodes.end(), [](const auto& a, const auto& b) { return a->id > b->id; });
  for (const auto& t : nodes) {
    if (t->grad.empty()) t->grad.assign((size_t)shape_numel(t->shape), 0.0f);
    t->node->backward(*t);
    t->node.reset();  // tape consumed
  }
}

// --------------------------------------------------------------- broadcasting

namespace {

Shape broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (size_t i = 0; i < n; ++i) {
    int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      fail(ErrorKind::InvalidArgument, std::string(op) + ": shapes " + shape_str(a) + " and " +
                                           shape_str(b) + " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides of `from` viewed through `to`; 0 where `from` is broadcast.
std::vector<int64_t> broadcast_strides(const Shape& from, const Shape& to) {
  std::vector<int64_t> strides(to.size(), 0);
  int64_t acc = 1;
  for (int i = (int)from.size() - 1; i >= 0; --i) {
    size_t j = to.size() - (from.size() - i);
    strides[j] = (from[i] == 1 && to[j] != 1) ? 0 : acc;
    acc *= from[i];
  }
  return strides;
}

int64_t strided_offset(int64_t flat, const Shape& out, const std::vector<int64_t>& strides) {
  int64_t off = 0;
  for (int d = (int)out.size() - 1; d >= 0; --d) {
    int64_t idx = flat % out[d];
    flat /= out[d];
    off += idx * strides[d];
  }
  return off;
}

// fwd(av, bv) -> out; dfa/dfb(av, bv, outv) -> local derivative factor.
template <class FwdF, class DaF, class DbF>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdF fwd, DaF dfa, DbF dfb) {
  if (!a.defined() || !b.defined()) fail(ErrorKind::InvalidArgument, std::string(name) + ": undefined operand");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) {
    int64_t n = a.numel();
    std::vector<float> out((size_t)n);
    const float* pa = a.data();
    const float* pb = b.data();
    for (int64_t i = 0; i < n; ++i) out[(size_t)i] = fwd(pa[i], pb[i]);
    auto da = a.ptr();
    auto db = b.ptr();
    return make_op_output(name, sa, std::move(out), {a, b}, [da, db, dfa, dfb, n](TensorData& self) {
      const float* g = self.grad.data();
      const float* pa = da->values.data();
      const float* pb = db->values.data();
      const float* po = self.values.data();
      if (wants_grad(da)) {
        float* ga = grad_buf(da);
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * dfa(pa[i], pb[i], po[i]);
      }
      if (wants_grad(db)) {
        float* gb = grad_buf(db);
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * dfb(pa[i], pb[i], po[i]);
      }
    });
  }
  Shape so = broadcast_shapes(name, sa, sb);
  auto stra = broadcast_strides(sa, so);
  auto strb = broadcast_strides(sb, so);
  int64_t n = shape_numel(so);
  std::vector<float> out((size_t)n);
  const float* pa = a.data();
  const float* pb = b.data();
  for (int64_t i = 0; i < n; ++i) {
    out[(size_t)i] = fwd(pa[strided_offset(i, so, stra)], pb[strided_offset(i, so, strb)]);
  }
  auto da = a.ptr();
  auto db = b.ptr();
  return make_op_output(name, so, std::move(out), {a, b},
                        [da, db, dfa, dfb, so, stra, strb, n](TensorData& self) {
    const float* g = self.grad.data();
    const float* pa = da->values.data();
    const float* pb = db->values.data();
    const float* po = self.values.data();
    bool na = wants_grad(da);
    bool nb = wants_grad(db);
    float* ga = na ? grad_buf(da) : nullptr;
    float* gb = nb ? grad_buf(db) : nullptr;
    for (int64_t i = 0; i < n; ++i) {
      int64_t oa = strided_offset(i, so, stra);
      int64_t ob = strided_offset(i, so, strb);
      if (na) ga[oa] += g[i] * dfa(pa[oa], pb[ob], po[i]);
      if (nb) gb[ob] += g[i] * dfb(pa[oa], pb[ob], po[i]);
    }
  });
}

// fwd(v) -> out; dfn(v, outv) -> local derivative factor.
template <class FwdF, class DF>
Tensor unary_op(const char* name, const Tensor& x, FwdF fwd, DF dfn) {
  if (!x.defined()) fail(ErrorKind::InvalidArgument, std::string(name) + ": undefined operand");
  int64_t n = x.numel();
  std::vector<float> out((size_t)n);
  const float* px = x.data();
  for (int64_t i = 0; i < n; ++i) out[(size_t)i] = fwd(px[i]);
  auto dx = x.ptr();
  return make_op_output(name, x.shape(), std::move(out), {x}, [dx, dfn, n](TensorData& self) {
    if (!wants_grad(dx)) return;
    const float* g = self.grad.data();
    const float* pv = dx->values.data();
    const float* po = self.values.data();
    float* gx = grad_buf(dx);
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * dfn(pv[i], po[i]);
  });
}

}  // namespace

// ----------------------------------------------------------------- primitives

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](float x, float y) { return x + y; },
      [](float, float, float) { return 1.0f; }, [](float, float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](float x, float y) { return x - y; },
      [](float, float, float) { return 1.0f; }, [](float, float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](float x, float y) { return x * y; },
      [](float, float y, float) { return y; }, [](float x, float, float) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](float x, float y) { return x / clamp_denom(y); },
      [](float, float y, float) { return 1.0f / clamp_denom(y); },
      [](float x, float y, float) {
        float d = clamp_denom(y);
        return -x / (d * d);
      });
}

Tensor scale(const Tensor& x, float c) {
  return unary_op(
      "scale", x, [c](float v) { return v * c; }, [c](float, float) { return c; });
}

Tensor add_scalar(const Tensor& x, float c) {
  return unary_op(
      "add_scalar", x, [c](float v) { return v + c; }, [](float, float) { return 1.0f; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x,
      [](float v) {
        if (v >= 0.0f) {
          float e = std::exp(-v);
          return 1.0f / (1.0f + e);
        }
        float e = std::exp(v);
        return e / (1.0f + e);
      },
      [](float, float o) { return o * (1.0f - o); });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](float v) { return std::exp(std::min(v, kExpCeil)); },
      [](float, float o) { return o; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](float v) { return std::log(std::max(v, kLogFloor)); },
      [](float v, float) { return 1.0f / std::max(v, kLogFloor); });
}

// ----------------------------------------------------------------------- gemm

void gemm_nn(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
  std::vector<float> bt((size_t)(k * n));
  for (int64_t j = 0; j < n; ++j)
    for (int64_t p = 0; p < k; ++p) bt[(size_t)(p * n + j)] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

void gemm_tn(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
  std::vector<float> at((size_t)(m * k));
  for (int64_t p = 0; p < k; ++p)
    for (int64_t i = 0; i < m; ++i) at[(size_t)(i * k + p)] = a[p * m + i];
  gemm_nn(at.data(), b, c, m, k, n);
}

// --------------------------------------------------------------- matmul/linear

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    fail(ErrorKind::InvalidArgument,
         "matmul: expected 2-d operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    fail(ErrorKind::InvalidArgument,
         "matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<float> out((size_t)(n * m), 0.0f);
  gemm_nn(a.data(), b.data(), out.data(), n, k, m);
  auto da = a.ptr();
  auto db = b.ptr();
  return make_op_output("matmul", Shape{n, m}, std::move(out), {a, b},
                        [da, db, n, k, m](TensorData& self) {
    const float* g = self.grad.data();
    if (wants_grad(da)) gemm_nt(g, db->values.data(), grad_buf(da), n, m, k);
    if (wants_grad(db)) gemm_tn(da->values.data(), g, grad_buf(db), k, n, m);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 2 || w.ndim() != 2) {
    fail(ErrorKind::InvalidArgument,
         "linear: expected 2-d input and weight, got " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  int64_t n = x.dim(0), f = x.dim(1), o = w.dim(0);
  if (w.dim(1) != f) {
    fail(ErrorKind::InvalidArgument, "linear: input features " + std::to_string(f) +
                                         " do not match weight shape " + shape_str(w.shape()));
  }
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != o)) {
    fail(ErrorKind::InvalidArgument, "linear: bias shape " + shape_str(b.shape()) +
                                         " does not match " + std::to_string(o) + " outputs");
  }
  std::vector<float> out((size_t)(n * o), 0.0f);
  gemm_nt(x.data(), w.data(), out.data(), n, f, o);
  if (b.defined()) {
    const float* pb = b.data();
    for (int64_t i = 0; i < n; ++i) {
      float* row = out.data() + i * o;
      for (int64_t j = 0; j < o; ++j) row[j] += pb[j];
    }
  }
  auto dx = x.ptr();
  auto dw = w.ptr();
  auto db = b.defined() ? b.ptr() : nullptr;
  return make_op_output("linear", Shape{n, o}, std::move(out), {x, w, b},
                        [dx, dw, db, n, f, o](TensorData& self) {
    const float* g = self.grad.data();
    if (wants_grad(dx)) gemm_nn(g, dw->values.data(), grad_buf(dx), n, o, f);
    if (wants_grad(dw)) gemm_tn(g, dx->values.data(), grad_buf(dw), o, n, f);
    if (db && wants_grad(db)) {
      float* gb = grad_buf(db);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < o; ++j) gb[j] += g[i * o + j];
    }
  });
}

// ----------------------------------------------------------------------- conv

namespace {

// col is (C*k*k) x (Ho*Wo), row-major; out-of-bounds taps are zero.
void im2col(const float* x, int64_t c, int64_t h, int64_t w, int64_t k, int64_t stride,
            int64_t pad, int64_t ho, int64_t wo, float* col) {
  for (int64_t ci = 0; ci < c; ++ci) {
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        float* row = col + ((ci * k + ki) * k + kj) * (ho * wo);
        for (int64_t oh = 0; oh < ho; ++oh) {
          int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= h) {
            for (int64_t ow = 0; ow < wo; ++ow) row[oh * wo + ow] = 0.0f;
            continue;
          }
          const float* xrow = x + (ci * h + ih) * w;
          for (int64_t ow = 0; ow < wo; ++ow) {
            int64_t iw = ow * stride - pad + kj;
            row[oh * wo + ow] = (iw >= 0 && iw < w) ? xrow[iw] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, int64_t c, int64_t h, int64_t w, int64_t k, int64_t stride,
                int64_t pad, int64_t ho, int64_t wo, float* x) {
  for (int64_t ci = 0; ci < c; ++ci) {
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        const float* row = col + ((ci * k + ki) * k + kj) * (ho * wo);
        for (int64_t oh = 0; oh < ho; ++oh) {
          int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= h) continue;
          float* xrow = x + (ci * h + ih) * w;
          for (int64_t ow = 0; ow < wo; ++ow) {
            int64_t iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < w) xrow[iw] += row[oh * wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d_raw(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
                  int64_t padding) {
  if (x.ndim() != 4 || w.ndim() != 4) {
    fail(ErrorKind::InvalidArgument,
         "conv2d: expected 4-d input and weight, got " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  int64_t o = w.dim(0), wc = w.dim(1), k = w.dim(2);
  if (wc != c || w.dim(3) != k) {
    fail(ErrorKind::InvalidArgument, "conv2d: weight " + shape_str(w.shape()) +
                                         " does not match input " + shape_str(x.shape()));
  }
  if (stride < 1 || padding < 0) fail(ErrorKind::InvalidArgument, "conv2d: invalid stride or padding");
  int64_t ho = (h + 2 * padding - k) / stride + 1;
  int64_t wo = (wd + 2 * padding - k) / stride + 1;
  if (h + 2 * padding < k || wd + 2 * padding < k) {
    fail(ErrorKind::InvalidArgument, "conv2d: kernel " + std::to_string(k) +
                                         " exceeds padded input " + shape_str(x.shape()));
  }
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != o)) {
    fail(ErrorKind::InvalidArgument, "conv2d: bias shape " + shape_str(b.shape()) +
                                         " does not match " + std::to_string(o) + " filters");
  }
  int64_t ckk = c * k * k;
  int64_t sp = ho * wo;
  std::vector<float> out((size_t)(n * o * sp), 0.0f);
  std::vector<float> col((size_t)(ckk * sp));
  const float* pb = b.defined() ? b.data() : nullptr;
  for (int64_t ni = 0; ni < n; ++ni) {
    im2col(x.data() + ni * c * h * wd, c, h, wd, k, stride, padding, ho, wo, col.data());
    float* yn = out.data() + ni * o * sp;
    gemm_nn(w.data(), col.data(), yn, o, ckk, sp);
    if (pb) {
      for (int64_t oi = 0; oi < o; ++oi) {
        float* row = yn + oi * sp;
        for (int64_t s = 0; s < sp; ++s) row[s] += pb[oi];
      }
    }
  }
  auto dx = x.ptr();
  auto dw = w.ptr();
  auto db = b.defined() ? b.ptr() : nullptr;
  return make_op_output("conv2d", Shape{n, o, ho, wo}, std::move(out), {x, w, b},
                        [dx, dw, db, n, c, h, wd, o, k, stride, padding, ho, wo](TensorData& self) {
    int64_t ckk = c * k * k;
    int64_t sp = ho * wo;
    const float* g = self.grad.data();
    std::vector<float> col((size_t)(ckk * sp));
    std::vector<float> dcol;
    bool nx = wants_grad(dx);
    bool nw = wants_grad(dw);
    if (nx) dcol.resize((size_t)(ckk * sp));
    float* gx = nx ? grad_buf(dx) : nullptr;
    float* gw = nw ? grad_buf(dw) : nullptr;
    for (int64_t ni = 0; ni < n; ++ni) {
      const float* gn = g + ni * o * sp;
      if (nw) {
        im2col(dx->values.data() + ni * c * h * wd, c, h, wd, k, stride, padding, ho, wo, col.data());
        gemm_nt(gn, col.data(), gw, o, sp, ckk);
      }
      if (nx) {
        std::fill(dcol.begin(), dcol.end(), 0.0f);
        gemm_tn(dw->values.data(), gn, dcol.data(), ckk, o, sp);
        col2im_add(dcol.data(), c, h, wd, k, stride, padding, ho, wo, gx + ni * c * h * wd);
      }
    }
    if (db && wants_grad(db)) {
      float* gb = grad_buf(db);
      for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t oi = 0; oi < o; ++oi) {
          const float* row = g + (ni * o + oi) * sp;
          float acc = 0.0f;
          for (int64_t s = 0; s < sp; ++s) acc += row[s];
          gb[oi] += acc;
        }
    }
  });
}

// -------------------------------------------------------------------- pooling

Tensor max_pool2d(const Tensor& x, int64_t kernel, int64_t stride) {
  if (x.ndim() != 4) fail(ErrorKind::InvalidArgument, "max_pool2d: expected 4-d input, got " + shape_str(x.shape()));
  if (kernel < 1 || stride < 1) fail(ErrorKind::InvalidArgument, "max_pool2d: invalid kernel or stride");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < kernel || w < kernel) {
    fail(ErrorKind::InvalidArgument, "max_pool2d: kernel " + std::to_string(kernel) +
                                         " exceeds input " + shape_str(x.shape()));
  }
  int64_t ho = (h - kernel) / stride + 1;
  int64_t wo = (w - kernel) / stride + 1;
  std::vector<float> out((size_t)(n * c * ho * wo));
  std::vector<int64_t> arg((size_t)(n * c * ho * wo));
  const float* px = x.data();
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const float* plane = px + nc * h * w;
    float* oplane = out.data() + nc * ho * wo;
    int64_t* aplane = arg.data() + nc * ho * wo;
    for (int64_t oh = 0; oh < ho; ++oh) {
      for (int64_t ow = 0; ow < wo; ++ow) {
        int64_t best = (oh * stride) * w + ow * stride;
        float bv = plane[best];
        for (int64_t ki = 0; ki < kernel; ++ki)
          for (int64_t kj = 0; kj < kernel; ++kj) {
            int64_t idx = (oh * stride + ki) * w + ow * stride + kj;
            if (plane[idx] > bv) {
              bv = plane[idx];
              best = idx;
            }
          }
        oplane[oh * wo + ow] = bv;
        aplane[oh * wo + ow] = nc * h * w + best;
      }
    }
  }
  auto dx = x.ptr();
  int64_t on = n * c * ho * wo;
  return make_op_output("max_pool2d", Shape{n, c, ho, wo}, std::move(out), {x},
                        [dx, arg = std::move(arg), on](TensorData& self) {
    if (!wants_grad(dx)) return;
    const float* g = self.grad.data();
    float* gx = grad_buf(dx);
    for (int64_t i = 0; i < on; ++i) gx[arg[(size_t)i]] += g[i];
  });
}

Tensor adaptive_avg_pool2d(const Tensor& x, int64_t out_h, int64_t out_w) {
  if (x.ndim() != 4) {
    fail(ErrorKind::InvalidArgument, "adaptive_avg_pool2d: expected 4-d input, got " + shape_str(x.shape()));
  }
  if (out_h < 1 || out_w < 1) fail(ErrorKind::InvalidArgument, "adaptive_avg_pool2d: invalid output size");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<float> out((size_t)(n * c * out_h * out_w));
  const float* px = x.data();
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const float* plane = px + nc * h * w;
    float* oplane = out.data() + nc * out_h * out_w;
    for (int64_t oh = 0; oh < out_h; ++oh) {
      int64_t h0 = oh * h / out_h;
      int64_t h1 = ((oh + 1) * h + out_h - 1) / out_h;
      for (int64_t ow = 0; ow < out_w; ++ow) {
        int64_t w0 = ow * w / out_w;
        int64_t w1 = ((ow + 1) * w + out_w - 1) / out_w;
        double acc = 0.0;
        for (int64_t ih = h0; ih < h1; ++ih)
          for (int64_t iw = w0; iw < w1; ++iw) acc += plane[ih * w + iw];
        oplane[oh * out_w + ow] = (float)(acc / (double)((h1 - h0) * (w1 - w0)));
      }
    }
  }
  auto dx = x.ptr();
  return make_op_output("adaptive_avg_pool2d", Shape{n, c, out_h, out_w}, std::move(out), {x},
                        [dx, n, c, h, w, out_h, out_w](TensorData& self) {
    if (!wants_grad(dx)) return;
    const float* g = self.grad.data();
    float* gx = grad_buf(dx);
    for (int64_t nc = 0; nc < n * c; ++nc) {
      float* gplane = gx + nc * h * w;
      const float* oplane = g + nc * out_h * out_w;
      for (int64_t oh = 0; oh < out_h; ++oh) {
        int64_t h0 = oh * h / out_h;
        int64_t h1 = ((oh + 1) * h + out_h - 1) / out_h;
        for (int64_t ow = 0; ow < out_w; ++ow) {
          int64_t w0 = ow * w / out_w;
          int64_t w1 = ((ow + 1) * w + out_w - 1) / out_w;
          float share = oplane[oh * out_w + ow] / (float)((h1 - h0) * (w1 - w0));
          for (int64_t ih = h0; ih < h1; ++ih)
            for (int64_t iw = w0; iw < w1; ++iw) gplane[ih * w + iw] += share;
        }
      }
    }
  });
}

// ----------------------------------------------------------------- reductions

Tensor mean(const Tensor& x) {
  int64_t n = x.numel();
  const float* px = x.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  float v = (float)(acc / (double)n);
  auto dx = x.ptr();
  return make_op_output("mean", Shape{1}, {v}, {x}, [dx, n](TensorData& self) {
    if (!wants_grad(dx)) return;
    float share = self.grad[0] / (float)n;
    float* gx = grad_buf(dx);
    for (int64_t i = 0; i < n; ++i) gx[i] += share;
  });
}

Tensor sum(const Tensor& x) {
  int64_t n = x.numel();
  const float* px = x.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  float v = (float)acc;
  auto dx = x.ptr();
  return make_op_output("sum", Shape{1}, {v}, {x}, [dx, n](TensorData& self) {
    if (!wants_grad(dx)) return;
    float g = self.grad[0];
    float* gx = grad_buf(dx);
    for (int64_t i = 0; i < n; ++i) gx[i] += g;
  });
}

// -------------------------------------------------------------- shape changes

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    fail(ErrorKind::InvalidArgument, "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto dx = x.ptr();
  int64_t n = x.numel();
  return make_op_output("reshape", std::move(shape), x.values(), {x}, [dx, n](TensorData& self) {
    if (!wants_grad(dx)) return;
    const float* g = self.grad.data();
    float* gx = grad_buf(dx);
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
  });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  Shape so = broadcast_shapes("broadcast_to", x.shape(), shape);
  if (so != shape) {
    fail(ErrorKind::InvalidArgument,
         "broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto strides = broadcast_strides(x.shape(), shape);
  int64_t n = shape_numel(shape);
  std::vector<float> out((size_t)n);
  const float* px = x.data();
  for (int64_t i = 0; i < n; ++i) out[(size_t)i] = px[strided_offset(i, shape, strides)];
  auto dx = x.ptr();
  return make_op_output("broadcast_to", shape, std::move(out), {x},
                        [dx, shape, strides, n](TensorData& self) {
    if (!wants_grad(dx)) return;
    const float* g = self.grad.data();
    float* gx = grad_buf(dx);
    for (int64_t i = 0; i < n; ++i) gx[strided_offset(i, shape, strides)] += g[i];
  });
}

// -------------------------------------------------------------------- softmax

namespace {

void check_rows(const char* op, const Tensor& t, double temperature) {
  if (t.ndim() != 2) fail(ErrorKind::InvalidArgument, std::string(op) + ": expected 2-d logits, got " + shape_str(t.shape()));
  if (!(temperature > 0.0)) {
    fail(ErrorKind::InvalidArgument, std::string(op) + ": temperature must be positive, got " + format_number(temperature));
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& logits, double temperature) {
  check_rows("softmax", logits, temperature);
  int64_t n = logits.dim(0), c = logits.dim(1);
  std::vector<float> out((size_t)(n * c));
  const float* px = logits.data();
  for (int64_t i = 0; i < n; ++i) {
    const float* row = px + i * c;
    float* orow = out.data() + i * c;
    double mx = -1e300;
    for (int64_t j = 0; j < c; ++j) mx = std::max(mx, (double)row[j] / temperature);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double e = std::exp((double)row[j] / temperature - mx);
      orow[j] = (float)e;
      z += e;
    }
    for (int64_t j = 0; j < c; ++j) orow[j] = (float)((double)orow[j] / z);
  }
  auto dx = logits.ptr();
  return make_op_output("softmax", logits.shape(), std::move(out), {logits},
                        [dx, n, c, temperature](TensorData& self) {
    if (!wants_grad(dx)) return;
    const float* g = self.grad.data();
    const float* p = self.values.data();
    float* gx = grad_buf(dx);
    for (int64_t i = 0; i < n; ++i) {
      const float* gr = g + i * c;
      const float* pr = p + i * c;
      double dot = 0.0;
      for (int64_t j = 0; j < c; ++j) dot += (double)gr[j] * pr[j];
      for (int64_t j = 0; j < c; ++j) {
        gx[i * c + j] += (float)((double)pr[j] * ((double)gr[j] - dot) / temperature);
      }
    }
  });
}

Tensor log_softmax_rows(const Tensor& logits, double temperature) {
  check_rows("log_softmax", logits, temperature);
  int64_t n = logits.dim(0), c = logits.dim(1);
  std::vector<float> out((size_t)(n * c));
  const float* px = logits.data();
  for (int64_t i = 0; i < n; ++i) {
    const float* row = px + i * c;
    float* orow = out.data() + i * c;
    double mx = -1e300;
    for (int64_t j = 0; j < c; ++j) mx = std::max(mx, (double)row[j] / temperature);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp((double)row[j] / temperature - mx);
    double lse = mx + std::log(z);
    for (int64_t j = 0; j < c; ++j) orow[j] = (float)((double)row[j] / temperature - lse);
  }
  auto dx = logits.ptr();
  return make_op_output("log_softmax", logits.shape(), std::move(out), {logits},
                        [dx, n, c, temperature](TensorData& self) {
    if (!wants_grad(dx)) return;
    const float* g = self.grad.data();
    const float* lp = self.values.data();
    float* gx = grad_buf(dx);
    for (int64_t i = 0; i < n; ++i) {
      const float* gr = g + i * c;
      const float* lr = lp + i * c;
      double gsum = 0.0;
      for (int64_t j = 0; j < c; ++j) gsum += gr[j];
      for (int64_t j = 0; j < c; ++j) {
        gx[i * c + j] += (float)(((double)gr[j] - std::exp((double)lr[j]) * gsum) / temperature);
      }
    }
  });
}

// ----------------------------------------------------------------- batch norm

Tensor batch_norm2d(const Tensor& x, const Tensor& scale, const Tensor& shift,
                    Tensor& running_mean, Tensor& running_var, bool training, float momentum,
                    float eps) {
  if (x.ndim() != 4) fail(ErrorKind::InvalidArgument, "batch_norm2d: expected 4-d input, got " + shape_str(x.shape()));
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto check_c = [&](const char* what, const Tensor& t) {
    if (!t.defined() || t.ndim() != 1 || t.dim(0) != c) {
      fail(ErrorKind::InvalidArgument, std::string("batch_norm2d: ") + what + " shape does not match " +
                                           std::to_string(c) + " channels");
    }
  };
  check_c("scale", scale);
  check_c("shift", shift);
  check_c("running mean", running_mean);
  check_c("running var", running_var);
  int64_t sp = h * w;
  int64_t m = n * sp;
  std::vector<float> mu((size_t)c), istd((size_t)c);
  const float* px = x.data();
  if (training) {
    if (m < 2) fail(ErrorKind::Numeric, "batch_norm2d: batch statistics need at least 2 samples per channel");
    float* rm = running_mean.data();
    float* rv = running_var.data();
    for (int64_t ci = 0; ci < c; ++ci) {
      double acc = 0.0;
      for (int64_t ni = 0; ni < n; ++ni) {
        const float* plane = px + (ni * c + ci) * sp;
        for (int64_t s = 0; s < sp; ++s) acc += plane[s];
      }
      double mean_v = acc / (double)m;
      double var_acc = 0.0;
      for (int64_t ni = 0; ni < n; ++ni) {
        const float* plane = px + (ni * c + ci) * sp;
        for (int64_t s = 0; s < sp; ++s) {
          double d = (double)plane[s] - mean_v;
          var_acc += d * d;
        }
      }
      double var_b = var_acc / (double)m;          // used for normalization
      double var_u = var_acc / (double)(m - 1);    // used for the running estimate
      mu[(size_t)ci] = (float)mean_v;
      istd[(size_t)ci] = (float)(1.0 / std::sqrt(var_b + (double)eps));
      rm[ci] = (1.0f - momentum) * rm[ci] + momentum * (float)mean_v;
      rv[ci] = (1.0f - momentum) * rv[ci] + momentum * (float)var_u;
    }
  } else {
    const float* rm = running_mean.data();
    const float* rv = running_var.data();
    for (int64_t ci = 0; ci < c; ++ci) {
      mu[(size_t)ci] = rm[ci];
      istd[(size_t)ci] = (float)(1.0 / std::sqrt((double)rv[ci] + (double)eps));
    }
  }
  std::vector<float> out((size_t)(n * c * sp));
  const float* pg = scale.data();
  const float* pb = shift.data();
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t ci = 0; ci < c; ++ci) {
      const float* plane = px + (ni * c + ci) * sp;
      float* oplane = out.data() + (ni * c + ci) * sp;
      float mu_c = mu[(size_t)ci], istd_c = istd[(size_t)ci];
      float g_c = pg[ci], b_c = pb[ci];
      for (int64_t s = 0; s < sp; ++s) oplane[s] = (plane[s] - mu_c) * istd_c * g_c + b_c;
    }
  }
  auto dx = x.ptr();
  auto dg = scale.ptr();
  auto db = shift.ptr();
  return make_op_output("batch_norm2d", x.shape(), std::move(out), {x, scale, shift},
                        [dx, dg, db, mu, istd, n, c, sp, training](TensorData& self) {
    int64_t m = n * sp;
    const float* g = self.grad.data();
    const float* px = dx->values.data();
    const float* pg = dg->values.data();
    bool nx = wants_grad(dx);
    bool ng = wants_grad(dg);
    bool nb = wants_grad(db);
    float* gx = nx ? grad_buf(dx) : nullptr;
    float* gg = ng ? grad_buf(dg) : nullptr;
    float* gb = nb ? grad_buf(db) : nullptr;
    for (int64_t ci = 0; ci < c; ++ci) {
      float mu_c = mu[(size_t)ci], istd_c = istd[(size_t)ci], g_c = pg[ci];
      double sum_dy = 0.0, sum_dy_xh = 0.0;
      for (int64_t ni = 0; ni < n; ++ni) {
        const float* gplane = g + (ni * c + ci) * sp;
        const float* xplane = px + (ni * c + ci) * sp;
        for (int64_t s = 0; s < sp; ++s) {
          double xh = ((double)xplane[s] - mu_c) * istd_c;
          sum_dy += gplane[s];
          sum_dy_xh += (double)gplane[s] * xh;
        }
      }
      if (ng) gg[ci] += (float)sum_dy_xh;
      if (nb) gb[ci] += (float)sum_dy;
      if (!nx) continue;
      if (training) {
        for (int64_t ni = 0; ni < n; ++ni) {
          const float* gplane = g + (ni * c + ci) * sp;
          const float* xplane = px + (ni * c + ci) * sp;
          float* gxplane = gx + (ni * c + ci) * sp;
          for (int64_t s = 0; s < sp; ++s) {
            double xh = ((double)xplane[s] - mu_c) * istd_c;
            double t = (double)m * gplane[s] - sum_dy - xh * sum_dy_xh;
            gxplane[s] += (float)((double)g_c * istd_c * t / (double)m);
          }
        }
      } else {
        float f = g_c * istd_c;
        for (int64_t ni = 0; ni < n; ++ni) {
          const float* gplane = g + (ni * c + ci) * sp;
          float* gxplane = gx + (ni * c + ci) * sp;
          for (int64_t s = 0; s < sp; ++s) gxplane[s] += f * gplane[s];
        }
      }
    }
  });
}

// -------------------------------------------------------------------- dropout

Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    fail(ErrorKind::InvalidArgument, "dropout: rate must be in [0, 1), got " + format_number(rate));
  }
  if (!training || rate == 0.0) return x;
  int64_t n = x.numel();
  float keep_scale = (float)(1.0 / (1.0 - rate));
  std::vector<float> mask((size_t)n);
  for (int64_t i = 0; i < n; ++i) mask[(size_t)i] = uniform01(rng) >= rate ? keep_scale : 0.0f;
  std::vector<float> out((size_t)n);
  const float* px = x.data();
  for (int64_t i = 0; i < n; ++i) out[(size_t)i] = px[i] * mask[(size_t)i];
  auto dx = x.ptr();
  return make_op_output("dropout", x.shape(), std::move(out), {x},
                        [dx, mask = std::move(mask), n](TensorData& self) {
    if (!wants_grad(dx)) return;
    const float* g = self.grad.data();
    float* gx = grad_buf(dx);
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * mask[(size_t)i];
  });
}

// ------------------------------------------------------- non-graph utilities

std::vector<int64_t> argmax_rows(const Tensor& x) {
  if (x.ndim() != 2) fail(ErrorKind::InvalidArgument, "argmax_rows: expected 2-d input, got " + shape_str(x.shape()));
  int64_t n = x.dim(0), c = x.dim(1);
  std::vector<int64_t> out((size_t)n);
  const float* px = x.data();
  for (int64_t i = 0; i < n; ++i) {
    const float* row = px + i * c;
    int64_t best = 0;
    for (int64_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    out[(size_t)i] = best;
  }
  return out;
}

}  // namespace kdf
