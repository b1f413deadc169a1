// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdint>
#include <vector>

#include "core/common.hpp"
#include "core/tensor.hpp"
#include "doctest.h"
#include "ref_ops.hpp"

using namespace kdf;
using refops::dvec;

namespace {

constexpr double kFdTol = 1e-4;

dvec to_double(const Tensor& t) {
  dvec out(t.values().begin(), t.values().end());
  return out;
}

std::vector<float> to_float(const dvec& v) {
  std::vector<float> out(v.begin(), v.end());
  return out;
}

refops::FdLeaf leaf_of(const Tensor& t) {
  refops::FdLeaf l;
  l.values = to_double(t);
  l.autodiff_grad.assign(t.grad().begin(), t.grad().end());
  return l;
}

// Weighted sum with fixed coefficients, turning any output into a scalar that
// exercises every component's gradient.
Tensor mixed_loss(const Tensor& y, const dvec& mix) {
  return sum(mul(y, Tensor::from_values(y.shape(), to_float(mix))));
}

// randn sample pushed away from zero so relu/max kinks sit outside the
// finite-difference step.
Tensor randn_margin(Shape shape, std::mt19937_64& rng, float margin = 0.05f) {
  Tensor t = Tensor::randn(shape, rng, 1.0f, true);
  for (int64_t i = 0; i < t.numel(); ++i) {
    float& v = t.data()[i];
    if (std::abs(v) < margin) v += v >= 0 ? margin : -margin;
  }
  return t;
}

}  // namespace

TEST_CASE("tensor factories and accessors") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.shape() == Shape{2, 3});
  CHECK(z.numel() == 6);
  CHECK(z.values() == std::vector<float>(6, 0.0f));
  CHECK_FALSE(z.requires_grad());

  Tensor f = Tensor::full({2}, 1.5f, true);
  CHECK(f.requires_grad());
  CHECK(f.values() == std::vector<float>{1.5f, 1.5f});

  Tensor s = Tensor::scalar(4.0f);
  CHECK(s.item() == 4.0f);
  CHECK(shape_numel({3, 4, 5}) == 60);
  CHECK(shape_str({3, 4}) == "[3,4]");

  Tensor v = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor d = v.detach();
  CHECK(d.values() == v.values());
  CHECK_FALSE(d.requires_grad());
  CHECK(d.id() != v.id());
}

TEST_CASE("elementwise binary ops match the reference and finite differences") {
  for (uint64_t seed : {1, 2, 3}) {
    auto rng = seeded_rng(seed, "fd_binary", 0);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0f, true);
    Tensor b = Tensor::randn({3, 4}, rng, 1.0f, true);
    // Keep denominators clear of the clamp.
    for (int64_t i = 0; i < b.numel(); ++i) {
      float& v = b.data()[i];
      if (std::abs(v) < 0.5f) v += v >= 0 ? 0.5f : -0.5f;
    }
    const char* names[] = {"add", "sub", "mul", "div"};
    for (int op = 0; op < 4; ++op) {
      CAPTURE(seed);
      CAPTURE(names[op]);
      a.zero_grad();
      b.zero_grad();
      Tensor y = op == 0 ? add(a, b) : op == 1 ? sub(a, b) : op == 2 ? mul(a, b) : div(a, b);
      dvec mix = refops::mix_weights((size_t)y.numel(), seed * 97 + (uint64_t)op);
      backward(mixed_loss(y, mix));
      std::vector<refops::FdLeaf> leaves{leaf_of(a), leaf_of(b)};
      auto oracle = [&, op](const std::vector<dvec>& p) {
        dvec out(p[0].size());
        for (size_t i = 0; i < out.size(); ++i) {
          out[i] = op == 0   ? p[0][i] + p[1][i]
                   : op == 1 ? p[0][i] - p[1][i]
                   : op == 2 ? p[0][i] * p[1][i]
                             : refops::div_clamped(p[0][i], p[1][i]);
        }
        return refops::weighted_sum(out, mix);
      };
      CHECK(refops::fd_compare(leaves, oracle).rel_error() <= kFdTol);
    }
  }
}

TEST_CASE("broadcasting binary ops route gradients back to the small operand") {
  auto rng = seeded_rng(7, "fd_broadcast", 0);
  Tensor a = Tensor::randn({2, 3, 4}, rng, 1.0f, true);
  Tensor b = Tensor::randn({3, 1}, rng, 1.0f, true);  // broadcasts over dims 0 and 2
  Tensor y = mul(a, b);
  CHECK(y.shape() == Shape{2, 3, 4});
  dvec mix = refops::mix_weights((size_t)y.numel(), 11);
  backward(mixed_loss(y, mix));
  std::vector<refops::FdLeaf> leaves{leaf_of(a), leaf_of(b)};
  auto oracle = [&](const std::vector<dvec>& p) {
    dvec out(24);
    for (int64_t i = 0; i < 2; ++i)
      for (int64_t j = 0; j < 3; ++j)
        for (int64_t k = 0; k < 4; ++k)
          out[(size_t)(i * 12 + j * 4 + k)] = p[0][(size_t)(i * 12 + j * 4 + k)] * p[1][(size_t)j];
    return refops::weighted_sum(out, mix);
  };
  CHECK(refops::fd_compare(leaves, oracle).rel_error() <= kFdTol);

  Tensor s = Tensor::scalar(2.0f);
  CHECK(add(a, s).shape() == Shape{2, 3, 4});
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4, 3})), Error);
}

TEST_CASE("unary ops match finite differences away from their kinks") {
  for (uint64_t seed : {4, 5, 6}) {
    auto rng = seeded_rng(seed, "fd_unary", 0);
    for (int op = 0; op < 6; ++op) {
      CAPTURE(seed);
      CAPTURE(op);
      Tensor x = randn_margin({4, 5}, rng);
      if (op == 5) {  // log needs positive input
        for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = std::abs(x.data()[i]) + 0.1f;
      }
      Tensor y = op == 0   ? relu(x)
                 : op == 1 ? sigmoid(x)
                 : op == 2 ? kdf::exp(x)
                 : op == 3 ? scale(x, -1.7f)
                 : op == 4 ? add_scalar(x, 0.3f)
                           : kdf::log(x);
      dvec mix = refops::mix_weights((size_t)y.numel(), seed * 31 + (uint64_t)op);
      backward(mixed_loss(y, mix));
      std::vector<refops::FdLeaf> leaves{leaf_of(x)};
      auto oracle = [&, op](const std::vector<dvec>& p) {
        dvec out(p[0].size());
        for (size_t i = 0; i < out.size(); ++i) {
          double v = p[0][i];
          out[i] = op == 0   ? refops::relu(v)
                   : op == 1 ? refops::sigmoid(v)
                   : op == 2 ? refops::exp_clamped(v)
                   : op == 3 ? -1.7 * v
                   : op == 4 ? v + 0.3
                             : refops::log_clamped(v);
        }
        return refops::weighted_sum(out, mix);
      };
      CHECK(refops::fd_compare(leaves, oracle).rel_error() <= kFdTol);
    }
  }
}

TEST_CASE("numeric guards clamp instead of overflowing") {
  Tensor big = kdf::exp(Tensor::from_values({2}, {100.0f, 87.0f}));
  CHECK(big.values()[0] == big.values()[1]);  // both clamped to exp(87)
  CHECK(std::isfinite(big.values()[0]));

  Tensor lg = kdf::log(Tensor::from_values({2}, {0.0f, -1.0f}));
  CHECK(lg.values()[0] == doctest::Approx(std::log(1e-12)));
  CHECK(lg.values()[1] == doctest::Approx(std::log(1e-12)));

  Tensor q = div(Tensor::from_values({2}, {1.0f, 1.0f}), Tensor::from_values({2}, {0.0f, -0.0f}));
  CHECK(std::isfinite(q.values()[0]));
  CHECK(q.values()[0] == doctest::Approx(1e12));
}

TEST_CASE("matmul and linear match the reference") {
  for (uint64_t seed : {8, 9}) {
    auto rng = seeded_rng(seed, "fd_matmul", 0);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0f, true);
    Tensor b = Tensor::randn({4, 5}, rng, 1.0f, true);
    Tensor y = matmul(a, b);
    dvec ref = refops::matmul(to_double(a), to_double(b), 3, 4, 5);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.values()[(size_t)i] == doctest::Approx(ref[(size_t)i]).epsilon(1e-5));
    dvec mix = refops::mix_weights(15, seed);
    backward(mixed_loss(y, mix));
    std::vector<refops::FdLeaf> leaves{leaf_of(a), leaf_of(b)};
    auto oracle = [&](const std::vector<dvec>& p) {
      return refops::weighted_sum(refops::matmul(p[0], p[1], 3, 4, 5), mix);
    };
    CHECK(refops::fd_compare(leaves, oracle).rel_error() <= kFdTol);

    Tensor x = Tensor::randn({2, 6}, rng, 1.0f, true);
    Tensor w = Tensor::randn({3, 6}, rng, 0.5f, true);
    Tensor bias = Tensor::randn({3}, rng, 0.5f, true);
    Tensor z = linear(x, w, bias);
    dvec bref = to_double(bias);
    dvec zref = refops::linear(to_double(x), to_double(w), &bref, 2, 6, 3);
    for (int64_t i = 0; i < z.numel(); ++i) CHECK(z.values()[(size_t)i] == doctest::Approx(zref[(size_t)i]).epsilon(1e-5));
    dvec mix2 = refops::mix_weights(6, seed + 100);
    backward(mixed_loss(z, mix2));
    std::vector<refops::FdLeaf> leaves2{leaf_of(x), leaf_of(w), leaf_of(bias)};
    auto oracle2 = [&](const std::vector<dvec>& p) {
      return refops::weighted_sum(refops::linear(p[0], p[1], &p[2], 2, 6, 3), mix2);
    };
    CHECK(refops::fd_compare(leaves2, oracle2).rel_error() <= kFdTol);
  }
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), Error);
  CHECK_THROWS_AS(linear(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}), Tensor()), Error);
  CHECK_THROWS_AS(linear(Tensor::zeros({2, 3}), Tensor::zeros({4, 3}), Tensor::zeros({5})), Error);
}

TEST_CASE("convolution matches the reference across stride and padding") {
  struct Case {
    int64_t stride, pad;
  };
  for (Case cs : {Case{1, 0}, Case{1, 1}, Case{2, 1}}) {
    for (uint64_t seed : {10, 11}) {
      CAPTURE(cs.stride);
      CAPTURE(cs.pad);
      CAPTURE(seed);
      auto rng = seeded_rng(seed, "fd_conv", (uint64_t)(cs.stride * 10 + cs.pad));
      int64_t n = 2, c = 3, h = 6, w = 5, o = 4, k = 3;
      Tensor x = Tensor::randn({n, c, h, w}, rng, 1.0f, true);
      Tensor wt = Tensor::randn({o, c, k, k}, rng, 0.5f, true);
      Tensor b = Tensor::randn({o}, rng, 0.5f, true);
      Tensor y = conv2d_raw(x, wt, b, cs.stride, cs.pad);
      dvec bref = to_double(b);
      dvec yref = refops::conv2d(to_double(x), to_double(wt), &bref, n, c, h, w, o, k, cs.stride, cs.pad);
      REQUIRE(y.numel() == (int64_t)yref.size());
      for (int64_t i = 0; i < y.numel(); ++i) {
        CHECK(y.values()[(size_t)i] == doctest::Approx(yref[(size_t)i]).epsilon(1e-4));
      }
      dvec mix = refops::mix_weights(yref.size(), seed * 13 + (uint64_t)cs.pad);
      backward(mixed_loss(y, mix));
      std::vector<refops::FdLeaf> leaves{leaf_of(x), leaf_of(wt), leaf_of(b)};
      auto oracle = [&](const std::vector<dvec>& p) {
        return refops::weighted_sum(
            refops::conv2d(p[0], p[1], &p[2], n, c, h, w, o, k, cs.stride, cs.pad), mix);
      };
      CHECK(refops::fd_compare(leaves, oracle).rel_error() <= kFdTol);
    }
  }
  // bias-free form
  Tensor x = Tensor::zeros({1, 2, 4, 4});
  Tensor w = Tensor::zeros({3, 2, 3, 3});
  CHECK(conv2d_raw(x, w, Tensor(), 1, 1).shape() == Shape{1, 3, 4, 4});
  CHECK_THROWS_AS(conv2d_raw(Tensor::zeros({1, 3, 4, 4}), w, Tensor(), 1, 1), Error);
}

TEST_CASE("pooling matches the reference") {
  for (uint64_t seed : {12, 13}) {
    auto rng = seeded_rng(seed, "fd_pool", 0);
    Tensor x = Tensor::randn({2, 3, 6, 6}, rng, 1.0f, true);
    Tensor y = max_pool2d(x, 2, 2);
    CHECK(y.shape() == Shape{2, 3, 3, 3});
    dvec yref = refops::max_pool2d(to_double(x), 2, 3, 6, 6, 2, 2);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.values()[(size_t)i] == doctest::Approx(yref[(size_t)i]));
    dvec mix = refops::mix_weights(yref.size(), seed);
    backward(mixed_loss(y, mix));
    std::vector<refops::FdLeaf> leaves{leaf_of(x)};
    auto oracle = [&](const std::vector<dvec>& p) {
      return refops::weighted_sum(refops::max_pool2d(p[0], 2, 3, 6, 6, 2, 2), mix);
    };
    CHECK(refops::fd_compare(leaves, oracle).rel_error() <= kFdTol);

    x.zero_grad();
    Tensor g = adaptive_avg_pool2d(x, 1, 1);
    CHECK(g.shape() == Shape{2, 3, 1, 1});
    dvec gref = refops::adaptive_avg_pool2d(to_double(x), 2, 3, 6, 6, 1, 1);
    for (int64_t i = 0; i < g.numel(); ++i) CHECK(g.values()[(size_t)i] == doctest::Approx(gref[(size_t)i]).epsilon(1e-5));
    dvec mix2 = refops::mix_weights(gref.size(), seed + 5);
    backward(mixed_loss(g, mix2));
    std::vector<refops::FdLeaf> leaves2{leaf_of(x)};
    auto oracle2 = [&](const std::vector<dvec>& p) {
      return refops::weighted_sum(refops::adaptive_avg_pool2d(p[0], 2, 3, 6, 6, 1, 1), mix2);
    };
    CHECK(refops::fd_compare(leaves2, oracle2).rel_error() <= kFdTol);
  }

  // Uneven output buckets cover the whole input.
  auto rng = seeded_rng(1, "pool_uneven", 0);
  Tensor x = Tensor::randn({1, 1, 5, 7}, rng, 1.0f, false);
  Tensor y = adaptive_avg_pool2d(x, 2, 3);
  dvec yref = refops::adaptive_avg_pool2d(to_double(x), 1, 1, 5, 7, 2, 3);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.values()[(size_t)i] == doctest::Approx(yref[(size_t)i]).epsilon(1e-5));

  CHECK_THROWS_AS(max_pool2d(Tensor::zeros({1, 1, 2, 2}), 3, 1), Error);
  CHECK_THROWS_AS(max_pool2d(Tensor::zeros({2, 2}), 2, 2), Error);
}

TEST_CASE("max pool ties break to the first element in scan order") {
  Tensor x = Tensor::from_values({1, 1, 2, 2}, {5.0f, 5.0f, 5.0f, 5.0f});
  x.set_requires_grad(true);
  Tensor y = max_pool2d(x, 2, 2);
  CHECK(y.values()[0] == 5.0f);
  backward(sum(y));
  CHECK(x.grad() == std::vector<float>{1.0f, 0.0f, 0.0f, 0.0f});
}

TEST_CASE("reductions, reshape and broadcast_to match finite differences") {
  auto rng = seeded_rng(14, "fd_reduce", 0);
  Tensor x = Tensor::randn({3, 4}, rng, 1.0f, true);
  backward(mean(x));
  for (float g : x.grad()) CHECK(g == doctest::Approx(1.0 / 12.0));
  x.zero_grad();
  backward(kdf::sum(x));
  for (float g : x.grad()) CHECK(g == doctest::Approx(1.0));

  x.zero_grad();
  Tensor r = reshape(x, {2, 6});
  CHECK(r.shape() == Shape{2, 6});
  CHECK(r.values() == x.values());
  dvec mix = refops::mix_weights(12, 3);
  backward(mixed_loss(r, mix));
  std::vector<refops::FdLeaf> leaves{leaf_of(x)};
  auto oracle = [&](const std::vector<dvec>& p) { return refops::weighted_sum(p[0], mix); };
  CHECK(refops::fd_compare(leaves, oracle).rel_error() <= kFdTol);
  CHECK_THROWS_AS(reshape(x, {5, 3}), Error);

  x.zero_grad();
  Tensor col = Tensor::randn({3, 1}, rng, 1.0f, true);
  Tensor wide = broadcast_to(col, {3, 4});
  CHECK(wide.shape() == Shape{3, 4});
  dvec mix2 = refops::mix_weights(12, 4);
  backward(mixed_loss(wide, mix2));
  std::vector<refops::FdLeaf> leaves2{leaf_of(col)};
  auto oracle2 = [&](const std::vector<dvec>& p) {
    dvec out(12);
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 4; ++j) out[(size_t)(i * 4 + j)] = p[0][(size_t)i];
    return refops::weighted_sum(out, mix2);
  };
  CHECK(refops::fd_compare(leaves2, oracle2).rel_error() <= kFdTol);
}

TEST_CASE("softmax families match the reference at several temperatures") {
  for (double t : {1.0, 2.5, 4.0}) {
    for (uint64_t seed : {15, 16}) {
      CAPTURE(t);
      CAPTURE(seed);
      auto rng = seeded_rng(seed, "fd_softmax", (uint64_t)(t * 10));
      Tensor logits = Tensor::randn({3, 5}, rng, 2.0f, true);
      Tensor p = softmax_rows(logits, t);
      dvec pref = refops::softmax_rows(to_double(logits), 3, 5, t);
      double rowsum = 0.0;
      for (int64_t i = 0; i < p.numel(); ++i) {
        CHECK(p.values()[(size_t)i] == doctest::Approx(pref[(size_t)i]).epsilon(1e-5));
        rowsum += p.values()[(size_t)i];
      }
      CHECK(rowsum == doctest::Approx(3.0).epsilon(1e-5));  // each row sums to 1
      dvec mix = refops::mix_weights(15, seed * 3);
      backward(mixed_loss(p, mix));
      std::vector<refops::FdLeaf> leaves{leaf_of(logits)};
      auto oracle = [&](const std::vector<dvec>& q) {
        return refops::weighted_sum(refops::softmax_rows(q[0], 3, 5, t), mix);
      };
      CHECK(refops::fd_compare(leaves, oracle).rel_error() <= kFdTol);

      logits.zero_grad();
      Tensor lp = log_softmax_rows(logits, t);
      dvec lpref = refops::log_softmax_rows(to_double(logits), 3, 5, t);
      for (int64_t i = 0; i < lp.numel(); ++i) {
        CHECK(lp.values()[(size_t)i] == doctest::Approx(lpref[(size_t)i]).epsilon(1e-5));
      }
      dvec mix2 = refops::mix_weights(15, seed * 3 + 1);
      backward(mixed_loss(lp, mix2));
      std::vector<refops::FdLeaf> leaves2{leaf_of(logits)};
      auto oracle2 = [&](const std::vector<dvec>& q) {
        return refops::weighted_sum(refops::log_softmax_rows(q[0], 3, 5, t), mix2);
      };
      CHECK(refops::fd_compare(leaves2, oracle2).rel_error() <= kFdTol);
    }
  }
  CHECK_THROWS_AS(softmax_rows(Tensor::zeros({2, 3}), 0.0), Error);
  CHECK_THROWS_AS(softmax_rows(Tensor::zeros({2, 3, 4}), 1.0), Error);
}

TEST_CASE("batch norm training mode matches the reference and its gradients") {
  for (uint64_t seed : {17, 18}) {
    CAPTURE(seed);
    auto rng = seeded_rng(seed, "fd_bn", 0);
    int64_t n = 3, c = 2, h = 4, w = 4;
    Tensor x = Tensor::randn({n, c, h, w}, rng, 1.5f, true);
    Tensor scale_t = Tensor::randn({c}, rng, 0.5f, true);
    Tensor shift_t = Tensor::randn({c}, rng, 0.5f, true);
    Tensor rm = Tensor::zeros({c});
    Tensor rv = Tensor::full({c}, 1.0f);
    float momentum = 0.1f, eps = 1e-5f;
    Tensor y = batch_norm2d(x, scale_t, shift_t, rm, rv, true, momentum, eps);
    dvec yref = refops::batch_norm_train(to_double(x), to_double(scale_t), to_double(shift_t), n, c,
                                         h, w, eps);
    for (int64_t i = 0; i < y.numel(); ++i) {
      CHECK(y.values()[(size_t)i] == doctest::Approx(yref[(size_t)i]).epsilon(1e-4));
    }
    dvec mix = refops::mix_weights(yref.size(), seed * 7);
    backward(mixed_loss(y, mix));
    std::vector<refops::FdLeaf> leaves{leaf_of(x), leaf_of(scale_t), leaf_of(shift_t)};
    auto oracle = [&](const std::vector<dvec>& p) {
      return refops::weighted_sum(refops::batch_norm_train(p[0], p[1], p[2], n, c, h, w, eps), mix);
    };
    CHECK(refops::fd_compare(leaves, oracle).rel_error() <= kFdTol);
  }
}

TEST_CASE("batch norm updates running statistics and uses them in eval mode") {
  auto rng = seeded_rng(19, "bn_stats", 0);
  int64_t n = 4, c = 2, h = 3, w = 3;
  Tensor x = Tensor::randn({n, c, h, w}, rng, 2.0f, false);
  Tensor scale_t = Tensor::full({c}, 1.0f);
  Tensor shift_t = Tensor::zeros({c});
  Tensor rm = Tensor::zeros({c});
  Tensor rv = Tensor::full({c}, 1.0f);
  float momentum = 0.1f, eps = 1e-5f;
  batch_norm2d(x, scale_t, shift_t, rm, rv, true, momentum, eps);

  // Expected: r <- 0.9 r + 0.1 * batch stat, unbiased variance in the
  // running estimate.
  int64_t m = n * h * w;
  for (int64_t ci = 0; ci < c; ++ci) {
    double mean = 0.0;
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t s = 0; s < h * w; ++s) mean += x.values()[(size_t)((ni * c + ci) * h * w + s)];
    mean /= (double)m;
    double var = 0.0;
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t s = 0; s < h * w; ++s) {
        double d = x.values()[(size_t)((ni * c + ci) * h * w + s)] - mean;
        var += d * d;
      }
    double var_u = var / (double)(m - 1);
    CHECK(rm.values()[(size_t)ci] == doctest::Approx(0.1 * mean).epsilon(1e-4));
    CHECK(rv.values()[(size_t)ci] == doctest::Approx(0.9 + 0.1 * var_u).epsilon(1e-4));
  }

  // Eval mode normalizes with the running stats, not the batch.
  Tensor y = batch_norm2d(x, scale_t, shift_t, rm, rv, false, momentum, eps);
  dvec yref = refops::batch_norm_eval(to_double(x), to_double(scale_t), to_double(shift_t),
                                      to_double(rm), to_double(rv), n, c, h, w, eps);
  for (int64_t i = 0; i < y.numel(); ++i) {
    CHECK(y.values()[(size_t)i] == doctest::Approx(yref[(size_t)i]).epsilon(1e-4));
  }

  CHECK_THROWS_AS(batch_norm2d(Tensor::zeros({1, 2, 1, 1}), scale_t, shift_t, rm, rv, true,
                               momentum, eps),
                  Error);  // batch stats need at least 2 values per channel
  Tensor bad = Tensor::zeros({3});
  CHECK_THROWS_AS(batch_norm2d(x, bad, shift_t, rm, rv, true, momentum, eps), Error);
}

TEST_CASE("dropout scales kept activations and is the identity when off") {
  Tensor x = Tensor::full({4, 50}, 1.0f, true);
  auto drop_rng = seeded_rng(20, "dropout_mask", 0);
  Tensor y = dropout(x, 0.5, true, drop_rng);
  int64_t kept = 0;
  for (int64_t i = 0; i < y.numel(); ++i) {
    float v = y.values()[(size_t)i];
    CHECK((v == 0.0f || v == 2.0f));  // 1/(1-rate) scaling
    kept += v != 0.0f;
  }
  CHECK(kept > 50);
  CHECK(kept < 150);

  // Gradient equals the forward mask.
  backward(kdf::sum(y));
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(x.grad()[(size_t)i] == y.values()[(size_t)i]);
  }

  auto rng2 = seeded_rng(21, "dropout_mask", 0);
  Tensor z = dropout(x, 0.5, false, rng2);
  CHECK(z.values() == x.values());
  Tensor z0 = dropout(x, 0.0, true, rng2);
  CHECK(z0.values() == x.values());
  CHECK_THROWS_AS(dropout(x, 1.0, true, rng2), Error);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  Tensor x = Tensor::from_values({3, 4}, {1, 9, 9, 0,  //
                                          5, 2, 3, 5,  //
                                          -1, -1, -1, -1});
  CHECK(argmax_rows(x) == std::vector<int64_t>{1, 0, 0});
}

TEST_CASE("backward produces bit-identical gradients across rebuilds") {
  auto build = [](std::vector<float>* gx, std::vector<float>* gw) {
    auto rng = seeded_rng(22, "det", 0);
    Tensor x = Tensor::randn({2, 3, 8, 8}, rng, 1.0f, true);
    Tensor w = Tensor::randn({4, 3, 3, 3}, rng, 0.5f, true);
    Tensor y = relu(conv2d_raw(x, w, Tensor(), 1, 1));
    backward(mean(max_pool2d(y, 2, 2)));
    *gx = x.grad();
    *gw = w.grad();
  };
  std::vector<float> gx1, gw1, gx2, gw2;
  build(&gx1, &gw1);
  build(&gx2, &gw2);
  CHECK(gx1 == gx2);
  CHECK(gw1 == gw2);
}

TEST_CASE("gradients accumulate across backward passes until cleared") {
  Tensor x = Tensor::from_values({2}, {1.0f, 2.0f}, true);
  backward(kdf::sum(mul(x, x)));
  std::vector<float> once = x.grad();
  backward(kdf::sum(mul(x, x)));
  CHECK(x.grad()[0] == 2 * once[0]);
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("no-grad mode records nothing and backward rejects detached roots") {
  Tensor x = Tensor::full({2, 2}, 1.0f, true);
  CHECK(grad_enabled());
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK_THROWS_AS(backward(kdf::sum(y)), Error);
  }
  CHECK(grad_enabled());
  CHECK_THROWS_AS(backward(Tensor()), Error);
  CHECK_THROWS_AS(backward(mul(x, x)), Error);  // non-scalar root
}

TEST_CASE("trace lists ops with inputs before outputs") {
  Tensor x = Tensor::full({2, 2}, 1.0f, true);
  Tensor y = relu(add_scalar(mul(x, x), -0.5f));
  GradTape tape = trace(kdf::sum(y));
  REQUIRE(tape.nodes.size() == 4);
  CHECK(tape.nodes[0].op == "mul");
  CHECK(tape.nodes[1].op == "add_scalar");
  CHECK(tape.nodes[2].op == "relu");
  CHECK(tape.nodes[3].op == "sum");
  for (size_t i = 0; i + 1 < tape.nodes.size(); ++i) {
    CHECK(tape.nodes[i + 1].input_ids == std::vector<uint64_t>{tape.nodes[i].output_id});
  }
  CHECK(trace(Tensor()).nodes.empty());
}

TEST_CASE("graph survives dropping intermediate handles before backward") {
  Tensor x = Tensor::full({3}, 2.0f, true);
  Tensor loss;
  {
    Tensor a = mul(x, x);       // handles a and b go out of scope;
    Tensor b = add_scalar(a, 1.0f);  // the graph must keep them alive
    loss = kdf::sum(b);
  }
  backward(loss);
  REQUIRE(x.has_grad());
  for (float g : x.grad()) CHECK(g == doctest::Approx(4.0));
}

TEST_CASE("gemm accumulation order is fixed") {
  auto rng = seeded_rng(23, "gemm", 0);
  std::vector<float> a(64 * 32), b(32 * 48), c1(64 * 48, 0.0f), c2(64 * 48, 0.0f);
  for (auto& v : a) v = normal_sample(rng);
  for (auto& v : b) v = normal_sample(rng);
  gemm_nn(a.data(), b.data(), c1.data(), 64, 32, 48);
  gemm_nn(a.data(), b.data(), c2.data(), 64, 32, 48);
  CHECK(c1 == c2);
}
