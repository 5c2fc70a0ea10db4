#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "senlab/autodiff.hpp"

using namespace senlab;
using ad::GradTape;
using ad::Var;

namespace {

Tensor randn(Shape s, std::uint64_t seed, double scale = 1.0) {
  Tensor t(std::move(s));
  CounterRng rng(seed);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

Tensor one_hot_rows(std::size_t n, std::size_t k, std::uint64_t seed) {
  Tensor y(Shape{n, k});
  CounterRng rng(seed);
  for (std::size_t r = 0; r < n; ++r) y(r, rng.below(k)) = 1.0;
  return y;
}

// Runs grad_check at `probes` random points built by `make`, reduced to a
// scalar through a fixed random weighting so every output entry matters.
struct ProbeStats {
  double worst = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;
};

ProbeStats probe(const std::function<Var(GradTape&, Var)>& f, Shape in, int probes,
                 std::uint64_t seed) {
  ProbeStats st;
  for (int p = 0; p < probes; ++p) {
    Tensor x = randn(in, derive_seed(seed, {static_cast<std::uint64_t>(p)}));
    auto r = ad::grad_check(f, x, 1e-5);
    st.worst = std::max(st.worst, r.max_rel_error);
    st.checked += r.checked;
    st.kinks += r.kink_coordinates.size();
  }
  return st;
}

// Scalarizes any output with a fixed weight tensor of matching shape.
Var weigh(Var y, std::uint64_t seed) {
  return ad::weighted_sum(y, randn(y.shape(), seed));
}

// Direct sliding-window convolution, used as the reference for im2col.
Tensor naive_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), k = w.dim(2);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  Tensor y(Shape{n, o, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double s = 0.0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t di = 0; di < k; ++di)
              for (std::size_t dj = 0; dj < k; ++dj) {
                const long r = static_cast<long>(i * stride + di) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + dj) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(h) || q >= static_cast<long>(wd)) continue;
                s += x[((b * c + ic) * h + r) * wd + q] * w[((oc * c + ic) * k + di) * k + dj];
              }
          y[((b * o + oc) * ho + i) * wo + j] = s;
        }
  return y;
}

}  // namespace

TEST(GradCheck, Square) {
  auto r = ad::grad_check([](GradTape&, Var x) { return ad::sum(ad::mul(x, x)); },
                          Tensor(Shape{1}, 3.0), 1e-5);
  EXPECT_EQ(r.checked, 1u);
  EXPECT_LT(r.max_rel_error, 1e-7);
  GradTape t;
  Var x = t.leaf(Tensor(Shape{1}, 3.0));
  t.backward(ad::sum(ad::mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(GradCheck, ConstantFunction) {
  auto f = [](GradTape& t, Var x) {
    return ad::add(ad::scale(ad::sum(x), 0.0), t.constant(Tensor::scalar(2.0)));
  };
  auto r = ad::grad_check(f, randn({5}, 1), 1e-5);
  EXPECT_EQ(r.max_rel_error, 0.0);
  GradTape t;
  Var x = t.leaf(randn({5}, 1));
  t.backward(f(t, x));
  for (double g : x.grad().data()) EXPECT_EQ(g, 0.0);
}

TEST(GradCheck, StepOutsideRangeRejected) {
  auto f = [](GradTape&, Var x) { return ad::sum(x); };
  EXPECT_THROW(ad::grad_check(f, Tensor(Shape{1}), 1e-3), Error);
  EXPECT_THROW(ad::grad_check(f, Tensor(Shape{1}), 1e-7), Error);
}

TEST(GradCheck, KinkCoordinatesExcluded) {
  // Entry 0 sits 1e-6 from the ReLU kink; a 1e-5 probe straddles it.
  Tensor x(Shape{1, 3}, std::vector<double>{1e-6, 1.0, -1.0});
  auto r = ad::grad_check(
      [](GradTape&, Var v) { return ad::sum(ad::activation(v, PositiveHomogeneous::relu())); }, x,
      1e-5);
  ASSERT_EQ(r.kink_coordinates.size(), 1u);
  EXPECT_EQ(r.kink_coordinates[0], 0u);
  EXPECT_EQ(r.checked, 2u);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, TwoLayerFcWithCrossEntropy) {
  const Tensor w1 = randn({6, 8}, 2, 0.5), w2 = randn({8, 3}, 3, 0.5);
  const Tensor b1 = randn({8}, 4, 0.1);
  const Tensor y = one_hot_rows(4, 3, 5);
  auto f = [&](GradTape& t, Var x) {
    Var h = ad::activation(ad::add_bias(ad::matmul(x, t.constant(w1)), t.constant(b1)),
                           PositiveHomogeneous::relu());
    return ad::cross_entropy_logits(ad::matmul(h, t.constant(w2)), y);
  };
  auto st = probe(f, {4, 6}, 20, 6);
  EXPECT_GT(st.checked, 0u);
  EXPECT_LT(st.worst, 1e-4);
}

// Every primitive against central differences at 100 random probes, with
// respect to each differentiable input.
TEST(GradCheckProperty, EveryPrimitive) {
  const Tensor other = randn({3, 4}, 10);
  const Tensor mat = randn({4, 5}, 11);
  const Tensor bias = randn({4}, 12);
  const Tensor y = one_hot_rows(3, 4, 13);
  const Tensor soft = softmax(randn({3, 4}, 14));
  const Tensor img_w = randn({2, 2, 3, 3}, 15, 0.5);
  const Tensor img = randn({2, 2, 5, 5}, 16);
  const Tensor gamma = randn({4}, 17), beta = randn({4}, 18);
  const Tensor run_mean = randn({4}, 19), run_var(Shape{4}, 0.7);
  const PositiveHomogeneous leaky(1.3, 0.2);

  struct Case {
    const char* name;
    Shape in;
    std::function<Var(GradTape&, Var)> f;
  };
  const std::vector<Case> cases = {
      {"add", {3, 4}, [&](GradTape& t, Var x) { return weigh(ad::add(x, t.constant(other)), 1); }},
      {"mul_lhs", {3, 4}, [&](GradTape& t, Var x) { return weigh(ad::mul(x, t.constant(other)), 2); }},
      {"mul_self", {3, 4}, [&](GradTape&, Var x) { return weigh(ad::mul(x, x), 3); }},
      {"mul_const", {3, 4}, [&](GradTape&, Var x) { return weigh(ad::mul_const(x, other), 4); }},
      {"scale", {3, 4}, [&](GradTape&, Var x) { return weigh(ad::scale(x, -2.5), 5); }},
      {"mean", {3, 4}, [&](GradTape&, Var x) { return ad::mean(ad::mul(x, x)); }},
      {"reshape", {3, 4}, [&](GradTape&, Var x) { return weigh(ad::reshape(x, {2, 6}), 6); }},
      {"flatten", {2, 2, 5, 5}, [&](GradTape&, Var x) { return weigh(ad::flatten(x), 7); }},
      {"matmul_lhs", {3, 4}, [&](GradTape& t, Var x) { return weigh(ad::matmul(x, t.constant(mat)), 8); }},
      {"matmul_rhs", {4, 5}, [&](GradTape& t, Var x) { return weigh(ad::matmul(t.constant(other), x), 9); }},
      {"add_bias_x", {3, 4}, [&](GradTape& t, Var x) { return weigh(ad::add_bias(x, t.constant(bias)), 10); }},
      {"add_bias_b", {4}, [&](GradTape& t, Var b) { return weigh(ad::add_bias(t.constant(other), b), 11); }},
      {"add_bias_image", {2}, [&](GradTape& t, Var b) { return weigh(ad::add_bias(t.constant(img), b), 12); }},
      {"activation", {3, 4}, [&](GradTape&, Var x) { return weigh(ad::activation(x, leaky), 13); }},
      {"softmax", {3, 4}, [&](GradTape&, Var x) { return weigh(ad::softmax(x), 14); }},
      {"cross_entropy", {3, 4}, [&](GradTape&, Var x) { return ad::cross_entropy_logits(x, y); }},
      {"cross_entropy_soft", {3, 4}, [&](GradTape&, Var x) { return ad::cross_entropy_logits(x, soft); }},
      {"mse", {3, 4}, [&](GradTape&, Var x) { return ad::mse(x, other); }},
      {"conv_x", {2, 2, 5, 5}, [&](GradTape& t, Var x) { return weigh(ad::conv2d(x, t.constant(img_w), 1, 1), 15); }},
      {"conv_x_stride", {2, 2, 5, 5}, [&](GradTape& t, Var x) { return weigh(ad::conv2d(x, t.constant(img_w), 2, 0), 16); }},
      {"conv_w", {2, 2, 3, 3}, [&](GradTape& t, Var w) { return weigh(ad::conv2d(t.constant(img), w, 1, 1), 17); }},
      {"maxpool", {2, 2, 5, 5}, [&](GradTape&, Var x) { return weigh(ad::maxpool2d(x, 2), 18); }},
      {"batchnorm_x", {3, 4}, [&](GradTape& t, Var x) {
         return weigh(ad::batchnorm_train(x, t.constant(gamma), t.constant(beta), 1e-5), 19); }},
      {"batchnorm_x_image", {3, 2, 3, 3}, [&](GradTape& t, Var x) {
         Tensor g2(Shape{2}, std::vector<double>{0.7, -1.2}), b2(Shape{2}, 0.3);
         return weigh(ad::batchnorm_train(x, t.constant(g2), t.constant(b2), 1e-5), 20); }},
      {"batchnorm_gamma", {4}, [&](GradTape& t, Var g) {
         return weigh(ad::batchnorm_train(t.constant(other), g, t.constant(beta), 1e-5), 21); }},
      {"batchnorm_beta", {4}, [&](GradTape& t, Var b) {
         return weigh(ad::batchnorm_train(t.constant(other), t.constant(gamma), b, 1e-5), 22); }},
      {"batchnorm_eval", {3, 4}, [&](GradTape& t, Var x) {
         return weigh(ad::batchnorm_eval(x, t.constant(gamma), t.constant(beta), run_mean, run_var, 1e-5), 23); }},
  };
  for (std::size_t i = 0; i < cases.size(); ++i) {
    auto st = probe(cases[i].f, cases[i].in, 100, 1000 + i);
    EXPECT_GT(st.checked, 0u) << cases[i].name;
    EXPECT_LE(st.worst, 1e-4) << cases[i].name;
  }
}

TEST(Tape, UnusedLeafHasZeroAdjoint) {
  GradTape t;
  Var a = t.leaf(randn({3}, 1));
  Var unused = t.leaf(randn({2, 2}, 2));
  Var y = ad::sum(ad::mul(a, a));
  t.backward(y);
  for (double g : unused.grad().data()) EXPECT_EQ(g, 0.0);
}

TEST(Tape, RepeatedBackwardIsIndependent) {
  GradTape t;
  Var a = t.leaf(randn({4}, 3));
  Var y = ad::sum(ad::mul(a, a));
  t.backward(y);
  const Tensor first = a.grad();
  t.backward(y);
  EXPECT_EQ(a.grad(), first);
}

TEST(Tape, NonRecordingTapeRefusesBackward) {
  GradTape t(false);
  Var a = t.leaf(randn({2}, 1));
  EXPECT_THROW(t.backward(ad::sum(a)), Error);
  GradTape r;
  Var b = r.leaf(randn({2}, 1));
  EXPECT_THROW(r.backward(b), ShapeError);
}

TEST(Tape, FanOutAccumulates) {
  // y = sum(x*c) + sum(x*c): gradient is 2c.
  GradTape t;
  Var x = t.leaf(randn({5}, 4));
  const Tensor c = randn({5}, 5);
  Var u = ad::weighted_sum(x, c);
  t.backward(ad::add(u, u));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * c[i]);
}

TEST(Conv, AgreesWithSlidingWindow) {
  CounterRng rng(21);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 1 + rng.below(3), c = 1 + rng.below(3), o = 1 + rng.below(4);
    const std::size_t k = 1 + rng.below(3), stride = 1 + rng.below(2), pad = rng.below(2);
    const std::size_t h = k + rng.below(5), w = k + rng.below(5);
    Tensor x = randn({n, c, h, w}, 500 + trial), wt = randn({o, c, k, k}, 600 + trial);
    GradTape t(false);
    Tensor got = ad::conv2d(t.constant(x), t.constant(wt), stride, pad).value();
    Tensor ref = naive_conv(x, wt, stride, pad);
    ASSERT_EQ(got.shape(), ref.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-12);
  }
}

TEST(Conv, ShapeErrors) {
  GradTape t;
  EXPECT_THROW(ad::conv2d(t.constant(Tensor(Shape{1, 2, 4, 4})), t.constant(Tensor(Shape{1, 3, 3, 3})), 1, 0),
               ShapeError);
  EXPECT_THROW(ad::conv2d(t.constant(Tensor(Shape{1, 1, 2, 2})), t.constant(Tensor(Shape{1, 1, 3, 3})), 1, 0),
               ShapeError);
  EXPECT_THROW(ad::maxpool2d(t.constant(Tensor(Shape{1, 1, 1, 1})), 2), ShapeError);
}

TEST(MaxPool, PicksWindowMaxima) {
  Tensor x(Shape{1, 1, 4, 4}, std::vector<double>{1, 5, 2, 0, 3, 4, 8, 1, 0, 0, 1, 1, 9, 0, 1, 7});
  GradTape t;
  Var v = t.leaf(x);
  Var y = ad::maxpool2d(v, 2);
  EXPECT_EQ(y.value().vec(), (std::vector<double>{5, 8, 9, 7}));
  t.backward(ad::sum(y));
  EXPECT_EQ(v.grad()[1], 1.0);
  EXPECT_EQ(v.grad()[0], 0.0);
}

TEST(BatchNorm, OutputIsStandardized) {
  GradTape t;
  Tensor x = randn({64, 5}, 31, 3.0);
  for (std::size_t r = 0; r < 64; ++r) x(r, 2) += 10.0;
  ad::BatchStats st;
  Var y = ad::batchnorm_train(t.constant(x), t.constant(Tensor(Shape{5}, 1.0)),
                              t.constant(Tensor(Shape{5}, 0.0)), 0.0, &st);
  EXPECT_EQ(st.count, 64u);
  for (std::size_t c = 0; c < 5; ++c) {
    double m = 0.0, q = 0.0;
    for (std::size_t r = 0; r < 64; ++r) m += y.value()(r, c);
    m /= 64.0;
    for (std::size_t r = 0; r < 64; ++r) q += (y.value()(r, c) - m) * (y.value()(r, c) - m);
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(q / 64.0, 1.0, 1e-6);
  }
}

TEST(Determinism, ForwardBackwardBitIdentical) {
  auto run = [] {
    GradTape t;
    Var x = t.leaf(randn({3, 2, 6, 6}, 41));
    Var w = t.leaf(randn({4, 2, 3, 3}, 42));
    Var h = ad::activation(ad::conv2d(x, w, 1, 1), PositiveHomogeneous::relu());
    Var z = ad::flatten(ad::maxpool2d(h, 2));
    Var loss = ad::mean(ad::mul(z, z));
    t.backward(loss);
    return std::make_pair(loss.value(), w.grad());
  };
  auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_TRUE(a.second.all_finite());
}
