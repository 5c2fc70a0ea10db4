#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "senlab/metrics/perturb.hpp"

using namespace senlab;
using namespace senlab::metrics;

namespace {

Tensor randn(Shape s, std::uint64_t seed, double scale = 1.0) {
  Tensor t(std::move(s));
  CounterRng rng(seed);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

nnet::FcOptions no_bias() {
  nnet::FcOptions o;
  o.bias = false;
  return o;
}

// f(x) = x W with a given W, no bias.
nnet::Network linear_net(const Tensor& w) {
  auto net = nnet::build(nnet::fc_architecture(w.dim(0), std::vector<std::size_t>{}, w.dim(1), no_bias()),
                         nnet::InitScheme::SN, 0);
  net.weight(0) = w;
  return net;
}

// One input, one output, returns the constant c.
nnet::Network constant_net(double c) {
  auto net = nnet::build(nnet::fc_architecture(1, std::vector<std::size_t>{}, 1), nnet::InitScheme::SN, 0);
  net.weight(0)[0] = 0.0;
  net.bias(0)[0] = c;
  return net;
}

double linear_oracle(const Tensor& w, double sigma) {
  double s = 0.0;
  for (std::size_t d = 0; d < w.dim(0); ++d) {
    double a = 0.0;
    for (std::size_t k = 0; k < w.dim(1); ++k) a += w(d, k);
    a /= static_cast<double>(w.dim(1));
    s += a * a;
  }
  return sigma * sigma * s;
}

}  // namespace

TEST(Sensitivity, IdentityNetGivesNoiseVariance) {
  const auto net = linear_net(Tensor(Shape{1, 1}, 1.0));
  PerturbConfig c;
  c.n_inputs = 100;
  c.n_noise = 400;
  const auto s = estimate_sensitivity(net, randn({100, 1}, 1), c);
  EXPECT_EQ(s.n_total, 40000u);
  EXPECT_GT(s.std_err, 0.0);
  EXPECT_NEAR(s.value, 0.01, 3.0 * s.std_err);
}

TEST(Sensitivity, LinearNetMatchesClosedForm) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor w = randn({6, 3}, 10 + seed);
    PerturbConfig c;
    c.n_inputs = 200;
    c.n_noise = 200;
    c.seed = seed;
    const auto s = estimate_sensitivity(linear_net(w), randn({200, 6}, 20 + seed), c);
    const double truth = linear_oracle(w, 0.1);
    EXPECT_NEAR(s.value, truth, 3.0 * s.std_err) << "seed " << seed;
    // The bootstrap error is in the right ballpark: Var of a variance
    // estimate of a Gaussian is 2 sigma^4 / N.
    EXPECT_NEAR(s.std_err / (truth * std::sqrt(2.0 / 40000.0)), 1.0, 0.5);
  }
}

TEST(Sensitivity, TooFewSamplesRejected) {
  const auto net = linear_net(Tensor(Shape{1, 1}, 1.0));
  PerturbConfig c;
  c.n_inputs = 1;
  c.n_noise = 1;
  EXPECT_THROW(estimate_sensitivity(net, randn({5, 1}, 1), c), Error);
  c.n_noise = 0;
  EXPECT_THROW(estimate_sensitivity(net, randn({5, 1}, 1), c), Error);
  c.n_noise = 4;
  c.noise_std = 0.0;
  EXPECT_THROW(estimate_sensitivity(net, randn({5, 1}, 1), c), Error);
}

TEST(Sensitivity, IndependentOfJobCount) {
  const auto net = nnet::build(nnet::fc_architecture(8, 20, 2, 4), nnet::InitScheme::SN, 3);
  const Tensor x = randn({300, 8}, 4);
  PerturbConfig c;
  c.n_inputs = 300;
  c.n_noise = 9;
  const auto a = estimate_sensitivity(net, x, c);
  c.jobs = 4;
  const auto b = estimate_sensitivity(net, x, c);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.std_err, b.std_err);
}

TEST(SensitivityProperty, NonNegative) {
  CounterRng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto net = nnet::build(nnet::fc_architecture(4, 1 + rng.below(10), 1 + rng.below(3), 2 + rng.below(4)),
                                 nnet::InitScheme::HN, trial);
    PerturbConfig c;
    c.n_inputs = 8;
    c.n_noise = 4;
    c.seed = trial;
    c.tap = trial % 2 ? Tap::PostSoftmax : Tap::PreSoftmax;
    const auto s = estimate_sensitivity(net, randn({8, 4}, trial), c);
    EXPECT_GE(s.value, 0.0);
    EXPECT_GE(s.std_err, 0.0);
    EXPECT_GE(jacobian_frobenius(net, randn({8, 4}, trial), c.tap).value, 0.0);
  }
}

TEST(SensitivityProperty, TrainAndTestSplitsAgreeUntrained) {
  const auto data = data::synth_classification(10, 4, 2000, 2.0, 6);
  const auto [tr, te] = data::split(data, data::SplitSpec{});
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto net = nnet::build(nnet::fc_architecture(10, 30, 2, 4), nnet::InitScheme::HN, 100 + seed);
    PerturbConfig c;
    c.n_inputs = 400;
    c.n_noise = 8;
    c.seed = seed;
    const auto a = estimate_sensitivity(net, tr.inputs, c);
    c.seed = seed + 1000;
    const auto b = estimate_sensitivity(net, te.inputs, c);
    EXPECT_LE(std::abs(a.value - b.value), 3.0 * std::hypot(a.std_err, b.std_err));
  }
}

TEST(SensitivityProperty, LabelPermutationInvariant) {
  auto data = data::synth_classification(6, 3, 90, 2.0, 7);
  auto permuted = data;
  std::vector<std::size_t> order(90);
  std::iota(order.begin(), order.end(), 0);
  CounterRng rng(8);
  shuffle(order.begin(), order.end(), rng);
  permuted.targets = data.targets.gather_rows(order);
  const auto net = nnet::build(nnet::fc_architecture(6, 12, 2, 3), nnet::InitScheme::SN, 9);
  PerturbConfig c;
  c.n_inputs = 90;
  c.n_noise = 4;
  for (Tap t : {Tap::PreSoftmax, Tap::PostSoftmax}) {
    c.tap = t;
    const auto a = estimate_sensitivity(net, data.inputs, c);
    const auto b = estimate_sensitivity(net, permuted.inputs, c);
    EXPECT_EQ(a.value, b.value);
    EXPECT_EQ(a.std_err, b.std_err);
  }
}

TEST(SensitivityProperty, OutputScalingSquareLaw) {
  CounterRng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto net = nnet::build(nnet::fc_architecture(5, 8 + rng.below(20), 1 + rng.below(3), 2 + rng.below(8)),
                                 nnet::InitScheme::SN, 200 + trial);
    const double f = std::exp(rng.uniform(-3.0, 3.0));
    PerturbConfig c;
    c.n_inputs = 20;
    c.n_noise = 6;
    c.seed = trial;
    const auto [a, b] = sensitivity_under_output_scaling(net, f, randn({20, 5}, trial), c);
    EXPECT_NEAR(b.value / a.value, f * f, 1e-10 * f * f);
  }
}

TEST(OutputScaling, Examples) {
  const auto net = nnet::build(nnet::fc_architecture(7, 15, 2, 5), nnet::InitScheme::SN, 10);
  const Tensor x = randn({30, 7}, 11);
  PerturbConfig c;
  c.n_inputs = 30;
  c.n_noise = 10;
  const auto [a1, b1] = sensitivity_under_output_scaling(net, 1.0, x, c);
  EXPECT_EQ(a1.value, b1.value);
  const auto [a2, b2] = sensitivity_under_output_scaling(net, 0.5, x, c);
  EXPECT_NEAR(b2.value, a2.value / 4.0, 1e-12 * a2.value);
  const auto [a3, b3] = sensitivity_under_output_scaling(net, 3.0, x, c);
  EXPECT_NEAR(b3.value / a3.value, 9.0, 9e-10);
  EXPECT_THROW(sensitivity_under_output_scaling(net, 0.0, x, c), Error);
  EXPECT_THROW(sensitivity_under_output_scaling(net, -2.0, x, c), Error);
}

TEST(SensitivityProperty, DoublingNoiseQuadruplesLinearS) {
  const Tensor w = randn({5, 3}, 12);
  const auto net = linear_net(w);
  PerturbConfig c;
  c.n_inputs = 40;
  c.n_noise = 10;
  // At x = 0 the output noise is exactly W eps, so the factor is exact.
  const Tensor zero(Shape{40, 5}, 0.0);
  const double s1 = estimate_sensitivity(net, zero, c).value;
  c.noise_std = 0.2;
  const double s2 = estimate_sensitivity(net, zero, c).value;
  EXPECT_EQ(s2, 4.0 * s1);
  const Tensor x = randn({40, 5}, 13);
  c.noise_std = 0.1;
  const double r1 = estimate_sensitivity(net, x, c).value;
  c.noise_std = 0.2;
  const double r2 = estimate_sensitivity(net, x, c).value;
  EXPECT_NEAR(r2 / r1, 4.0, 1e-10);
}

TEST(PostSoftmax, MeanEntryReductionIsIdenticallyZero) {
  // Softmax outputs sum to one, so the mean output-noise entry is 1/K - 1/K.
  const auto net = nnet::build(nnet::fc_architecture(6, 20, 2, 5), nnet::InitScheme::SN, 14);
  PerturbConfig c;
  c.tap = Tap::PostSoftmax;
  c.n_inputs = 50;
  c.n_noise = 8;
  const Tensor x = randn({50, 6}, 15);
  const auto literal = estimate_sensitivity(net, x, c, Reduction::MeanEntry);
  EXPECT_LT(literal.value, 1e-30);
  const auto per_entry = estimate_sensitivity(net, x, c);
  EXPECT_GT(per_entry.value, 1e-8);
  EXPECT_EQ(resolve(Reduction::Auto, Tap::PostSoftmax), Reduction::PerEntry);
  EXPECT_EQ(resolve(Reduction::Auto, Tap::PreSoftmax), Reduction::MeanEntry);
}

TEST(OutputVariance, Examples) {
  const auto net = nnet::build(nnet::fc_architecture(3, 5, 1, 2), nnet::InitScheme::SN, 16);
  const Tensor x = randn({10, 3}, 17);
  EXPECT_EQ(estimate_output_variance({net, net, net}, x, Tap::PreSoftmax), 0.0);
  EXPECT_EQ(estimate_output_variance({net, net}, x, Tap::PostSoftmax), 0.0);
  EXPECT_DOUBLE_EQ(estimate_output_variance({constant_net(0.0), constant_net(2.0)}, randn({7, 1}, 18), Tap::PreSoftmax),
                   1.0);
  EXPECT_THROW(estimate_output_variance({net}, x, Tap::PreSoftmax), Error);
}

TEST(OutputVariance, PostSoftmaxSumsOverClasses) {
  // Two members outputting softmax (a, 1-a) and (b, 1-b): per-class
  // population variance (a-b)^2/4 on each of the two classes.
  auto m1 = nnet::build(nnet::fc_architecture(1, std::vector<std::size_t>{}, 2), nnet::InitScheme::SN, 0);
  auto m2 = m1;
  m1.weight(0).fill(0.0);
  m2.weight(0).fill(0.0);
  m1.bias(0) = Tensor(Shape{2}, std::vector<double>{std::log(3.0), 0.0});  // (3/4, 1/4)
  m2.bias(0) = Tensor(Shape{2}, std::vector<double>{0.0, 0.0});           // (1/2, 1/2)
  const double v = estimate_output_variance({m1, m2}, Tensor(Shape{4, 1}, 0.3), Tap::PostSoftmax);
  EXPECT_NEAR(v, 2.0 * 0.0625 / 4.0, 1e-15);
}

TEST(Jacobian, LinearNetGivesWeightNorm) {
  const Tensor w = randn({9, 4}, 19);
  const auto j = jacobian_frobenius(linear_net(w), randn({70, 9}, 20), Tap::PreSoftmax);
  EXPECT_NEAR(j.value, frobenius_norm(w), 1e-12);
  EXPECT_EQ(j.n_inputs, 70u);
  const Tensor per = input_jacobians(linear_net(w), randn({3, 9}, 21), Tap::PreSoftmax);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t d = 0; d < 9; ++d) EXPECT_EQ(per[(i * 4 + k) * 9 + d], w(d, k));
}

TEST(Jacobian, SoftmaxSaturatesAtLargeLogitScale) {
  const auto net = nnet::scale_output_layer(nnet::build(nnet::fc_architecture(8, 30, 2, 5), nnet::InitScheme::HN, 22), 100.0);
  const Tensor x = randn({50, 8}, 23);
  EXPECT_LT(jacobian_frobenius(net, x, Tap::PostSoftmax).value, jacobian_frobenius(net, x, Tap::PreSoftmax).value);
}

TEST(Jacobian, AgreesWithCentralDifferences) {
  const auto net = nnet::build(nnet::fc_architecture(5, 12, 2, 3), nnet::InitScheme::HN, 24);
  const double h = 1e-6;
  std::size_t compared = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = randn({1, 5}, 300 + trial);
    for (Tap tap : {Tap::PreSoftmax, Tap::PostSoftmax}) {
      const Tensor jac = input_jacobians(net, x, tap);
      for (std::size_t d = 0; d < 5; ++d) {
        Tensor xp = x, xm = x;
        xp[d] += h;
        xm[d] -= h;
        auto out = [&](const Tensor& v) {
          Tensor o = nnet::forward(net, v);
          return tap == Tap::PostSoftmax ? softmax(o) : o;
        };
        // Kink-free check: the ReLU pattern must be the same at x +- h.
        auto pattern = [&](const Tensor& v) {
          ad::GradTape t(false);
          std::vector<ad::Var> ps;
          for (const auto& p : net.params) ps.push_back(t.constant(p));
          nnet::forward(t, net, ps, t.constant(v));
          return t.branch_signature();
        };
        const auto centre = pattern(x);
        if (pattern(xp) != centre || pattern(xm) != centre) continue;
        const Tensor op = out(xp), om = out(xm);
        for (std::size_t k = 0; k < 3; ++k) {
          const double num = (op[k] - om[k]) / (2.0 * h);
          const double ana = jac[k * 5 + d];
          EXPECT_LE(std::abs(num - ana) / (std::abs(num) + std::abs(ana) + 1e-8), 1e-4);
          ++compared;
        }
      }
    }
  }
  EXPECT_GT(compared, 400u);
}

TEST(Timing, SensitivityFasterThanJacobian) {
  const auto net = nnet::build(nnet::fc_architecture(64, 200, 2, 10), nnet::InitScheme::HN, 25);
  const Tensor x = randn({500, 64}, 26);
  PerturbConfig c;
  c.n_inputs = 500;
  c.n_noise = 1;
  c.bootstrap = 0;
  const auto s = estimate_sensitivity(net, x, c);
  const auto j = jacobian_frobenius(net, x, Tap::PostSoftmax);
  EXPECT_LT(s.seconds, j.seconds);
}

TEST(Losses, UniformPredictor) {
  const Tensor z(Shape{4, 10}, 0.0);
  Tensor y(Shape{4, 10});
  for (std::size_t i = 0; i < 4; ++i) y(i, i) = 1.0;
  const auto ce = cross_entropy_from_logits(z, y);
  EXPECT_NEAR(ce.value, std::log(10.0), 1e-15);
  EXPECT_NEAR(ce.value, 2.302585, 1e-6);
  EXPECT_EQ(ce.clamped, 0u);
}

TEST(Losses, PerfectPredictor) {
  Tensor y(Shape{3, 4}), z(Shape{3, 4}, -1000.0);
  for (std::size_t i = 0; i < 3; ++i) {
    y(i, i + 1) = 1.0;
    z(i, i + 1) = 1000.0;
  }
  EXPECT_EQ(cross_entropy_from_logits(z, y).value, 0.0);
  EXPECT_EQ(mse_from_outputs(softmax(z), y), 0.0);
  EXPECT_EQ(classification_error_from_logits(z, y), 0.0);
}

TEST(Losses, HalfHalfPredictor) {
  const Tensor f(Shape{1, 2}, 0.5);
  const Tensor y(Shape{1, 2}, std::vector<double>{1.0, 0.0});
  EXPECT_DOUBLE_EQ(mse_from_outputs(f, y), 0.5);
  EXPECT_NEAR(cross_entropy_from_logits(Tensor(Shape{1, 2}, 0.0), y).value, std::numbers::ln2, 1e-15);
}

TEST(Losses, ZeroProbabilityIsClampedAndFlagged) {
  const Tensor z(Shape{2, 2}, std::vector<double>{0.0, 200.0, 3.0, 0.0});
  const Tensor y(Shape{2, 2}, std::vector<double>{1.0, 0.0, 1.0, 0.0});
  const auto ce = cross_entropy_from_logits(z, y);
  EXPECT_EQ(ce.clamped, 1u);
  EXPECT_TRUE(std::isfinite(ce.value));
  const double second = -(3.0 - std::log(std::exp(3.0) + 1.0));
  EXPECT_NEAR(ce.value, 0.5 * (-std::log(1e-12) + second), 1e-12);
  EXPECT_DOUBLE_EQ(classification_error_from_logits(z, y), 0.5);
}

TEST(Losses, NetworkLevelBounds) {
  const auto data = data::synth_classification(6, 4, 80, 1.0, 27);
  const auto net = nnet::build(nnet::fc_architecture(6, 10, 1, 4), nnet::InitScheme::HN, 28);
  EXPECT_GE(cross_entropy_loss(net, data).value, 0.0);
  const double mse = mse_loss(net, data);
  EXPECT_GE(mse, 0.0);
  EXPECT_LE(mse, 2.0);
  const double err = classification_error(net, data);
  EXPECT_GE(err, 0.0);
  EXPECT_LE(err, 1.0);
  const auto reg = data::synth_regression(3, 20, 0.1, 29);
  auto lin = linear_net(Tensor(Shape{3, 1}, 0.0));
  double want = 0.0;
  for (std::size_t i = 0; i < 20; ++i) want += reg.targets[i] * reg.targets[i];
  EXPECT_NEAR(mse_loss(lin, reg), want / 20.0, 1e-12);
}
