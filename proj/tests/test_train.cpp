#include <gtest/gtest.h>

#include "senlab/nnet/train.hpp"

using namespace senlab;
using namespace senlab::nnet;

TEST(TrainConfig, DefaultsMatchProtocol) {
  TrainConfig c;
  EXPECT_EQ(c.lr, 0.001);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.batch_size, 128u);
  EXPECT_EQ(c.loss_threshold, 1e-5);
  EXPECT_EQ(c.threshold_hits, 10u);
  EXPECT_EQ(c.max_epochs, 2000u);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.lr = -1.0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<Tensor> params{Tensor(Shape{3, 2}, 0.5), Tensor(Shape{4}, -1.25)};
  const auto before = params;
  std::vector<Tensor> zeros{Tensor(Shape{3, 2}, 0.0), Tensor(Shape{4}, 0.0)};
  Adam opt(params, TrainConfig{});
  for (int i = 0; i < 50; ++i) opt.step(params, zeros);
  EXPECT_EQ(params, before);
  EXPECT_EQ(opt.steps(), 50u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // Bias correction makes the first update exactly lr * sign(g) (up to eps).
  std::vector<Tensor> params{Tensor(Shape{3}, 0.0)};
  std::vector<Tensor> g{Tensor(Shape{3}, std::vector<double>{2.0, -0.5, 1e-3})};
  TrainConfig c;
  Adam opt(params, c);
  opt.step(params, g);
  EXPECT_NEAR(params[0][0], -c.lr, 1e-10);
  EXPECT_NEAR(params[0][1], c.lr, 1e-10);
  EXPECT_NEAR(params[0][2], -c.lr, 1e-7);
}

TEST(Train, SmallSeparableSetReachesStoppingRule) {
  const auto data = data::synth_classification(4, 2, 20, 4.0, 3);
  auto net = build(fc_architecture(4, 128, 2, 2), InitScheme::HN, 1);
  TrainConfig c;
  c.seed = 2;
  const auto h = train(net, data, c, LossKind::CrossEntropy);
  EXPECT_TRUE(h.converged);
  EXPECT_LT(h.epochs(), 2000u);
  EXPECT_LT(h.epoch_loss.back(), 1e-5);
  EXPECT_EQ(net.mode, Mode::Eval);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  const auto data = data::synth_classification(5, 3, 30, 2.0, 4);
  auto net = build(fc_architecture(5, 10, 1, 3), InitScheme::HN, 5);
  const auto before = net.params;
  TrainConfig c;
  c.lr = 0.0;
  c.max_epochs = 25;
  c.batch_size = 7;
  const auto h = train(net, data, c, LossKind::CrossEntropy);
  EXPECT_EQ(h.epochs(), 25u);
  EXPECT_EQ(net.params, before);
}

TEST(Train, SameSeedSameParameters) {
  const auto data = data::synth_classification(6, 3, 60, 2.5, 6);
  FcOptions o;
  o.dropout = 0.2;
  o.batchnorm = true;
  auto run = [&](std::uint64_t seed) {
    auto net = build(fc_architecture(6, 16, 2, 3, o), InitScheme::HN, 7);
    TrainConfig c;
    c.seed = seed;
    c.max_epochs = 30;
    c.batch_size = 16;
    auto h = train(net, data, c, LossKind::CrossEntropy);
    return std::make_pair(net, h);
  };
  const auto a = run(8), b = run(8), d = run(9);
  EXPECT_EQ(a.first.params, b.first.params);
  EXPECT_EQ(a.first.buffers, b.first.buffers);
  EXPECT_EQ(a.second.epoch_loss, b.second.epoch_loss);
  EXPECT_NE(a.first.params, d.first.params);
}

TEST(Train, MseRegression) {
  const auto data = data::synth_regression(5, 80, 0.0, 10);
  auto net = build(fc_architecture(5, 32, 2, 1), InitScheme::HN, 11);
  TrainConfig c;
  c.max_epochs = 300;
  c.batch_size = 16;
  const auto h = train(net, data, c, LossKind::MSE);
  EXPECT_LT(h.epoch_loss.back(), 0.5 * h.epoch_loss.front());
}

TEST(Train, DivergenceAborts) {
  auto data = data::synth_classification(3, 2, 10, 2.0, 12);
  auto net = build(fc_architecture(3, 4, 1, 2), InitScheme::SN, 13);
  net.weight(0)[0] = std::numeric_limits<double>::infinity();
  TrainConfig c;
  c.max_epochs = 3;
  EXPECT_THROW(train(net, data, c, LossKind::CrossEntropy), TrainingDiverged);
}

TEST(Train, RejectsMismatchedTargets) {
  auto data = data::synth_classification(3, 3, 10, 2.0, 14);
  auto net = build(fc_architecture(3, 4, 1, 2), InitScheme::HN, 15);
  EXPECT_THROW(train(net, data, TrainConfig{}, LossKind::CrossEntropy), ShapeError);
}

// Success is only ever reported after `threshold_hits` sub-threshold epochs,
// and every sub-threshold epoch is counted.
TEST(StoppingRuleProperty, NeverConvergesWithoutEnoughHits) {
  const auto data = data::synth_classification(4, 2, 24, 5.0, 16);
  for (std::size_t hits : {1u, 3u, 10u}) {
    for (double thr : {1e-2, 1e-4, 1e-5}) {
      auto net = build(fc_architecture(4, 64, 1, 2), InitScheme::SN, 17);
      TrainConfig c;
      c.threshold_hits = hits;
      c.loss_threshold = thr;
      c.max_epochs = 400;
      c.seed = 18;
      const auto h = train(net, data, c, LossKind::CrossEntropy);
      std::size_t below = 0;
      for (double l : h.epoch_loss) below += l < thr ? 1 : 0;
      EXPECT_EQ(below, h.threshold_hits);
      if (h.converged) {
        EXPECT_EQ(h.threshold_hits, hits);
        EXPECT_LT(h.epoch_loss.back(), thr);
      } else {
        EXPECT_LT(h.threshold_hits, hits);
        EXPECT_EQ(h.epochs(), c.max_epochs);
      }
    }
  }
}
