#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "senlab/data/dataset.hpp"
#include "senlab/nnet/network.hpp"

namespace senlab::nnet {

enum class LossKind { CrossEntropy, MSE };

/// Optimizer and stopping-rule settings. Defaults: Adam(lr 1e-3, betas
/// 0.9/0.999), batches of 128, stop after the epoch-average training loss
/// has been below 1e-5 on 10 epochs, hard cap 2000 epochs.
struct TrainConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 128;
  double loss_threshold = 1e-5;
  std::size_t threshold_hits = 10;
  std::size_t max_epochs = 2000;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr >= 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) ||
        batch_size == 0 || !(loss_threshold > 0.0) || threshold_hits == 0 || max_epochs == 0) {
      throw Error("invalid training configuration");
    }
  }
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::size_t epoch, std::size_t batch)
      : Error(what), epoch(epoch), batch(batch) {}
  std::size_t epoch;
  std::size_t batch;
};

struct TrainHistory {
  std::vector<double> epoch_loss;  // mean of the mini-batch losses, weighted by batch size
  std::size_t threshold_hits = 0;
  bool converged = false;
  std::size_t epochs() const { return epoch_loss.size(); }
};

/// Adam with bias correction. Zero gradients leave parameters unchanged.
class Adam {
 public:
  Adam(const std::vector<Tensor>& params, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.shape(), 0.0);
      v_.emplace_back(p.shape(), 0.0);
    }
  }

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i].data();
      auto g = grads[i].data();
      auto m = m_[i].data();
      auto v = v_[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        p[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

/// Loss of one batch recorded on `tape`.
inline ad::Var batch_loss(ad::Var out, const Tensor& targets, LossKind loss) {
  return loss == LossKind::CrossEntropy ? ad::cross_entropy_logits(out, targets)
                                        : ad::mse(out, targets);
}

/// Trains in place with mini-batch Adam. Each epoch reshuffles the sample
/// order from a stream derived from (cfg.seed, epoch). Throws
/// TrainingDiverged when a loss turns NaN/Inf.
inline TrainHistory train(Network& net, const data::Dataset& data, const TrainConfig& cfg,
                          LossKind loss) {
  cfg.validate();
  data::validate(data);
  if (data.size() == 0) throw Error("cannot train on an empty dataset");
  if (data.output_dim() != net.spec.output_dim) {
    throw ShapeError("dataset has " + std::to_string(data.output_dim()) + " targets, network has " +
                     std::to_string(net.spec.output_dim) + " outputs");
  }
  const std::size_t n = data.size();
  Adam opt(net.params, cfg);
  TrainHistory hist;
  std::vector<std::size_t> order(n);
  net.mode = Mode::Train;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng shuffle_rng(derive_seed(cfg.seed, {0xE90C, epoch}));
    shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_total = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor xb = data.inputs.gather_rows(idx);
      const Tensor yb = data.targets.gather_rows(idx);

      ad::GradTape tape;
      tape.set_branch_tracking(false);
      std::vector<ad::Var> pv;
      pv.reserve(net.params.size());
      for (const auto& p : net.params) pv.push_back(tape.leaf(p));
      std::vector<ad::BatchStats> bn_stats;
      ForwardOptions fo;
      fo.mode = Mode::Train;
      fo.dropout_seed = derive_seed(cfg.seed, {0xD409, epoch, batch_index});
      fo.bn_stats = &bn_stats;
      ad::Var out = forward(tape, net, pv, tape.constant(xb), fo);
      ad::Var l = batch_loss(out, yb, loss);
      const double lv = l.value().item();
      if (!std::isfinite(lv)) {
        net.mode = Mode::Eval;
        throw TrainingDiverged("training loss became non-finite at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(batch_index),
                               epoch, batch_index);
      }
      tape.backward(l);
      std::vector<Tensor> grads;
      grads.reserve(pv.size());
      for (const auto& v : pv) grads.push_back(v.grad());
      opt.step(net.params, grads);
      update_running_stats(net, bn_stats);
      epoch_total += lv * static_cast<double>(idx.size());
    }
    const double epoch_loss = epoch_total / static_cast<double>(n);
    hist.epoch_loss.push_back(epoch_loss);
    if (epoch_loss < cfg.loss_threshold) ++hist.threshold_hits;
    if (hist.threshold_hits >= cfg.threshold_hits) {
      hist.converged = true;
      break;
    }
  }
  net.mode = Mode::Eval;
  return hist;
}

}  // namespace senlab::nnet
