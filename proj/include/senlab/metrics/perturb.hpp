#pragma once

// Monte-Carlo sensitivity, ensemble output variance, input-output Jacobian
// norms and the test losses.

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "senlab/data/dataset.hpp"
#include "senlab/kernels.hpp"
#include "senlab/nnet/network.hpp"
#include "senlab/parallel.hpp"

namespace senlab::metrics {

/// Where outputs are read: the logits f(x) or the probabilities softmax(f(x)).
enum class Tap { PreSoftmax, PostSoftmax };

inline std::string to_string(Tap t) { return t == Tap::PreSoftmax ? "pre-softmax" : "post-softmax"; }

struct PerturbConfig {
  double noise_std = 0.1;
  std::size_t n_inputs = 64;
  std::size_t n_noise = 32;
  Tap tap = Tap::PreSoftmax;
  std::uint64_t seed = 0;
  std::size_t bootstrap = 200;
  std::size_t jobs = 1;

  void validate() const {
    if (!(noise_std > 0.0) || !std::isfinite(noise_std)) throw Error("noise std must be positive");
    if (n_inputs == 0 || n_noise == 0) throw Error("perturbation counts must be at least 1");
  }
};

struct SensitivityEstimate {
  double value = 0.0;
  double std_err = 0.0;
  Tap tap = Tap::PreSoftmax;
  std::size_t n_total = 0;
  double seconds = 0.0;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// Eval-mode outputs at `tap`, whatever net.mode says.
inline Tensor eval_outputs(const nnet::Network& net, const Tensor& x, Tap tap) {
  ad::GradTape tape(false);
  tape.set_branch_tracking(false);
  std::vector<ad::Var> params;
  params.reserve(net.params.size());
  for (const auto& p : net.params) params.push_back(tape.constant(p));
  nnet::ForwardOptions opt;
  opt.mode = nnet::Mode::Eval;
  Tensor out = nnet::forward(tape, net, params, tape.constant(x), opt).value();
  return tap == Tap::PostSoftmax ? softmax(out) : out;
}

/// Population variance, two-pass.
inline double population_variance(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

inline double sample_std(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace detail

/// How the K output-noise entries are reduced before taking the variance.
/// MeanEntry: variance of their mean. PerEntry: mean over k of the variance
/// of entry k. Auto picks MeanEntry pre-softmax and PerEntry post-softmax,
/// because softmax outputs sum to one and their mean difference is
/// identically zero.
enum class Reduction { Auto, MeanEntry, PerEntry };

inline Reduction resolve(Reduction r, Tap tap) {
  if (r != Reduction::Auto) return r;
  return tap == Tap::PreSoftmax ? Reduction::MeanEntry : Reduction::PerEntry;
}

/// Output-noise values f(x_i + eps_ij) - f(x_i) at the tap, reduced per
/// `red`: row (i * n_noise + j) holds one value (MeanEntry) or K values
/// (PerEntry). Noise for input i comes from its own stream, so the values
/// do not depend on chunking or jobs.
inline Tensor output_noise(const nnet::Network& net, const Tensor& inputs, const PerturbConfig& cfg,
                           Reduction red) {
  cfg.validate();
  const std::size_t n = std::min(cfg.n_inputs, inputs.dim(0));
  const std::size_t m = cfg.n_noise;
  const std::size_t d = inputs.row_stride();
  const std::size_t k = net.spec.output_dim;
  red = resolve(red, cfg.tap);
  const std::size_t cols = red == Reduction::MeanEntry ? 1 : k;
  Tensor eps(Shape{n * m, cols});

  // Small chunks keep the activations in cache.
  const std::size_t per_chunk = std::max<std::size_t>(1, 128 / (m + 1));
  const std::size_t chunks = (n + per_chunk - 1) / per_chunk;
  parallel_for(chunks, cfg.jobs, [&](std::size_t c) {
    const std::size_t b = c * per_chunk, e = std::min(n, b + per_chunk);
    Shape shape = inputs.shape();
    shape[0] = (e - b) * (m + 1);
    Tensor batch(shape);
    auto bd = batch.data();
    auto xd = inputs.data();
    for (std::size_t i = b; i < e; ++i) {
      CounterRng rng(derive_seed(cfg.seed, {0x5E45, i}));
      const double* x = xd.data() + i * d;
      double* row = bd.data() + (i - b) * (m + 1) * d;
      std::copy(x, x + d, row);
      for (std::size_t j = 0; j < m; ++j) {
        double* r = row + (j + 1) * d;
        for (std::size_t q = 0; q < d; ++q) r[q] = x[q] + cfg.noise_std * rng.normal();
      }
    }
    const Tensor out = detail::eval_outputs(net, batch, cfg.tap);
    for (std::size_t i = b; i < e; ++i) {
      const std::size_t base = (i - b) * (m + 1);
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t r = i * m + j;
        if (cols == 1) {
          double s = 0.0;
          for (std::size_t q = 0; q < k; ++q) s += out(base + j + 1, q) - out(base, q);
          eps(r, 0) = s / static_cast<double>(k);
        } else {
          for (std::size_t q = 0; q < k; ++q) eps(r, q) = out(base + j + 1, q) - out(base, q);
        }
      }
    }
  });
  return eps;
}

/// Mean entries of the output noise, element [i * n_noise + j].
inline std::vector<double> output_noise_means(const nnet::Network& net, const Tensor& inputs,
                                              const PerturbConfig& cfg) {
  return output_noise(net, inputs, cfg, Reduction::MeanEntry).vec();
}

/// S = Var over (x, eps) of the mean output-noise entry, population
/// variance with the mean subtracted (post-softmax: see Reduction).
/// `seconds` covers the noise propagation and the variance; the bootstrap
/// stderr (resampling inputs) is excluded.
inline SensitivityEstimate estimate_sensitivity(const nnet::Network& net, const Tensor& inputs,
                                                const PerturbConfig& cfg,
                                                Reduction red = Reduction::Auto) {
  cfg.validate();
  const auto t0 = detail::Clock::now();
  const std::size_t n = std::min(cfg.n_inputs, inputs.dim(0));
  const std::size_t m = cfg.n_noise;
  if (n * m < 2) throw Error("sensitivity needs at least two (input, noise) samples");
  const Tensor e = output_noise(net, inputs, cfg, red);
  const std::size_t cols = e.dim(1);

  SensitivityEstimate est;
  est.tap = cfg.tap;
  est.n_total = n * m;
  std::vector<double> column(n * m);
  for (std::size_t q = 0; q < cols; ++q) {
    for (std::size_t r = 0; r < n * m; ++r) column[r] = e(r, q);
    est.value += detail::population_variance(column);
  }
  est.value /= static_cast<double>(cols);
  est.seconds = detail::seconds_since(t0);
  if (cfg.bootstrap == 0) return est;

  // Per-unit sums; a unit is an input (or a single draw when there is one input).
  const std::size_t units = n > 1 ? n : m;
  const std::size_t per = n > 1 ? m : 1;
  std::vector<double> s1(units * cols, 0.0), s2(units * cols, 0.0);
  for (std::size_t u = 0; u < units; ++u)
    for (std::size_t j = 0; j < per; ++j)
      for (std::size_t q = 0; q < cols; ++q) {
        const double v = e(u * per + j, q);
        s1[u * cols + q] += v;
        s2[u * cols + q] += v * v;
      }
  std::vector<double> reps(cfg.bootstrap);
  std::vector<double> a(cols), b(cols);
  CounterRng rng(derive_seed(cfg.seed, {0xB007}));
  const double total = static_cast<double>(units * per);
  for (double& r : reps) {
    std::fill(a.begin(), a.end(), 0.0);
    std::fill(b.begin(), b.end(), 0.0);
    for (std::size_t u = 0; u < units; ++u) {
      const std::size_t pick = rng.below(units);
      for (std::size_t q = 0; q < cols; ++q) {
        a[q] += s1[pick * cols + q];
        b[q] += s2[pick * cols + q];
      }
    }
    r = 0.0;
    for (std::size_t q = 0; q < cols; ++q) {
      const double mean = a[q] / total;
      r += std::max(0.0, b[q] / total - mean * mean);
    }
    r /= static_cast<double>(cols);
  }
  est.std_err = detail::sample_std(reps);
  return est;
}

/// Same noise samples evaluated on `net` and on `net` with its output layer
/// scaled by `factor`. Pre-softmax, the second value is factor^2 times the first.
inline std::pair<SensitivityEstimate, SensitivityEstimate> sensitivity_under_output_scaling(
    const nnet::Network& net, double factor, const Tensor& inputs, const PerturbConfig& cfg) {
  if (!(factor > 0.0)) throw Error("output scaling factor must be positive");
  const nnet::Network scaled = nnet::scale_output_layer(net, factor);
  return {estimate_sensitivity(net, inputs, cfg), estimate_sensitivity(scaled, inputs, cfg)};
}

/// Pre-softmax: E_x[Var over members of the mean logit]. Post-softmax:
/// sum over k of E_x[Var over members of F^k]. Population variance.
inline double estimate_output_variance(const std::vector<nnet::Network>& ensemble, const Tensor& inputs,
                                       Tap tap, std::size_t jobs = 1) {
  if (ensemble.size() < 2) throw Error("output variance needs an ensemble of at least 2 members");
  const std::size_t n = inputs.dim(0);
  const std::size_t k = ensemble.front().spec.output_dim;
  const auto outs = parallel_map(ensemble.size(), jobs,
                                 [&](std::size_t i) { return detail::eval_outputs(ensemble[i], inputs, tap); });
  double total = 0.0;
  std::vector<double> vals(ensemble.size());
  for (std::size_t x = 0; x < n; ++x) {
    if (tap == Tap::PreSoftmax) {
      for (std::size_t i = 0; i < ensemble.size(); ++i) {
        double s = 0.0;
        for (std::size_t q = 0; q < k; ++q) s += outs[i](x, q);
        vals[i] = s / static_cast<double>(k);
      }
      total += detail::population_variance(vals);
    } else {
      for (std::size_t q = 0; q < k; ++q) {
        for (std::size_t i = 0; i < ensemble.size(); ++i) vals[i] = outs[i](x, q);
        total += detail::population_variance(vals);
      }
    }
  }
  return total / static_cast<double>(n);
}

struct JacobianEstimate {
  double value = 0.0;  // mean over inputs of the Frobenius norm
  std::size_t n_inputs = 0;
  double seconds = 0.0;
};

/// Jacobian of the tap output w.r.t. the input for every row of `x`, as
/// [N x K x D]. One forward pass and K reverse passes per batch.
inline Tensor input_jacobians(const nnet::Network& net, const Tensor& x, Tap tap) {
  const std::size_t n = x.dim(0), d = x.row_stride(), k = net.spec.output_dim;
  ad::GradTape tape;
  tape.set_branch_tracking(false);
  std::vector<ad::Var> params;
  params.reserve(net.params.size());
  for (const auto& p : net.params) params.push_back(tape.constant(p));
  ad::Var in = tape.leaf(x);
  nnet::ForwardOptions opt;
  opt.mode = nnet::Mode::Eval;
  ad::Var out = nnet::forward(tape, net, params, in, opt);
  if (tap == Tap::PostSoftmax) out = ad::softmax(out);
  Tensor jac(Shape{n, k, d});
  Tensor seed(Shape{n, k}, 0.0);
  for (std::size_t q = 0; q < k; ++q) {
    for (std::size_t i = 0; i < n; ++i) seed(i, q) = 1.0;
    tape.backward(out, seed);
    for (std::size_t i = 0; i < n; ++i) seed(i, q) = 0.0;
    const auto g = in.grad().data();
    for (std::size_t i = 0; i < n; ++i)
      std::copy(g.begin() + static_cast<std::ptrdiff_t>(i * d),
                g.begin() + static_cast<std::ptrdiff_t>((i + 1) * d),
                jac.data().begin() + static_cast<std::ptrdiff_t>((i * k + q) * d));
  }
  return jac;
}

/// Mean Frobenius norm of the input-output Jacobian over the first
/// `n_inputs` rows, timed.
inline JacobianEstimate jacobian_frobenius(const nnet::Network& net, const Tensor& inputs, Tap tap,
                                           std::size_t n_inputs = 0, std::size_t batch = 64) {
  const auto t0 = detail::Clock::now();
  const std::size_t n = n_inputs == 0 ? inputs.dim(0) : std::min(n_inputs, inputs.dim(0));
  const std::size_t per = net.spec.output_dim * inputs.row_stride();
  double total = 0.0;
  for (std::size_t b = 0; b < n; b += batch) {
    const std::size_t e = std::min(n, b + batch);
    const Tensor jac = input_jacobians(net, inputs.rows(b, e), tap);
    const auto jd = jac.data();
    for (std::size_t i = 0; i < e - b; ++i) {
      double s = 0.0;
      for (std::size_t q = 0; q < per; ++q) s += jd[i * per + q] * jd[i * per + q];
      total += std::sqrt(s);
    }
  }
  JacobianEstimate out;
  out.value = total / static_cast<double>(n);
  out.n_inputs = n;
  out.seconds = detail::seconds_since(t0);
  return out;
}

// ---------------------------------------------------------------------------
// Losses

inline constexpr double kProbabilityFloor = 1e-12;

struct LossValue {
  double value = 0.0;
  std::size_t clamped = 0;  // samples whose true-class probability hit the floor
};

/// Mean of -ln F_c over rows; F_c is floored at 1e-12 and such rows are counted.
inline LossValue cross_entropy_from_logits(const Tensor& logits, const Tensor& targets) {
  logits.require_same_shape(targets, "cross_entropy_from_logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  const double floor_log = std::log(kProbabilityFloor);
  LossValue out;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data().data() + i * k;
    const double lse = kernels::logsumexp_row(z, k);
    const std::size_t c = argmax_row(targets, i);
    double lp = z[c] - lse;
    if (lp < floor_log) {
      lp = floor_log;
      ++out.clamped;
    }
    out.value -= lp;
  }
  out.value /= static_cast<double>(n);
  return out;
}

/// Mean over rows of ||out - y||^2.
inline double mse_from_outputs(const Tensor& outputs, const Tensor& targets) {
  outputs.require_same_shape(targets, "mse_from_outputs");
  const std::size_t n = outputs.dim(0), k = outputs.dim(1);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t q = 0; q < k; ++q) {
      const double r = outputs(i, q) - targets(i, q);
      s += r * r;
    }
  return s / static_cast<double>(n);
}

inline double classification_error_from_logits(const Tensor& logits, const Tensor& targets) {
  logits.require_same_shape(targets, "classification_error");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < logits.dim(0); ++i) wrong += argmax_row(logits, i) != argmax_row(targets, i);
  return static_cast<double>(wrong) / static_cast<double>(logits.dim(0));
}

inline LossValue cross_entropy_loss(const nnet::Network& net, const data::Dataset& d) {
  return cross_entropy_from_logits(detail::eval_outputs(net, d.inputs, Tap::PreSoftmax), d.targets);
}

/// Classification: softmax outputs against one-hot targets. Regression: raw outputs.
inline double mse_loss(const nnet::Network& net, const data::Dataset& d) {
  const Tap tap = d.task == data::Task::Classification ? Tap::PostSoftmax : Tap::PreSoftmax;
  return mse_from_outputs(detail::eval_outputs(net, d.inputs, tap), d.targets);
}

inline double classification_error(const nnet::Network& net, const data::Dataset& d) {
  return classification_error_from_logits(detail::eval_outputs(net, d.inputs, Tap::PreSoftmax), d.targets);
}

/// One network's metric set. Timings are wall-clock seconds.
struct MetricReport {
  std::optional<double> S_before;
  double S_after = 0.0;
  double S_post = 0.0;  // post-softmax sensitivity of the trained net
  double J_pre = 0.0;
  double J_post = 0.0;
  double L = 0.0;
  double L_mse = 0.0;
  double err = 0.0;
  std::size_t ce_clamped = 0;
  double t_S = 0.0;
  double t_J = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"S_after", S_after}, {"S_post", S_post}, {"J_pre", J_pre},
                        {"J_post", J_post},   {"L", L},           {"L_MSE", L_mse},
                        {"err", err},         {"ce_clamped", ce_clamped},
                        {"t_S", t_S},         {"t_J", t_J}};
    j["S_before"] = S_before ? nlohmann::json(*S_before) : nlohmann::json();
    return j;
  }
};

}  // namespace senlab::metrics
