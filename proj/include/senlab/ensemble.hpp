#pragma once

// Ensembles of independently trained networks, the MSE bias-variance split,
// temperature scaling and correlation statistics.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "senlab/log.hpp"
#include "senlab/metrics/perturb.hpp"
#include "senlab/nnet/train.hpp"
#include "senlab/parallel.hpp"

namespace senlab::ensemble {

struct MemberStatus {
  std::uint64_t seed = 0;
  bool converged = false;
  bool diverged = false;
  std::size_t epochs = 0;
  double final_loss = 0.0;
  std::string message;
};

/// Members that trained without diverging, plus the status of every
/// requested member (diverged ones are excluded from `members`).
struct Ensemble {
  std::vector<nnet::Network> members;
  std::vector<MemberStatus> status;

  std::size_t size() const { return members.size(); }
  bool all_converged() const {
    return std::all_of(status.begin(), status.end(), [](const MemberStatus& s) { return s.converged; });
  }
};

struct EnsembleConfig {
  std::size_t n_members = 10;
  bool identical_seeds = false;  // degenerate ensemble: every member uses the master seed
  std::size_t jobs = 1;
};

inline std::uint64_t member_seed(std::uint64_t master, std::size_t i, bool identical) {
  return identical ? master : derive_seed(master, {0xE45E, i});
}

/// Builds and trains n_members networks. Member i draws its initial
/// parameters and its batch order from streams derived from (master, i).
inline Ensemble train_ensemble(const nnet::ArchitectureSpec& spec, nnet::InitScheme scheme,
                               const data::Dataset& data, const nnet::TrainConfig& cfg,
                               nnet::LossKind loss, const EnsembleConfig& ec, std::uint64_t master) {
  if (ec.n_members < 2) throw Error("an ensemble needs at least 2 members");
  struct Result {
    std::optional<nnet::Network> net;
    MemberStatus status;
  };
  auto results = parallel_map(ec.n_members, ec.jobs, [&](std::size_t i) {
    Result r;
    r.status.seed = member_seed(master, i, ec.identical_seeds);
    nnet::Network net = nnet::build(spec, scheme, derive_seed(r.status.seed, {1}));
    nnet::TrainConfig c = cfg;
    c.seed = derive_seed(r.status.seed, {2});
    try {
      const auto hist = nnet::train(net, data, c, loss);
      r.status.converged = hist.converged;
      r.status.epochs = hist.epochs();
      r.status.final_loss = hist.epoch_loss.back();
      r.net = std::move(net);
    } catch (const nnet::TrainingDiverged& e) {
      r.status.diverged = true;
      r.status.epochs = e.epoch + 1;
      r.status.message = e.what();
    }
    return r;
  });
  Ensemble out;
  for (std::size_t i = 0; i < results.size(); ++i) {
    auto& r = results[i];
    if (r.net) {
      out.members.push_back(std::move(*r.net));
    } else {
      log::warn("ensemble member " + std::to_string(i) + " diverged and is excluded: " + r.status.message);
    }
    out.status.push_back(std::move(r.status));
  }
  return out;
}

struct DecompositionReport {
  double L_mse = 0.0;
  double eps_bias = 0.0;
  double eps_variance = 0.0;
  double residual = 0.0;

  double relative_residual() const { return L_mse > 0.0 ? std::abs(residual) / L_mse : std::abs(residual); }

  nlohmann::json to_json() const {
    return {{"L_mse", L_mse}, {"eps_bias", eps_bias}, {"eps_variance", eps_variance}, {"residual", residual}};
  }
};

/// Split of the members' mean squared error into the squared error of the
/// ensemble mean and the spread around it. Population variance over
/// members makes L_mse = eps_bias + eps_variance an identity.
inline DecompositionReport decompose_predictions(const std::vector<Tensor>& preds, const Tensor& targets) {
  if (preds.size() < 2) throw Error("decomposition needs at least 2 ensemble members");
  for (const auto& p : preds) p.require_same_shape(targets, "decompose");
  const std::size_t n = targets.dim(0), k = targets.dim(1);
  const double m = static_cast<double>(preds.size());
  DecompositionReport r;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t q = 0; q < k; ++q) {
      const double y = targets(i, q);
      // Offsets from the first member, so identical members give exactly zero spread.
      const double p0 = preds[0](i, q);
      double off = 0.0;
      for (const auto& p : preds) off += p(i, q) - p0;
      const double mean = p0 + off / m;
      double var = 0.0, mse = 0.0;
      for (const auto& p : preds) {
        var += (p(i, q) - mean) * (p(i, q) - mean);
        mse += (p(i, q) - y) * (p(i, q) - y);
      }
      r.eps_bias += (mean - y) * (mean - y);
      r.eps_variance += var / m;
      r.L_mse += mse / m;
    }
  }
  r.eps_bias /= static_cast<double>(n);
  r.eps_variance /= static_cast<double>(n);
  r.L_mse /= static_cast<double>(n);
  r.residual = r.L_mse - r.eps_bias - r.eps_variance;
  return r;
}

/// Post-softmax outputs for classification, raw outputs for regression.
inline DecompositionReport decompose(const std::vector<nnet::Network>& members, const data::Dataset& test,
                                     std::size_t jobs = 1) {
  if (members.size() < 2) throw Error("decomposition needs at least 2 ensemble members");
  const auto tap = test.task == data::Task::Classification ? metrics::Tap::PostSoftmax
                                                            : metrics::Tap::PreSoftmax;
  const auto preds = parallel_map(members.size(), jobs, [&](std::size_t i) {
    return metrics::detail::eval_outputs(members[i], test.inputs, tap);
  });
  return decompose_predictions(preds, test.targets);
}

// ---------------------------------------------------------------------------
// Temperature scaling

struct CalibrationResult {
  double T = 1.0;
  double ce_before = 0.0;
  double ce_after = 0.0;
  bool degenerate = false;  // every logit row constant; T is irrelevant
  bool unimodal = true;     // coarse scan looked unimodal in log T
  bool grid_fallback = false;

  nlohmann::json to_json() const {
    return {{"T_star", T},           {"ce_before_cal", ce_before}, {"ce_after_cal", ce_after},
            {"degenerate", degenerate}, {"unimodal", unimodal},   {"grid_fallback", grid_fallback}};
  }
};

inline Tensor scale_logits(const Tensor& logits, double T) { return (1.0 / T) * logits; }

inline double tempered_ce(const Tensor& logits, const Tensor& targets, double T) {
  return metrics::cross_entropy_from_logits(scale_logits(logits, T), targets).value;
}

struct TemperatureSearch {
  double t_min = 0.05;
  double t_max = 20.0;
  double tol = 1e-4;        // absolute, on T
  std::size_t coarse = 61;  // log-spaced probes for the unimodality check
  std::size_t fine = 8001;  // grid used when the coarse scan is not unimodal
};

/// T > 0 minimizing validation cross-entropy of softmax(logits / T).
/// Golden-section search on log T; T = 1 is kept when it does at least as well.
inline CalibrationResult temperature_scale(const Tensor& logits, const Tensor& targets,
                                           const TemperatureSearch& s = {}) {
  logits.require_same_shape(targets, "temperature_scale");
  if (logits.dim(0) == 0) throw Error("temperature scaling needs a nonempty validation set");
  CalibrationResult r;
  r.ce_before = tempered_ce(logits, targets, 1.0);
  r.ce_after = r.ce_before;

  bool constant = true;
  for (std::size_t i = 0; i < logits.dim(0) && constant; ++i)
    for (std::size_t q = 1; q < logits.dim(1); ++q)
      if (logits(i, q) != logits(i, 0)) constant = false;
  if (constant) {
    r.degenerate = true;
    return r;
  }

  const double a = std::log(s.t_min), b = std::log(s.t_max);
  auto f = [&](double u) { return tempered_ce(logits, targets, std::exp(u)); };
  std::vector<double> us(s.coarse), fs(s.coarse);
  for (std::size_t i = 0; i < s.coarse; ++i) {
    us[i] = a + (b - a) * static_cast<double>(i) / static_cast<double>(s.coarse - 1);
    fs[i] = f(us[i]);
  }
  const std::size_t best = static_cast<std::size_t>(std::min_element(fs.begin(), fs.end()) - fs.begin());
  for (std::size_t i = 1; i <= best; ++i) r.unimodal = r.unimodal && fs[i] <= fs[i - 1];
  for (std::size_t i = best + 1; i < s.coarse; ++i) r.unimodal = r.unimodal && fs[i] >= fs[i - 1];

  double t_star;
  if (r.unimodal) {
    double lo = us[best == 0 ? 0 : best - 1];
    double hi = us[std::min(best + 1, s.coarse - 1)];
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    double x1 = hi - g * (hi - lo), x2 = lo + g * (hi - lo);
    double f1 = f(x1), f2 = f(x2);
    while (std::exp(hi) - std::exp(lo) > s.tol) {
      if (f1 <= f2) {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - g * (hi - lo);
        f1 = f(x1);
      } else {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + g * (hi - lo);
        f2 = f(x2);
      }
    }
    t_star = std::exp(0.5 * (lo + hi));
  } else {
    r.grid_fallback = true;
    double best_f = INFINITY;
    t_star = 1.0;
    for (std::size_t i = 0; i < s.fine; ++i) {
      const double u = a + (b - a) * static_cast<double>(i) / static_cast<double>(s.fine - 1);
      const double v = f(u);
      if (v < best_f) {
        best_f = v;
        t_star = std::exp(u);
      }
    }
  }
  const double ce_star = tempered_ce(logits, targets, t_star);
  if (ce_star < r.ce_before) {
    r.T = t_star;
    r.ce_after = ce_star;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Correlation

class UndefinedCorrelation : public Error {
 public:
  using Error::Error;
};

struct CorrelationReport {
  double rho = 0.0;
  std::size_t n = 0;
  std::string x_name;
  std::string y_name;

  nlohmann::json to_json() const { return {{"x", x_name}, {"y", y_name}, {"rho", rho}, {"n", n}}; }
};

inline CorrelationReport pearson(std::span<const double> xs, std::span<const double> ys,
                                 std::string x_name = "x", std::string y_name = "y") {
  if (xs.size() != ys.size()) throw Error("pearson: length mismatch");
  if (xs.size() < 3) throw UndefinedCorrelation("pearson needs at least 3 points, got " + std::to_string(xs.size()));
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelation("pearson: zero variance in " + (sxx == 0.0 ? x_name : y_name));
  CorrelationReport r;
  r.rho = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  r.n = xs.size();
  r.x_name = std::move(x_name);
  r.y_name = std::move(y_name);
  return r;
}

/// Positions (0-based) of each item when sorted by `key`, ties broken by
/// `tiebreak` and then by index.
inline std::vector<std::size_t> ranks(std::span<const double> key, std::span<const double> tiebreak) {
  std::vector<std::size_t> order(key.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (key[a] != key[b]) return key[a] < key[b];
    return tiebreak[a] < tiebreak[b];
  });
  std::vector<std::size_t> rank(key.size());
  for (std::size_t p = 0; p < order.size(); ++p) rank[order[p]] = p;
  return rank;
}

struct FootruleReport {
  std::size_t distance = 0;
  double agreement = 1.0;  // 1 - distance / max possible distance
};

/// Spearman's footrule between two rankings of the same items.
inline FootruleReport spearman_footrule(std::span<const std::size_t> ra, std::span<const std::size_t> rb) {
  if (ra.size() != rb.size()) throw Error("footrule: length mismatch");
  FootruleReport r;
  for (std::size_t i = 0; i < ra.size(); ++i) r.distance += ra[i] > rb[i] ? ra[i] - rb[i] : rb[i] - ra[i];
  const std::size_t n = ra.size();
  const std::size_t max_d = n * n / 2;
  r.agreement = max_d == 0 ? 1.0 : 1.0 - static_cast<double>(r.distance) / static_cast<double>(max_d);
  return r;
}

}  // namespace senlab::ensemble
