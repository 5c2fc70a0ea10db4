#pragma once

// Monte-Carlo checks of the closed-form predictors on random networks with
// synthetic Gaussian inputs. Every check names the theory operations it
// exercises so coverage can be asserted.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "senlab/harness/config.hpp"
#include "senlab/harness/table.hpp"
#include "senlab/log.hpp"
#include "senlab/metrics/perturb.hpp"
#include "senlab/theory.hpp"

namespace senlab::harness {

/// Every closed-form operation of the theory module.
inline const std::vector<std::string>& theory_ops() {
  static const std::vector<std::string> ops{
      "predict_S_fc",       "predict_S_general", "predict_Sigma",
      "predict_var_from_S", "predict_eps_variance", "ce_mse_bounds",
      "approx_L_from_mse",  "predict_L_from_S",  "depth_width_equivalence"};
  return ops;
}

struct CheckResult {
  std::string name;
  std::vector<std::string> ops;
  double measured = 0.0;
  double predicted = 0.0;
  double std_err = 0.0;  // of `measured`, when it is a Monte-Carlo estimate
  double rel_error = 0.0;
  double tolerance = 0.0;
  bool monte_carlo = false;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;

  nlohmann::json to_json() const {
    return {{"name", name},         {"ops", ops},         {"measured", measured},
            {"predicted", predicted}, {"std_err", std_err}, {"rel_error", rel_error},
            {"tolerance", tolerance}, {"monte_carlo", monte_carlo}, {"pass", pass},
            {"detail", detail},     {"seconds", seconds}};
  }
};

inline double rel_error(double measured, double predicted) {
  if (predicted == 0.0) return measured == 0.0 ? 0.0 : INFINITY;
  return std::abs(measured - predicted) / std::abs(predicted);
}

/// Relative-tolerance verdict; fills rel_error and pass.
inline CheckResult& judge(CheckResult& r) {
  r.rel_error = rel_error(r.measured, r.predicted);
  r.pass = r.rel_error <= r.tolerance;
  return r;
}

// ---------------------------------------------------------------------------
// Monte-Carlo building blocks

inline Tensor gaussian_inputs(std::size_t n, std::size_t d, double sigma2, std::uint64_t seed) {
  Tensor x(Shape{n, d});
  CounterRng rng(seed);
  const double s = std::sqrt(sigma2);
  for (double& v : x.data()) v = s * rng.normal();
  return x;
}

/// Fresh network for draw `i`, every trainable layer scaled by `scale`.
inline nnet::Network random_network(const nnet::ArchitectureSpec& spec, nnet::InitScheme scheme,
                                    std::uint64_t seed, std::size_t i, double scale = 1.0) {
  nnet::Network net = nnet::build(spec, scheme, derive_seed(seed, {0xD7A3, i}));
  if (scale != 1.0)
    for (std::size_t l = 0; l < net.num_trainable(); ++l) nnet::scale_trainable_layer(net, l, scale, scale);
  return net;
}

struct McSummary {
  double mean = 0.0;
  double std_err = 0.0;
  std::size_t draws = 0;
};

inline McSummary summarize(const std::vector<double>& v) {
  McSummary s;
  s.draws = v.size();
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  s.std_err = metrics::detail::sample_std(v) / std::sqrt(static_cast<double>(v.size()));
  return s;
}

/// S averaged over parameter draws. Starts at `min_draws` and doubles
/// (up to max_draws) while the standard error exceeds rel_se * mean; the
/// per-draw values are prefix-stable, so extra draws only add samples.
inline McSummary mc_sensitivity(const nnet::ArchitectureSpec& spec, nnet::InitScheme scheme,
                                const Tensor& inputs, metrics::PerturbConfig pc, std::size_t min_draws,
                                std::size_t max_draws, double rel_se, std::uint64_t seed,
                                std::size_t jobs, double scale = 1.0) {
  pc.bootstrap = 0;
  pc.jobs = 1;
  std::vector<double> vals;
  std::size_t target = std::max<std::size_t>(min_draws, 2);
  for (;;) {
    const std::size_t have = vals.size();
    const auto more = parallel_map(target - have, jobs, [&](std::size_t j) {
      const std::size_t i = have + j;
      const auto net = random_network(spec, scheme, seed, i, scale);
      auto p = pc;
      p.seed = derive_seed(seed, {0x5EE5, i});
      return metrics::estimate_sensitivity(net, inputs, p).value;
    });
    vals.insert(vals.end(), more.begin(), more.end());
    const auto s = summarize(vals);
    if (s.std_err <= rel_se * std::abs(s.mean) || target >= max_draws) return s;
    target = std::min(max_draws, target * 2);
  }
}

/// Random-network ensemble statistics on one input set: pre- and
/// post-softmax output variance and the mean per-member S.
struct EnsembleMoments {
  double var_pre = 0.0;
  double var_post = 0.0;
  McSummary S;
};

inline EnsembleMoments mc_ensemble_moments(const nnet::ArchitectureSpec& spec, nnet::InitScheme scheme,
                                           const Tensor& var_inputs, const Tensor& s_inputs,
                                           metrics::PerturbConfig pc, std::size_t members,
                                           std::uint64_t seed, std::size_t jobs, double scale = 1.0) {
  pc.bootstrap = 0;
  pc.jobs = 1;
  const auto nets = parallel_map(members, jobs, [&](std::size_t i) {
    return random_network(spec, scheme, seed, i, scale);
  });
  EnsembleMoments m;
  m.var_pre = metrics::estimate_output_variance(nets, var_inputs, metrics::Tap::PreSoftmax, jobs);
  m.var_post = metrics::estimate_output_variance(nets, var_inputs, metrics::Tap::PostSoftmax, jobs);
  const auto s = parallel_map(members, jobs, [&](std::size_t i) {
    auto p = pc;
    p.seed = derive_seed(seed, {0x5EE5, i});
    return metrics::estimate_sensitivity(nets[i], s_inputs, p).value;
  });
  m.S = summarize(s);
  return m;
}

// ---------------------------------------------------------------------------
// Individual checks

struct CheckContext {
  VerifySpec spec;
  double noise_std = 0.1;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  double tol(double fallback) const { return spec.tolerance.value_or(fallback); }
  metrics::PerturbConfig perturb() const {
    metrics::PerturbConfig p;
    p.noise_std = noise_std;
    p.n_inputs = spec.n_inputs;
    p.n_noise = spec.n_noise;
    return p;
  }
  std::uint64_t stream(std::initializer_list<std::uint64_t> path) const { return derive_seed(seed, path); }
};

/// MC S on SN/ReLU equal-width FC nets against (D/K)(H/2)^M sigma2_eps.
inline CheckResult check_S_fc(const CheckContext& cx, std::size_t D, std::size_t K, std::size_t H,
                              std::size_t M, double tol = 0.15) {
  const auto t0 = metrics::detail::Clock::now();
  CheckResult r;
  r.name = "S_fc D=" + std::to_string(D) + " K=" + std::to_string(K) + " H=" + std::to_string(H) +
           " M=" + std::to_string(M);
  r.ops = {"predict_S_fc"};
  r.monte_carlo = true;
  r.tolerance = cx.tol(tol);
  const auto spec = nnet::fc_architecture(D, H, M, K);
  const std::uint64_t s = cx.stream({0x51, D, K, H, M});
  const Tensor x = gaussian_inputs(cx.spec.n_inputs, D, 1.0, derive_seed(s, {0}));
  const auto mc = mc_sensitivity(spec, nnet::InitScheme::SN, x, cx.perturb(), cx.spec.draws,
                                 8 * cx.spec.draws, tol / 5.0, derive_seed(s, {1}), cx.jobs);
  r.measured = mc.mean;
  r.std_err = mc.std_err;
  r.predicted = theory::predict_S_fc(static_cast<double>(D), static_cast<double>(K), static_cast<double>(H),
                                     static_cast<int>(M), cx.noise_std * cx.noise_std);
  r.detail = std::to_string(mc.draws) + " draws";
  judge(r);
  r.seconds = metrics::detail::seconds_since(t0);
  return r;
}

/// Unequal widths, He-normal weights and a leaky activation, M = 3.
inline CheckResult check_S_general_deep(const CheckContext& cx, double tol = 0.15) {
  const auto t0 = metrics::detail::Clock::now();
  CheckResult r;
  r.name = "S_general deep (M=3, HN, leaky)";
  r.ops = {"predict_S_general"};
  r.monte_carlo = true;
  r.tolerance = cx.tol(tol);
  nnet::FcOptions opt;
  opt.activation = nnet::ActivationSpec(1.0, 0.3);
  const auto spec = nnet::fc_architecture(16, {48, 32, 40}, 4, opt);
  const std::uint64_t s = cx.stream({0x52});
  const Tensor x = gaussian_inputs(cx.spec.n_inputs, 16, 1.0, derive_seed(s, {0}));
  const auto mc = mc_sensitivity(spec, nnet::InitScheme::HN, x, cx.perturb(), cx.spec.draws,
                                 8 * cx.spec.draws, tol / 5.0, derive_seed(s, {1}), cx.jobs);
  const double e2 = cx.noise_std * cx.noise_std;
  r.measured = mc.mean;
  r.std_err = mc.std_err;
  r.predicted = theory::predict_S_general(theory::declared_profile(spec, nnet::InitScheme::HN, 1.0, e2));
  r.detail = std::to_string(mc.draws) + " draws";
  judge(r);
  r.seconds = metrics::detail::seconds_since(t0);
  return r;
}

struct VarCase {
  std::size_t D = 16, H = 64, K = 4;
  double sigma2_x = 1.0;
  nnet::InitScheme scheme = nnet::InitScheme::HN;
};

/// Pre-softmax ensemble variance against S sigma2_x / sigma2_eps + Sigma,
/// with S measured on the same random networks.
inline CheckResult check_var_from_S(const CheckContext& cx, const VarCase& vc, double tol = 0.15) {
  const auto t0 = metrics::detail::Clock::now();
  CheckResult r;
  r.name = "var_from_S " + nnet::to_string(vc.scheme) + " D=" + std::to_string(vc.D) +
           " H=" + std::to_string(vc.H) + " K=" + std::to_string(vc.K) + " sigma2_x=" + format_double(vc.sigma2_x);
  r.ops = {"predict_var_from_S", "predict_Sigma"};
  r.monte_carlo = true;
  r.tolerance = cx.tol(tol);
  const auto spec = nnet::fc_architecture(vc.D, vc.H, 1, vc.K);
  const std::uint64_t s = cx.stream({0x53, vc.D, vc.H, vc.K, static_cast<std::uint64_t>(vc.sigma2_x * 1e6),
                                     static_cast<std::uint64_t>(vc.scheme)});
  const Tensor xv = gaussian_inputs(cx.spec.var_inputs, vc.D, vc.sigma2_x, derive_seed(s, {0}));
  const Tensor xs = gaussian_inputs(cx.spec.n_inputs, vc.D, vc.sigma2_x, derive_seed(s, {1}));
  const auto m = mc_ensemble_moments(spec, vc.scheme, xv, xs, cx.perturb(), cx.spec.ensemble,
                                     derive_seed(s, {2}), cx.jobs);
  const auto prof = theory::declared_profile(spec, vc.scheme, vc.sigma2_x, cx.noise_std * cx.noise_std);
  r.measured = m.var_pre;
  r.predicted = theory::predict_var_from_S(m.S.mean, prof);
  const double sigma = theory::predict_Sigma(prof);
  r.detail = "Sigma share " + format_double(sigma / r.predicted);
  judge(r);
  r.seconds = metrics::detail::seconds_since(t0);
  return r;
}

/// Biased one-hidden-layer net: measured var minus the S term against Sigma.
inline CheckResult check_Sigma(const CheckContext& cx, double tol = 0.20) {
  const auto t0 = metrics::detail::Clock::now();
  CheckResult r;
  r.name = "Sigma SN D=4 H=64 K=4 sigma2_x=0.25";
  r.ops = {"predict_Sigma"};
  r.monte_carlo = true;
  r.tolerance = cx.tol(tol);
  const double s2x = 0.25, e2 = cx.noise_std * cx.noise_std;
  const auto spec = nnet::fc_architecture(4, 64, 1, 4);
  const std::uint64_t s = cx.stream({0x54});
  const Tensor xv = gaussian_inputs(cx.spec.var_inputs, 4, s2x, derive_seed(s, {0}));
  const Tensor xs = gaussian_inputs(cx.spec.n_inputs, 4, s2x, derive_seed(s, {1}));
  // A difference of two MC estimates: at the base ensemble size its spread
  // is about half the tolerance, so this check draws eight times as many nets.
  const auto m = mc_ensemble_moments(spec, nnet::InitScheme::SN, xv, xs, cx.perturb(), 8 * cx.spec.ensemble,
                                     derive_seed(s, {2}), cx.jobs);
  r.measured = m.var_pre - m.S.mean * s2x / e2;
  r.predicted = theory::predict_Sigma(theory::declared_profile(spec, nnet::InitScheme::SN, s2x, e2));
  judge(r);
  r.seconds = metrics::detail::seconds_since(t0);
  return r;
}

/// Small-logit regime (every layer scaled by 0.1): post-softmax variance
/// over pre-softmax variance against (K-1)/K.
inline CheckResult check_eps_ratio(const CheckContext& cx, std::size_t K, double tol = 0.20) {
  const auto t0 = metrics::detail::Clock::now();
  CheckResult r;
  r.name = "eps_variance/var K=" + std::to_string(K) + " (scale 0.1)";
  r.ops = {"predict_eps_variance", "predict_var_from_S"};
  r.monte_carlo = true;
  r.tolerance = cx.tol(tol);
  const double e2 = cx.noise_std * cx.noise_std;
  const auto spec = nnet::fc_architecture(16, 32, 1, K);
  const std::uint64_t s = cx.stream({0x55, K});
  const Tensor xv = gaussian_inputs(cx.spec.var_inputs, 16, 1.0, derive_seed(s, {0}));
  const Tensor xs = gaussian_inputs(cx.spec.n_inputs, 16, 1.0, derive_seed(s, {1}));
  const auto m = mc_ensemble_moments(spec, nnet::InitScheme::SN, xv, xs, cx.perturb(), cx.spec.ensemble,
                                     derive_seed(s, {2}), cx.jobs, 0.1);
  auto prof = theory::declared_profile(spec, nnet::InitScheme::SN, 1.0, e2);
  for (auto& v : prof.sigma2_w) v *= 0.01;
  for (auto& v : prof.sigma2_b) v *= 0.01;
  r.measured = m.var_post / m.var_pre;
  r.predicted = theory::predict_eps_variance(m.S.mean, prof) / theory::predict_var_from_S(m.S.mean, prof);
  judge(r);
  r.seconds = metrics::detail::seconds_since(t0);
  return r;
}

/// Uniform point on the probability simplex (normalized exponentials).
inline std::vector<double> simplex_point(CounterRng& rng, std::size_t k) {
  std::vector<double> f(k);
  double s = 0.0;
  for (double& v : f) {
    v = -std::log(1.0 - rng.uniform());
    s += v;
  }
  for (double& v : f) v /= s;
  return f;
}

/// Ordering of the CE/MSE bounds on random simplex points, exact. Also
/// checks the rearranged form sqrt(actual/2) <= 1-F^c <= sqrt((K-1)/K actual)
/// on the exactly computed wrong mass.
inline CheckResult check_bounds(const CheckContext& cx, std::size_t points = 100000) {
  const auto t0 = metrics::detail::Clock::now();
  CheckResult r;
  r.name = "ce_mse_bounds ordering (" + std::to_string(points) + " points)";
  r.ops = {"ce_mse_bounds"};
  CounterRng rng(cx.stream({0x56}));
  std::size_t bad = 0;
  for (std::size_t i = 0; i < points; ++i) {
    const std::size_t k = 2 + rng.below(19);
    const auto f = simplex_point(rng, k);
    const std::size_t c = rng.below(k);
    const auto b = theory::ce_mse_bounds(f, c);
    if (!(b.lower <= b.actual && b.actual <= b.upper)) ++bad;
  }
  r.measured = static_cast<double>(bad);
  r.predicted = 0.0;
  r.pass = bad == 0;
  r.detail = std::to_string(bad) + " violations";
  r.seconds = metrics::detail::seconds_since(t0);
  return r;
}

/// One-hot, K = 2 and uniform-wrong-mass cases where the bounds are tight.
inline CheckResult check_bound_equalities(const CheckContext& cx) {
  const auto t0 = metrics::detail::Clock::now();
  CheckResult r;
  r.name = "ce_mse_bounds equality cases";
  r.ops = {"ce_mse_bounds"};
  CounterRng rng(cx.stream({0x57}));
  std::size_t bad = 0;
  for (std::size_t k = 2; k <= 12; ++k) {
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> f(k, 0.0);
      f[c] = 1.0;
      const auto b = theory::ce_mse_bounds(f, c);
      if (!(b.lower == 0.0 && b.actual == 0.0 && b.upper == 0.0)) ++bad;
    }
  }
  for (int i = 0; i < 1000; ++i) {
    const double p = rng.uniform();
    const std::vector<double> f{p, 1.0 - p};
    const auto b = theory::ce_mse_bounds(f, i % 2);
    if (!(b.lower == b.actual && b.actual == b.upper)) ++bad;
  }
  for (std::size_t k = 2; k <= 16; ++k) {
    const std::vector<double> f(k, 1.0 / static_cast<double>(k));
    const auto b = theory::ce_mse_bounds(f, k / 2);
    if (b.lower != b.actual) ++bad;
  }
  // Wrong mass spread evenly: F^c = 1/2, others 1/(2(K-1)) with K-1 a power of two.
  for (std::size_t k : {2u, 3u, 5u, 9u, 17u}) {
    std::vector<double> f(k, 0.5 / static_cast<double>(k - 1));
    f[0] = 0.5;
    const auto b = theory::ce_mse_bounds(f, 0);
    if (b.lower != b.actual) ++bad;
  }
  r.measured = static_cast<double>(bad);
  r.pass = bad == 0;
  r.detail = std::to_string(bad) + " misses";
  r.seconds = metrics::detail::seconds_since(t0);
  return r;
}

/// Worked values and the identity L(S) = approx(eps_variance(S)).
inline CheckResult check_L_approximations(const CheckContext& cx) {
  const auto t0 = metrics::detail::Clock::now();
  CheckResult r;
  r.name = "L approximations";
  r.ops = {"approx_L_from_mse", "predict_L_from_S", "predict_eps_variance"};
  std::size_t bad = 0;
  if (theory::approx_L_from_mse(2.0) != 1.0) ++bad;
  if (theory::approx_L_from_mse(0.0) != 0.0) ++bad;
  const auto prof = theory::declared_profile(nnet::fc_architecture(8, 16, 2, 10, {.bias = false}),
                                             nnet::InitScheme::SN, 1.0, 0.01);
  if (theory::predict_L_from_S(0.0, prof) != 0.0) ++bad;
  CounterRng rng(cx.stream({0x58}));
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double S = 100.0 * rng.uniform();
    const double a = theory::predict_L_from_S(S, prof);
    const double b = theory::approx_L_from_mse(theory::predict_eps_variance(S, prof));
    worst = std::max(worst, rel_error(a, b));
  }
  if (worst > 1e-12) ++bad;
  r.measured = static_cast<double>(bad);
  r.pass = bad == 0;
  r.detail = "worst identity error " + format_double(worst);
  r.seconds = metrics::detail::seconds_since(t0);
  return r;
}

/// Arithmetic: predicted S for (500, 4) vs (165, 5).
inline CheckResult check_depth_width_ratio() {
  CheckResult r;
  r.name = "depth_width_equivalence (500,4) vs (165,5)";
  r.ops = {"depth_width_equivalence"};
  r.measured = theory::depth_width_equivalence(500, 4, 165, 5);
  r.predicted = 1.0;
  r.tolerance = 0.03;
  return judge(r);
}

/// MC S_before of the matched pair, statistically indistinguishable at
/// `z` standard errors. D = 16, K = 10, SN.
inline CheckResult check_matched_pair(const CheckContext& cx, double z = 3.0, std::size_t n_inputs = 16,
                                      std::size_t n_noise = 8) {
  const auto t0 = metrics::detail::Clock::now();
  CheckResult r;
  r.name = "matched pair MC (500,4) vs (165,5)";
  r.ops = {"depth_width_equivalence"};
  r.monte_carlo = true;
  auto pc = cx.perturb();
  pc.n_inputs = n_inputs;
  pc.n_noise = n_noise;
  const std::uint64_t s = cx.stream({0x59});
  const Tensor x = gaussian_inputs(n_inputs, 16, 1.0, derive_seed(s, {0}));
  const auto a = mc_sensitivity(nnet::fc_architecture(16, 500, 4, 10), nnet::InitScheme::SN, x, pc,
                                cx.spec.draws, cx.spec.draws, 0.0, derive_seed(s, {1}), cx.jobs);
  const auto b = mc_sensitivity(nnet::fc_architecture(16, 165, 5, 10), nnet::InitScheme::SN, x, pc,
                                cx.spec.draws, cx.spec.draws, 0.0, derive_seed(s, {2}), cx.jobs);
  r.measured = b.mean / a.mean;
  r.predicted = theory::depth_width_equivalence(500, 4, 165, 5);
  const double se = std::hypot(a.std_err, b.std_err);
  const double zscore = std::abs(a.mean - b.mean) / se;
  r.std_err = r.measured * std::hypot(a.std_err / a.mean, b.std_err / b.mean);
  r.rel_error = rel_error(r.measured, r.predicted);
  r.tolerance = z;
  r.pass = zscore <= z;
  r.detail = "z=" + format_double(zscore) + " S1=" + format_double(a.mean) + " S2=" + format_double(b.mean);
  r.seconds = metrics::detail::seconds_since(t0);
  return r;
}

/// predict_S_general equals predict_S_fc for SN/ReLU/equal widths.
inline CheckResult check_general_reduces_to_fc(const CheckContext& cx) {
  CheckResult r;
  r.name = "S_general reduces to S_fc";
  r.ops = {"predict_S_general", "predict_S_fc"};
  CounterRng rng(cx.stream({0x5A}));
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t D = 1 + rng.below(64), K = 1 + rng.below(16), H = 1 + rng.below(256);
    const std::size_t M = 1 + rng.below(5);
    const double e2 = 0.001 + rng.uniform();
    const auto spec = nnet::fc_architecture(D, H, M, K);
    const double g = theory::predict_S_general(theory::declared_profile(spec, nnet::InitScheme::SN, 1.0, e2));
    const double f = theory::predict_S_fc(static_cast<double>(D), static_cast<double>(K),
                                          static_cast<double>(H), static_cast<int>(M), e2);
    worst = std::max(worst, rel_error(g, f));
  }
  r.measured = worst;
  r.tolerance = 1e-12;
  r.pass = worst <= r.tolerance;
  r.rel_error = worst;
  r.detail = "worst relative difference";
  return r;
}

// ---------------------------------------------------------------------------
// The verify-theory suite

struct VerifyReport {
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool all_pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
  }
  std::set<std::string> ops_covered() const {
    std::set<std::string> s;
    for (const auto& c : checks) s.insert(c.ops.begin(), c.ops.end());
    return s;
  }
};

/// The six S_fc configurations used by default (D, K, H, M).
inline std::vector<std::array<std::size_t, 4>> default_S_fc_configs() {
  return {{16, 2, 20, 1}, {16, 10, 100, 3}, {64, 10, 20, 3},
          {64, 2, 100, 1}, {16, 2, 20, 3},  {64, 2, 100, 3}};
}

inline VerifyReport run_verify_checks(const CheckContext& cx) {
  const auto t0 = metrics::detail::Clock::now();
  VerifyReport rep;
  auto add = [&](CheckResult r) {
    log::info("verify: " + r.name + (r.pass ? " PASS" : " FAIL") + " (" + format_double(r.seconds) + " s)");
    rep.checks.push_back(std::move(r));
  };
  add(check_general_reduces_to_fc(cx));
  for (const auto& [D, K, H, M] : default_S_fc_configs()) add(check_S_fc(cx, D, K, H, M));
  add(check_S_general_deep(cx));
  for (double s2x : {0.25, 1.0, 4.0}) add(check_var_from_S(cx, {16, 64, 4, s2x, nnet::InitScheme::HN}));
  add(check_var_from_S(cx, {4, 64, 4, 0.25, nnet::InitScheme::SN}));
  add(check_Sigma(cx));
  for (std::size_t K : {2u, 10u}) add(check_eps_ratio(cx, K));
  add(check_bounds(cx));
  add(check_bound_equalities(cx));
  add(check_L_approximations(cx));
  add(check_depth_width_ratio());
  add(check_matched_pair(cx));
  rep.seconds = metrics::detail::seconds_since(t0);
  return rep;
}

}  // namespace senlab::harness
