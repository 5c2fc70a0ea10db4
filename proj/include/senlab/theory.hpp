#pragma once

// Closed-form predictions for random networks built from positive-homogeneous
// layers, the CE/MSE bounds and the loss approximations that go with them.
//
// Moment propagation, layer by layer: for zero-mean i.i.d. parameters a dense
// layer multiplies the second moment of its input by fan_in * sigma2_w and
// adds sigma2_b; the activation multiplies it by c = (alpha^2 + beta^2) / 2.

#include <nlohmann/json.hpp>

#include <boost/multiprecision/cpp_int.hpp>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "senlab/nnet/network.hpp"

namespace senlab::theory {

class TheoryError : public Error {
 public:
  using Error::Error;
};

/// Second moments feeding the predictors. fan_in[l] is the fan-in of
/// trainable layer l: fan_in[0] = D and fan_in[i] = H_i for a dense stack.
/// For convolutions the fan-in (channels * kernel^2) stands in for H_i.
struct MomentProfile {
  std::vector<std::size_t> fan_in;  // M + 1 entries
  std::size_t K = 1;
  std::vector<double> sigma2_w;  // M + 1 entries
  std::vector<double> sigma2_b;  // M + 1 entries, 0 for bias-free layers
  double sigma2_x = 1.0;
  double sigma2_eps = 0.01;
  nnet::ActivationSpec act = nnet::ActivationSpec::relu();

  std::size_t depth() const { return fan_in.size() - 1; }  // M
  double gain() const { return act.gain(); }

  void validate() const {
    const std::size_t L = fan_in.size();
    if (L == 0 || sigma2_w.size() != L || sigma2_b.size() != L) {
      throw TheoryError("moment profile: layer counts disagree");
    }
    if (K == 0) throw TheoryError("moment profile: K must be positive");
    for (std::size_t f : fan_in)
      if (f == 0) throw TheoryError("moment profile: widths must be positive");
    for (double v : sigma2_w)
      if (!(v >= 0.0)) throw TheoryError("moment profile: negative weight moment");
    for (double v : sigma2_b)
      if (!(v >= 0.0)) throw TheoryError("moment profile: negative bias moment");
    if (!(sigma2_x >= 0.0)) throw TheoryError("moment profile: negative input moment");
    if (!(sigma2_eps > 0.0)) throw TheoryError("moment profile: noise variance must be positive");
  }

  nlohmann::json to_json() const {
    return {{"fan_in", fan_in},     {"K", K},
            {"sigma2_w", sigma2_w}, {"sigma2_b", sigma2_b},
            {"sigma2_x", sigma2_x}, {"sigma2_eps", sigma2_eps},
            {"alpha", act.alpha},   {"beta", act.beta}};
  }
};

namespace detail {

inline nnet::ActivationSpec shared_activation(const nnet::ArchitectureSpec& spec) {
  std::optional<nnet::ActivationSpec> act;
  for (const auto& l : spec.layers) {
    if (const auto* a = std::get_if<nnet::Activation>(&l)) {
      if (act && (act->alpha != a->act.alpha || act->beta != a->act.beta)) {
        throw TheoryError("moment profile needs one activation shared by all layers");
      }
      act = a->act;
    }
  }
  return act.value_or(nnet::ActivationSpec::relu());
}

}  // namespace detail

/// Profile from the scheme's declared moments.
inline MomentProfile declared_profile(const nnet::ArchitectureSpec& spec, nnet::InitScheme scheme,
                                      double sigma2_x, double sigma2_eps) {
  MomentProfile p;
  p.fan_in = nnet::trainable_fan_in(spec);
  p.K = spec.output_dim;
  p.sigma2_x = sigma2_x;
  p.sigma2_eps = sigma2_eps;
  p.act = detail::shared_activation(spec);
  for (const auto& l : spec.layers) {
    if (const auto* d = std::get_if<nnet::Dense>(&l)) {
      p.sigma2_w.push_back(nnet::weight_second_moment(scheme, d->in_units, d->out_units));
      p.sigma2_b.push_back(d->has_bias ? nnet::bias_second_moment(scheme) : 0.0);
    } else if (const auto* c = std::get_if<nnet::Conv>(&l)) {
      const std::size_t kk = c->kernel * c->kernel;
      p.sigma2_w.push_back(nnet::weight_second_moment(scheme, c->in_channels * kk, c->out_channels * kk));
      p.sigma2_b.push_back(c->has_bias ? nnet::bias_second_moment(scheme) : 0.0);
    }
  }
  p.validate();
  return p;
}

/// Profile from the parameters a network actually holds.
inline MomentProfile empirical_profile(const nnet::Network& net, double sigma2_x, double sigma2_eps) {
  MomentProfile p;
  p.fan_in = nnet::trainable_fan_in(net.spec);
  p.K = net.spec.output_dim;
  p.sigma2_x = sigma2_x;
  p.sigma2_eps = sigma2_eps;
  p.act = detail::shared_activation(net.spec);
  const auto m = nnet::param_second_moments(net);
  p.sigma2_w = m.sigma2_w;
  p.sigma2_b = m.sigma2_b;
  p.validate();
  return p;
}

/// (D/K) (H/2)^M sigma2_eps: SN parameters, ReLU, M equal hidden widths.
inline double predict_S_fc(double D, double K, double H, int M, double sigma2_eps) {
  if (M < 1) throw TheoryError("predict_S_fc needs at least one hidden layer");
  if (!(D > 0.0 && K > 0.0 && H > 0.0 && sigma2_eps >= 0.0)) {
    throw TheoryError("predict_S_fc: widths must be positive");
  }
  return D / K * std::pow(H / 2.0, M) * sigma2_eps;
}

/// sigma2_eps (1/K) D prod(H_i) prod(sigma2_w) c^M.
inline double predict_S_general(const MomentProfile& p) {
  p.validate();
  double s = p.sigma2_eps / static_cast<double>(p.K);
  for (std::size_t l = 0; l < p.fan_in.size(); ++l) s *= static_cast<double>(p.fan_in[l]) * p.sigma2_w[l];
  return s * std::pow(p.gain(), static_cast<double>(p.depth()));
}

/// Bias contribution to the output variance:
/// (1/K) sum_l sigma2_b_l prod_{i=l}^{M} H_i sigma2_w_{i+1} c, empty product 1.
inline double predict_Sigma(const MomentProfile& p) {
  p.validate();
  const std::size_t L = p.fan_in.size();
  double total = 0.0;
  double carry = 1.0;  // propagation factor from the output of layer l to the logits
  for (std::size_t l = L; l-- > 0;) {
    total += p.sigma2_b[l] * carry;
    if (l > 0) carry *= static_cast<double>(p.fan_in[l]) * p.sigma2_w[l] * p.gain();
  }
  return total / static_cast<double>(p.K);
}

/// Pre-softmax ensemble variance: S sigma2_x / sigma2_eps + Sigma.
inline double predict_var_from_S(double S, const MomentProfile& p) {
  return S * p.sigma2_x / p.sigma2_eps + predict_Sigma(p);
}

/// Post-softmax variance term from the delta method around zero logits.
inline double predict_eps_variance(double S, const MomentProfile& p) {
  const double k = static_cast<double>(p.K);
  return (k - 1.0) / k * predict_var_from_S(S, p);
}

struct BoundsTriple {
  double lower = 0.0;
  double actual = 0.0;
  double upper = 0.0;
  double wrong_mass = 0.0;  // 1 - F_c, as the sum of the other entries
};

namespace detail {

using boost::multiprecision::cpp_int;

/// A double as an exact integer times 2^exp (exp shared by the caller).
struct Dyadic {
  cpp_int mant;
  int exp;
};

inline Dyadic to_dyadic(double v) {
  if (v == 0.0) return {0, 0};
  int e = 0;
  const double f = std::frexp(v, &e);
  return {cpp_int(static_cast<long long>(std::ldexp(f, 53))), e - 53};
}

/// Correctly rounded (to nearest, ties to even) num / den * 2^exp2 for
/// num >= 0, den > 0, normal-range results.
inline double round_to_double(const cpp_int& num, const cpp_int& den, int exp2) {
  if (num == 0) return 0.0;
  const long shift = 55 - (static_cast<long>(msb(num)) - static_cast<long>(msb(den)));
  cpp_int n = num, d = den;
  if (shift >= 0) {
    n <<= static_cast<unsigned>(shift);
  } else {
    d <<= static_cast<unsigned>(-shift);
  }
  cpp_int q, r;
  divide_qr(n, d, q, r);
  const unsigned extra = static_cast<unsigned>(msb(q)) - 52;
  cpp_int mant = q >> extra;
  const cpp_int rem = q - (mant << extra);
  const cpp_int half = cpp_int(1) << (extra - 1);
  if (rem > half || (rem == half && (r != 0 || (mant & 1) != 0))) ++mant;
  return std::ldexp(static_cast<double>(mant), exp2 - static_cast<int>(shift) + static_cast<int>(extra));
}

}  // namespace detail

/// lower = K/(K-1) (1-F_c)^2, actual = sum_k (F_k - y_k)^2, upper = 2 (1-F_c)^2.
///
/// 1 - F_c is taken as the sum of the wrong-class entries (identical on the
/// simplex). All three values are computed exactly from the input doubles
/// and rounded once, so the ordering and the equality cases (one-hot, K = 2,
/// evenly spread wrong mass) hold without any tolerance.
inline BoundsTriple ce_mse_bounds(std::span<const double> F, std::size_t c) {
  using detail::cpp_int;
  const std::size_t K = F.size();
  if (K < 2) throw TheoryError("ce_mse_bounds needs K >= 2");
  if (c >= K) throw TheoryError("ce_mse_bounds: class index out of range");
  double total = 0.0;
  for (double f : F) {
    if (!(f >= 0.0) || !std::isfinite(f)) throw TheoryError("ce_mse_bounds: entries must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw TheoryError("ce_mse_bounds: F is not on the simplex");

  std::vector<detail::Dyadic> w;
  int emin = 0;
  bool any = false;
  for (std::size_t k = 0; k < K; ++k) {
    if (k == c || F[k] == 0.0) continue;
    w.push_back(detail::to_dyadic(F[k]));
    emin = any ? std::min(emin, w.back().exp) : w.back().exp;
    any = true;
  }
  BoundsTriple out;
  if (!any) return out;  // one-hot on the true class
  cpp_int W = 0, sq = 0;
  for (const auto& d : w) {
    const cpp_int v = d.mant << static_cast<unsigned>(d.exp - emin);
    W += v;
    sq += v * v;
  }
  const cpp_int W2 = W * W;
  const int e2 = 2 * emin;
  out.wrong_mass = detail::round_to_double(W, 1, emin);
  out.actual = detail::round_to_double(W2 + sq, 1, e2);
  out.lower = detail::round_to_double(W2 * K, cpp_int(K - 1), e2);
  out.upper = detail::round_to_double(W2 * 2, 1, e2);
  if (!(out.lower <= out.actual && out.actual <= out.upper)) {
    throw TheoryError("ce_mse_bounds ordering violated");  // unreachable
  }
  return out;
}

/// Which constant turns L_MSE into an approximate cross-entropy.
enum class LApprox {
  Taylor,            // sqrt(L_mse / 2)
  NotOverconfident,  // sqrt((K - 1) L_mse / K)
};

inline double approx_L_from_mse(double L_mse, LApprox kind = LApprox::Taylor, std::size_t K = 0) {
  if (!(L_mse >= 0.0)) throw TheoryError("approx_L_from_mse: negative loss");
  if (kind == LApprox::Taylor) return std::sqrt(L_mse / 2.0);
  if (K < 2) throw TheoryError("approx_L_from_mse: the alternative constant needs K >= 2");
  const double k = static_cast<double>(K);
  return std::sqrt((k - 1.0) * L_mse / k);
}

/// L ~ sqrt( (1/2) ((K-1)/K) (S sigma2_x / sigma2_eps + Sigma) ), bias term neglected.
inline double predict_L_from_S(double S, const MomentProfile& p) {
  if (!(S >= 0.0)) throw TheoryError("predict_L_from_S: negative sensitivity");
  return approx_L_from_mse(predict_eps_variance(S, p));
}

/// (H2/2)^M2 / (H1/2)^M1: ratio of predicted S for two equal-D/K FC stacks.
inline double depth_width_equivalence(double H1, int M1, double H2, int M2) {
  if (!(H1 > 0.0 && H2 > 0.0) || M1 < 0 || M2 < 0) {
    throw TheoryError("depth_width_equivalence: arguments must be positive");
  }
  return std::pow(H2 / 2.0, M2) / std::pow(H1 / 2.0, M1);
}

}  // namespace senlab::theory
