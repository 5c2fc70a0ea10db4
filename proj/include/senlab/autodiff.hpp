#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// Every primitive appends one node holding its value and, when any input needs
// a gradient, a closure that pushes the node's adjoint to its inputs. Inputs
// always have smaller ids than their consumers, so walking ids downward is a
// reverse topological order.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "senlab/kernels.hpp"
#include "senlab/ops.hpp"
#include "senlab/rng.hpp"
#include "senlab/tensor.hpp"

namespace senlab::ad {

class GradTape;

/// Handle to a node on a tape.
struct Var {
  GradTape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
};

class GradTape {
 public:
  using Backward = std::function<void(GradTape&, std::size_t self)>;

  /// With recording off, nodes keep values only and backward() is unavailable.
  explicit GradTape(bool recording = true) : recording_(recording) {}

  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), Tensor(), {}, nullptr,
                          requires_grad && recording_});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends a derived node. The closure is dropped when no input needs a
  /// gradient.
  Var push(Tensor value, std::vector<std::size_t> inputs, Backward backward) {
    bool needs = false;
    if (recording_) {
      for (std::size_t i : inputs) needs = needs || nodes_[i].requires_grad;
    }
    if (!needs) {
      inputs.clear();
      backward = nullptr;
    }
    nodes_.push_back(Node{std::move(value), Tensor(), std::move(inputs),
                          std::move(backward), needs});
    return Var{this, nodes_.size() - 1};
  }

  /// Backpropagates from a scalar root with seed 1.
  void backward(Var root) {
    if (nodes_.at(root.id).value.size() != 1) {
      throw ShapeError("backward() without a seed needs a scalar root, got " +
                       shape_str(nodes_[root.id].value.shape()));
    }
    Tensor seed(nodes_[root.id].value.shape(), 1.0);
    backward(root, seed);
  }

  /// Backpropagates an arbitrary seed adjoint from root. All adjoints are
  /// reset first, so repeated calls on one forward pass are independent.
  void backward(Var root, const Tensor& seed) {
    if (!recording_) throw Error("backward() on a tape created without recording");
    Node& r = nodes_.at(root.id);
    r.value.require_same_shape(seed, "backward seed");
    for (Node& n : nodes_) n.adjoint = Tensor(n.value.shape(), 0.0);
    r.adjoint = seed;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward) n.backward(*this, i);
    }
    has_adjoints_ = true;
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

  const Tensor& grad(std::size_t id) const {
    if (!has_adjoints_) throw Error("grad() before backward()");
    return nodes_.at(id).adjoint;
  }

  /// Adjoint buffer of a node; only meaningful inside a backward closure.
  Tensor& adj(std::size_t id) { return nodes_[id].adjoint; }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Records which branch of a non-smooth primitive was taken. Two
  /// evaluations with different signatures straddle a kink.
  void note_branch(std::uint64_t h) { branches_.push_back(h); }
  const std::vector<std::uint64_t>& branch_signature() const noexcept { return branches_; }
  /// Plain evaluation can skip hashing the branch pattern.
  void set_branch_tracking(bool on) noexcept { track_branches_ = on; }
  bool tracks_branches() const noexcept { return track_branches_; }

 private:
  struct Node {
    Tensor value;
    Tensor adjoint;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<std::uint64_t> branches_;
  bool recording_;
  bool track_branches_ = true;
  bool has_adjoints_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline const Tensor& Var::grad() const { return tape->grad(id); }

namespace detail {

inline void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error("operands live on different tapes");
}

inline void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Splits x into [outer, channels, inner] around dimension 1.
struct ChannelView {
  std::size_t outer, channels, inner;
};

inline ChannelView channel_view(const Shape& s) {
  if (s.size() < 2) throw ShapeError("expected at least [N x C], got " + shape_str(s));
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  a.value().require_same_shape(b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  return a.tape->push(std::move(out), {a.id, b.id}, [a, b](GradTape& t, std::size_t self) {
    const Tensor& g = t.adj(self);
    if (t.requires_grad(a.id)) detail::add_into(t.adj(a.id), g);
    if (t.requires_grad(b.id)) detail::add_into(t.adj(b.id), g);
  });
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b);
  a.value().require_same_shape(b.value(), "mul");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape->push(std::move(out), {a.id, b.id}, [a, b](GradTape& t, std::size_t self) {
    auto g = t.adj(self).data();
    if (t.requires_grad(a.id)) {
      auto da = t.adj(a.id).data();
      auto bv = t.value(b.id).data();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b.id)) {
      auto db = t.adj(b.id).data();
      auto av = t.value(a.id).data();
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

/// Elementwise product with a constant tensor (dropout masks, probes).
inline Var mul_const(Var x, Tensor c) {
  x.value().require_same_shape(c, "mul_const");
  Tensor out = x.value();
  auto o = out.data();
  auto cv = c.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= cv[i];
  return x.tape->push(std::move(out), {x.id},
                      [x, c = std::move(c)](GradTape& t, std::size_t self) {
                        auto g = t.adj(self).data();
                        auto dx = t.adj(x.id).data();
                        auto cv = c.data();
                        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * cv[i];
                      });
}

inline Var scale(Var x, double c) {
  Tensor out = c * x.value();
  return x.tape->push(std::move(out), {x.id}, [x, c](GradTape& t, std::size_t self) {
    auto g = t.adj(self).data();
    auto dx = t.adj(x.id).data();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += c * g[i];
  });
}

inline Var sum(Var x) {
  return x.tape->push(Tensor::scalar(senlab::sum(x.value())), {x.id},
                      [x](GradTape& t, std::size_t self) {
                        const double g = t.adj(self)[0];
                        for (double& v : t.adj(x.id).data()) v += g;
                      });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// sum(x * w) for a constant weight tensor.
inline Var weighted_sum(Var x, const Tensor& w) { return sum(mul_const(x, w)); }

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->push(std::move(out), {x.id}, [x](GradTape& t, std::size_t self) {
    auto g = t.adj(self).data();
    auto dx = t.adj(x.id).data();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

/// Flattens everything after the leading (batch) dimension.
inline Var flatten(Var x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("flatten on a scalar");
  return reshape(x, Shape{s[0], x.value().size() / s[0]});
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  Tensor out = senlab::matmul(a.value(), b.value());
  return a.tape->push(std::move(out), {a.id, b.id}, [a, b](GradTape& t, std::size_t self) {
    const Tensor& g = t.adj(self);
    const Tensor& av = t.value(a.id);
    const Tensor& bv = t.value(b.id);
    const std::size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
    if (t.requires_grad(a.id)) {
      // dA = G * B^T
      kernels::gemm_nt(g.data().data(), bv.data().data(), t.adj(a.id).data().data(), n, m,
                       k, true);
    }
    if (t.requires_grad(b.id)) {
      // dB = A^T * G
      kernels::gemm_tn(av.data().data(), g.data().data(), t.adj(b.id).data().data(), k, n,
                       m, true);
    }
  });
}

/// Adds b[C] along dimension 1 of x (dense [N x C] or image [N x C x H x W]).
/// The only broadcast the library supports.
inline Var add_bias(Var x, Var b) {
  detail::same_tape(x, b);
  const auto v = detail::channel_view(x.shape());
  if (b.value().rank() != 1 || b.value().dim(0) != v.channels) {
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  Tensor out = x.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t n = 0; n < v.outer; ++n)
    for (std::size_t c = 0; c < v.channels; ++c)
      for (std::size_t i = 0; i < v.inner; ++i) o[(n * v.channels + c) * v.inner + i] += bv[c];
  return x.tape->push(std::move(out), {x.id, b.id}, [x, b, v](GradTape& t, std::size_t self) {
    auto g = t.adj(self).data();
    if (t.requires_grad(x.id)) detail::add_into(t.adj(x.id), t.adj(self));
    if (t.requires_grad(b.id)) {
      auto db = t.adj(b.id).data();
      for (std::size_t n = 0; n < v.outer; ++n)
        for (std::size_t c = 0; c < v.channels; ++c)
          for (std::size_t i = 0; i < v.inner; ++i) db[c] += g[(n * v.channels + c) * v.inner + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Non-linearities

inline Var activation(Var x, PositiveHomogeneous act) {
  Tensor out = apply_positive_homogeneous(x.value(), act);
  // Branch signature: which entries sit on the alpha side.
  if (x.tape->tracks_branches()) {
    std::uint64_t h = 0xA11CEull;
    auto xv = x.value().data();
    for (std::size_t i = 0; i < xv.size(); ++i) h = mix64(h ^ (xv[i] > 0.0 ? i + 1 : 0));
    x.tape->note_branch(h);
  }
  return x.tape->push(std::move(out), {x.id}, [x, act](GradTape& t, std::size_t self) {
    auto g = t.adj(self).data();
    auto dx = t.adj(x.id).data();
    auto xv = t.value(x.id).data();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * act.derivative(xv[i]);
  });
}

/// Row-wise softmax of [N x K] logits.
inline Var softmax(Var z) {
  if (z.value().rank() != 2) throw ShapeError("softmax expects [N x K]");
  Tensor out = senlab::softmax(z.value());
  return z.tape->push(std::move(out), {z.id}, [z](GradTape& t, std::size_t self) {
    const Tensor& y = t.value(self);
    auto g = t.adj(self).data();
    auto dz = t.adj(z.id).data();
    const std::size_t n = y.dim(0), k = y.dim(1);
    auto yv = y.data();
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * yv[r * k + j];
      for (std::size_t j = 0; j < k; ++j) dz[r * k + j] += yv[r * k + j] * (g[r * k + j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over rows of -sum_k y_k log softmax(z)_k. Targets may be soft.
inline Var cross_entropy_logits(Var logits, const Tensor& targets) {
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw ShapeError("cross_entropy expects [N x K] logits");
  z.require_same_shape(targets, "cross_entropy targets");
  const std::size_t n = z.dim(0), k = z.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = z.data().data() + r * k;
    const double lse = kernels::logsumexp_row(row, k);
    for (std::size_t j = 0; j < k; ++j) {
      const double y = targets[r * k + j];
      if (y != 0.0) total -= y * (row[j] - lse);
    }
  }
  return logits.tape->push(
      Tensor::scalar(total / static_cast<double>(n)), {logits.id},
      [logits, targets](GradTape& t, std::size_t self) {
        const double g = t.adj(self)[0];
        const Tensor& z = t.value(logits.id);
        const std::size_t n = z.dim(0), k = z.dim(1);
        Tensor p = senlab::softmax(z);
        auto dz = t.adj(logits.id).data();
        for (std::size_t r = 0; r < n; ++r) {
          double ysum = 0.0;
          for (std::size_t j = 0; j < k; ++j) ysum += targets[r * k + j];
          for (std::size_t j = 0; j < k; ++j) {
            dz[r * k + j] += g * (ysum * p[r * k + j] - targets[r * k + j]) / static_cast<double>(n);
          }
        }
      });
}

/// Mean over rows of the squared Euclidean distance ||pred - target||^2.
inline Var mse(Var pred, const Tensor& target) {
  const Tensor& p = pred.value();
  if (p.rank() < 1) throw ShapeError("mse expects a batch");
  p.require_same_shape(target, "mse target");
  const double n = static_cast<double>(p.dim(0));
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - target[i];
    total += d * d;
  }
  return pred.tape->push(Tensor::scalar(total / n), {pred.id},
                         [pred, target, n](GradTape& t, std::size_t self) {
                           const double g = t.adj(self)[0];
                           const Tensor& p = t.value(pred.id);
                           auto dp = t.adj(pred.id).data();
                           for (std::size_t i = 0; i < p.size(); ++i) {
                             dp[i] += g * 2.0 * (p[i] - target[i]) / n;
                           }
                         });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

/// 2-D convolution, x [N x C x H x W], w [O x C x k x k], via im2col.
inline Var conv2d(Var x, Var w, std::size_t stride, std::size_t padding) {
  detail::same_tape(x, w);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3]) {
    throw ShapeError("conv2d: input " + shape_str(xs) + " incompatible with kernel " +
                     shape_str(ws));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const kernels::ConvGeometry geo{xs[1], xs[2], xs[3], ws[2], stride, padding};
  if (xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[2]) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  const std::size_t n = xs[0], o = ws[0], ho = geo.out_height(), wo = geo.out_width();
  const std::size_t patch = geo.patch(), plane = ho * wo;
  const std::size_t img = xs[1] * xs[2] * xs[3];

  Tensor out(Shape{n, o, ho, wo});
  std::vector<double> cols(patch * plane);
  for (std::size_t i = 0; i < n; ++i) {
    kernels::im2col(x.value().data().data() + i * img, geo, cols.data());
    kernels::gemm_nn(w.value().data().data(), cols.data(), out.data().data() + i * o * plane, o,
                     patch, plane);
  }
  return x.tape->push(
      std::move(out), {x.id, w.id},
      [x, w, geo, n, o, patch, plane, img](GradTape& t, std::size_t self) {
        auto g = t.adj(self).data();
        const Tensor& xv = t.value(x.id);
        const Tensor& wv = t.value(w.id);
        std::vector<double> cols(patch * plane);
        for (std::size_t i = 0; i < n; ++i) {
          const double* gi = g.data() + i * o * plane;
          if (t.requires_grad(w.id)) {
            kernels::im2col(xv.data().data() + i * img, geo, cols.data());
            // dW[o x patch] += G_i[o x plane] * cols^T
            kernels::gemm_nt(gi, cols.data(), t.adj(w.id).data().data(), o, plane, patch, true);
          }
          if (t.requires_grad(x.id)) {
            // dcols[patch x plane] = W^T * G_i
            kernels::gemm_tn(wv.data().data(), gi, cols.data(), patch, o, plane);
            kernels::col2im(cols.data(), geo, t.adj(x.id).data().data() + i * img);
          }
        }
      });
}

/// Non-overlapping max pooling with window and stride k; trailing rows and
/// columns that do not fill a window are dropped. Ties go to the first entry.
inline Var maxpool2d(Var x, std::size_t k) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("maxpool2d expects [N x C x H x W]");
  if (k == 0 || s[2] < k || s[3] < k) throw ShapeError("maxpool2d: window larger than input");
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3], ho = h / k, wo = w / k;
  Tensor out(Shape{n, c, ho, wo});
  std::vector<std::size_t> arg(out.size());
  auto xv = x.value().data();
  std::uint64_t sig = 0x9001ull;
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t oi = 0; oi < ho; ++oi) {
      for (std::size_t oj = 0; oj < wo; ++oj) {
        std::size_t best = p * h * w + (oi * k) * w + oj * k;
        for (std::size_t di = 0; di < k; ++di) {
          for (std::size_t dj = 0; dj < k; ++dj) {
            const std::size_t idx = p * h * w + (oi * k + di) * w + (oj * k + dj);
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (p * ho + oi) * wo + oj;
        out[o] = xv[best];
        arg[o] = best;
        if (x.tape->tracks_branches()) sig = mix64(sig ^ best);
      }
    }
  }
  if (x.tape->tracks_branches()) x.tape->note_branch(sig);
  return x.tape->push(std::move(out), {x.id}, [x, arg = std::move(arg)](GradTape& t, std::size_t self) {
    auto g = t.adj(self).data();
    auto dx = t.adj(x.id).data();
    for (std::size_t o = 0; o < g.size(); ++o) dx[arg[o]] += g[o];
  });
}

// ---------------------------------------------------------------------------
// Batch normalization

struct BatchStats {
  Tensor mean;
  Tensor var;  // biased (divide-by-count) batch variance
  std::size_t count = 0;  // entries per channel
};

/// Normalizes each channel (dimension 1) with batch statistics, then applies
/// gamma and beta. Writes the batch statistics to `stats` when given.
inline Var batchnorm_train(Var x, Var gamma, Var beta, double eps, BatchStats* stats = nullptr) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const auto v = detail::channel_view(x.shape());
  if (gamma.value().size() != v.channels || beta.value().size() != v.channels) {
    throw ShapeError("batchnorm: parameter size does not match channel count");
  }
  const double count = static_cast<double>(v.outer * v.inner);
  auto xv = x.value().data();
  Tensor mu(Shape{v.channels}), var(Shape{v.channels});
  for (std::size_t c = 0; c < v.channels; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < v.outer; ++n)
      for (std::size_t i = 0; i < v.inner; ++i) s += xv[(n * v.channels + c) * v.inner + i];
    mu[c] = s / count;
    double q = 0.0;
    for (std::size_t n = 0; n < v.outer; ++n)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const double d = xv[(n * v.channels + c) * v.inner + i] - mu[c];
        q += d * d;
      }
    var[c] = q / count;
  }
  Tensor xhat = x.value();
  Tensor out = x.value();
  auto gv = gamma.value().data();
  auto bv = beta.value().data();
  for (std::size_t n = 0; n < v.outer; ++n)
    for (std::size_t c = 0; c < v.channels; ++c) {
      const double inv = 1.0 / std::sqrt(var[c] + eps);
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t idx = (n * v.channels + c) * v.inner + i;
        xhat[idx] = (xv[idx] - mu[c]) * inv;
        out[idx] = gv[c] * xhat[idx] + bv[c];
      }
    }
  if (stats) *stats = BatchStats{mu, var, v.outer * v.inner};
  return x.tape->push(
      std::move(out), {x.id, gamma.id, beta.id},
      [x, gamma, beta, v, count, var, eps, xhat = std::move(xhat)](GradTape& t, std::size_t self) {
        auto g = t.adj(self).data();
        auto gv = t.value(gamma.id).data();
        for (std::size_t c = 0; c < v.channels; ++c) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t n = 0; n < v.outer; ++n)
            for (std::size_t i = 0; i < v.inner; ++i) {
              const std::size_t idx = (n * v.channels + c) * v.inner + i;
              sg += g[idx];
              sgx += g[idx] * xhat[idx];
            }
          if (t.requires_grad(gamma.id)) t.adj(gamma.id)[c] += sgx;
          if (t.requires_grad(beta.id)) t.adj(beta.id)[c] += sg;
          if (t.requires_grad(x.id)) {
            auto dx = t.adj(x.id).data();
            const double inv = 1.0 / std::sqrt(var[c] + eps);
            for (std::size_t n = 0; n < v.outer; ++n)
              for (std::size_t i = 0; i < v.inner; ++i) {
                const std::size_t idx = (n * v.channels + c) * v.inner + i;
                dx[idx] += gv[c] * inv * (g[idx] - sg / count - xhat[idx] * sgx / count);
              }
          }
        }
      });
}

/// Batch normalization with frozen statistics: an affine map per channel.
inline Var batchnorm_eval(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var,
                          double eps) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const auto v = detail::channel_view(x.shape());
  if (gamma.value().size() != v.channels || mean.size() != v.channels) {
    throw ShapeError("batchnorm: parameter size does not match channel count");
  }
  Tensor inv(Shape{v.channels});
  for (std::size_t c = 0; c < v.channels; ++c) inv[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor out = x.value();
  auto xv = x.value().data();
  auto gv = gamma.value().data();
  auto bv = beta.value().data();
  for (std::size_t n = 0; n < v.outer; ++n)
    for (std::size_t c = 0; c < v.channels; ++c)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t idx = (n * v.channels + c) * v.inner + i;
        out[idx] = gv[c] * (xv[idx] - mean[c]) * inv[c] + bv[c];
      }
  return x.tape->push(std::move(out), {x.id, gamma.id, beta.id},
                      [x, gamma, beta, v, mean, inv](GradTape& t, std::size_t self) {
                        auto g = t.adj(self).data();
                        auto xv = t.value(x.id).data();
                        auto gv = t.value(gamma.id).data();
                        for (std::size_t n = 0; n < v.outer; ++n)
                          for (std::size_t c = 0; c < v.channels; ++c)
                            for (std::size_t i = 0; i < v.inner; ++i) {
                              const std::size_t idx = (n * v.channels + c) * v.inner + i;
                              if (t.requires_grad(x.id)) t.adj(x.id)[idx] += g[idx] * gv[c] * inv[c];
                              if (t.requires_grad(gamma.id))
                                t.adj(gamma.id)[c] += g[idx] * (xv[idx] - mean[c]) * inv[c];
                              if (t.requires_grad(beta.id)) t.adj(beta.id)[c] += g[idx];
                            }
                      });
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose +-h probes changed a non-smooth branch; excluded.
  std::vector<std::size_t> kink_coordinates;
};

using ScalarFn = std::function<Var(GradTape&, Var)>;

/// Compares the tape gradient of a scalar function with central differences.
/// Per coordinate: |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
inline GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5) {
  if (!(h >= 1e-6 && h <= 1e-4)) {
    throw Error("grad_check step must lie in [1e-6, 1e-4], got " + std::to_string(h));
  }
  GradTape tape;
  Var xv = tape.leaf(x);
  Var y = f(tape, xv);
  if (y.value().size() != 1) throw ShapeError("grad_check needs a scalar-valued function");
  const auto center_sig = tape.branch_signature();
  tape.backward(y);
  const Tensor analytic = tape.grad(xv.id);

  auto eval = [&](const Tensor& p, std::vector<std::uint64_t>& sig) {
    GradTape probe(false);
    Var pv = probe.leaf(p, false);
    const double v = f(probe, pv).value().item();
    sig = probe.branch_signature();
    return v;
  };

  GradCheckResult res;
  Tensor p = x;
  std::vector<std::uint64_t> sig_plus, sig_minus;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double fp = eval(p, sig_plus);
    p[i] = orig - h;
    const double fm = eval(p, sig_minus);
    p[i] = orig;
    if (sig_plus != center_sig || sig_minus != center_sig) {
      res.kink_coordinates.push_back(i);
      continue;
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double err =
        std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + 1e-8);
    res.max_rel_error = std::max(res.max_rel_error, err);
    ++res.checked;
  }
  return res;
}

}  // namespace senlab::ad
