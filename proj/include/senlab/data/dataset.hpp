#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "senlab/ops.hpp"
#include "senlab/rng.hpp"
#include "senlab/tensor.hpp"

namespace senlab::data {

enum class Task { Classification, Regression };
enum class SplitTag { Full, Train, Test };

class DatasetError : public Error {
 public:
  using Error::Error;
};

/// Inputs [N x D] (or [N x C x H x W]) with one-hot targets [N x K] for
/// classification or scalar targets [N x 1] for regression.
struct Dataset {
  Tensor inputs;
  Tensor targets;
  Task task = Task::Classification;
  SplitTag split = SplitTag::Full;

  std::size_t size() const { return inputs.dim(0); }
  std::size_t input_dim() const { return inputs.row_stride(); }
  std::size_t output_dim() const { return targets.dim(1); }

  std::vector<std::size_t> labels() const {
    if (task != Task::Classification) throw DatasetError("labels() on a regression dataset");
    std::vector<std::size_t> out(size());
    for (std::size_t i = 0; i < size(); ++i) out[i] = argmax_row(targets, i);
    return out;
  }

  Dataset subset(std::span<const std::size_t> idx, SplitTag tag) const {
    return Dataset{inputs.gather_rows(idx), targets.gather_rows(idx), task, tag};
  }
};

inline Tensor one_hot(std::span<const std::size_t> labels, std::size_t k) {
  Tensor t(Shape{labels.size(), k}, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) throw DatasetError("label out of range for one-hot encoding");
    t(i, labels[i]) = 1.0;
  }
  return t;
}

/// Checks the structural invariants; throws DatasetError on violation.
inline void validate(const Dataset& d) {
  if (d.inputs.rank() < 2 || d.targets.rank() != 2 || d.inputs.dim(0) != d.targets.dim(0)) {
    throw DatasetError("dataset inputs and targets disagree on the sample count");
  }
  if (!d.inputs.all_finite() || !d.targets.all_finite()) throw DatasetError("dataset has NaN/Inf entries");
  if (d.task == Task::Classification) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      std::size_t ones = 0;
      for (std::size_t k = 0; k < d.output_dim(); ++k) {
        const double v = d.targets(i, k);
        if (v == 1.0) {
          ++ones;
        } else if (v != 0.0) {
          throw DatasetError("classification targets must be one-hot");
        }
      }
      if (ones != 1) throw DatasetError("classification targets must be one-hot");
    }
  }
}

/// Grand mean of squared input entries (scalar input second moment).
inline double input_second_moment(const Dataset& d) { return mean_square(d.inputs); }

/// K Gaussian clusters in D dimensions. Class means are independent
/// N(0, I/D) directions scaled to length `margin`; samples add unit-variance
/// isotropic noise. Classes are balanced (sample i has class i mod K before
/// shuffling).
inline Dataset synth_classification(std::size_t d, std::size_t k, std::size_t n, double margin,
                                    std::uint64_t seed) {
  if (k < 2) throw DatasetError("synthetic classification needs K >= 2");
  if (n < k) throw DatasetError("synthetic classification needs N >= K");
  if (d == 0) throw DatasetError("synthetic classification needs D >= 1");
  if (!(margin > 0.0)) throw DatasetError("cluster margin must be positive");
  Tensor means(Shape{k, d});
  CounterRng mrng(derive_seed(seed, {0}));
  for (std::size_t c = 0; c < k; ++c) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      means(c, j) = mrng.normal();
      norm += means(c, j) * means(c, j);
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < d; ++j) means(c, j) *= margin / norm;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng srng(derive_seed(seed, {1}));
  shuffle(order.begin(), order.end(), srng);

  Tensor x(Shape{n, d});
  std::vector<std::size_t> labels(n);
  CounterRng xrng(derive_seed(seed, {2}));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = order[i] % k;
    labels[i] = c;
    for (std::size_t j = 0; j < d; ++j) x(i, j) = means(c, j) + xrng.normal();
  }
  return Dataset{std::move(x), one_hot(labels, k), Task::Classification, SplitTag::Full};
}

/// Housing-style regression table: correlated features and a smooth
/// non-linear target plus Gaussian noise of std `noise`.
inline Dataset synth_regression(std::size_t d, std::size_t n, double noise, std::uint64_t seed) {
  if (d == 0 || n == 0) throw DatasetError("synthetic regression needs D, N >= 1");
  CounterRng wrng(derive_seed(seed, {0}));
  std::vector<double> coef(d), mixing(d * d);
  for (double& c : coef) c = wrng.normal();
  for (double& m : mixing) m = wrng.normal() / std::sqrt(static_cast<double>(d));
  CounterRng xrng(derive_seed(seed, {1}));
  Tensor x(Shape{n, d});
  Tensor y(Shape{n, 1});
  std::vector<double> z(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : z) v = xrng.normal();
    double lin = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double s = z[j];
      for (std::size_t q = 0; q < d; ++q) s += 0.5 * mixing[j * d + q] * z[q];
      x(i, j) = s;
      lin += coef[j] * s;
    }
    lin /= std::sqrt(static_cast<double>(d));
    y(i, 0) = lin + 0.5 * std::sin(2.0 * x(i, 0)) + 0.25 * x(i, 0) * x(i, d > 1 ? 1 : 0) +
              noise * xrng.normal();
  }
  return Dataset{std::move(x), std::move(y), Task::Regression, SplitTag::Full};
}

struct SplitSpec {
  double train_fraction = 0.7;
  std::uint64_t seed = 0;
  /// Fixed training-set size; overrides train_fraction when set. The test
  /// split always receives every remaining row.
  std::optional<std::size_t> subset_size;
};

/// Seeded shuffle, then partition. The two index sets are disjoint and cover
/// every row.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw DatasetError("train fraction must lie in (0, 1)");
  }
  std::size_t n_train;
  if (spec.subset_size) {
    if (*spec.subset_size > n) throw DatasetError("subset size exceeds dataset size");
    if (*spec.subset_size == 0) throw DatasetError("subset size must be positive");
    n_train = *spec.subset_size;
  } else {
    n_train = static_cast<std::size_t>(std::lround(spec.train_fraction * static_cast<double>(n)));
  }
  if (n_train == 0 || n_train >= n) throw DatasetError("split leaves an empty partition");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  CounterRng rng(derive_seed(spec.seed, {0x5011}));
  shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::size_t> train(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  return {std::move(train), std::move(test)};
}

inline std::pair<Dataset, Dataset> split(const Dataset& data, const SplitSpec& spec) {
  auto [tr, te] = split_indices(data.size(), spec);
  return {data.subset(tr, SplitTag::Train), data.subset(te, SplitTag::Test)};
}

/// Per-column affine standardization fitted on one split.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;  // 1/std; 0 for constant columns
  std::vector<std::size_t> constant_columns;

  static Standardizer fit(const Tensor& x) {
    if (x.rank() != 2) throw DatasetError("standardizer expects [N x D] features");
    const std::size_t n = x.dim(0), d = x.dim(1);
    Standardizer s;
    s.mean.assign(d, 0.0);
    s.scale.assign(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += x(i, j);
      m /= static_cast<double>(n);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) v += (x(i, j) - m) * (x(i, j) - m);
      v /= static_cast<double>(n);
      s.mean[j] = m;
      if (v > 0.0) {
        s.scale[j] = 1.0 / std::sqrt(v);
      } else {
        s.constant_columns.push_back(j);
      }
    }
    return s;
  }

  Tensor apply(const Tensor& x) const {
    Tensor out = x;
    const std::size_t d = mean.size();
    if (x.rank() != 2 || x.dim(1) != d) throw DatasetError("standardizer column count mismatch");
    for (std::size_t i = 0; i < x.dim(0); ++i)
      for (std::size_t j = 0; j < d; ++j) out(i, j) = (x(i, j) - mean[j]) * scale[j];
    return out;
  }
};

}  // namespace senlab::data
