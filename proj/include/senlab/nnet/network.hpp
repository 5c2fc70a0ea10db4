#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "senlab/autodiff.hpp"
#include "senlab/hash.hpp"
#include "senlab/nnet/architecture.hpp"
#include "senlab/rng.hpp"

namespace senlab::nnet {

/// SN: standard normal; XU: Xavier uniform; HU: He uniform; HN: He normal.
enum class InitScheme { SN, XU, HU, HN };

inline std::string to_string(InitScheme s) {
  switch (s) {
    case InitScheme::SN: return "SN";
    case InitScheme::XU: return "XU";
    case InitScheme::HU: return "HU";
    case InitScheme::HN: return "HN";
  }
  return "?";
}

inline InitScheme init_scheme_from_string(const std::string& s) {
  if (s == "SN") return InitScheme::SN;
  if (s == "XU") return InitScheme::XU;
  if (s == "HU") return InitScheme::HU;
  if (s == "HN") return InitScheme::HN;
  throw Error("unknown init scheme '" + s + "' (expected SN, XU, HU or HN)");
}

/// Exact second moment of weights drawn under `scheme`.
inline double weight_second_moment(InitScheme scheme, std::size_t fan_in, std::size_t fan_out) {
  switch (scheme) {
    case InitScheme::SN: return 1.0;
    case InitScheme::XU: return 2.0 / static_cast<double>(fan_in + fan_out);
    case InitScheme::HU:
    case InitScheme::HN: return 2.0 / static_cast<double>(fan_in);
  }
  return 0.0;
}

inline double bias_second_moment(InitScheme scheme) { return scheme == InitScheme::SN ? 1.0 : 0.0; }

enum class Mode { Train, Eval };

struct BatchNormSettings {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Parameters and buffers of one architecture.
///
/// Trainable tensors live in one flat list (optimizer order); each layer knows
/// where its slice starts. Batch-norm running statistics are buffers and are
/// never touched by the optimizer.
struct Network {
  ArchitectureSpec spec;
  std::vector<Tensor> params;
  std::vector<std::string> param_names;
  std::vector<Tensor> buffers;
  std::vector<std::string> buffer_names;
  std::vector<std::size_t> param_offset;   // per layer
  std::vector<std::size_t> buffer_offset;  // per layer
  std::vector<std::size_t> trainable_layers;  // layer indices of Dense/Conv
  Mode mode = Mode::Eval;
  BatchNormSettings bn;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }

  std::size_t num_trainable() const { return trainable_layers.size(); }

  Tensor& weight(std::size_t l) { return params[param_offset[trainable_layers.at(l)]]; }
  const Tensor& weight(std::size_t l) const { return params[param_offset[trainable_layers.at(l)]]; }

  bool has_bias(std::size_t l) const {
    const auto& layer = spec.layers[trainable_layers.at(l)];
    if (const auto* d = std::get_if<Dense>(&layer)) return d->has_bias;
    return std::get<Conv>(layer).has_bias;
  }
  Tensor& bias(std::size_t l) { return params.at(param_offset[trainable_layers.at(l)] + 1); }
  const Tensor& bias(std::size_t l) const {
    return params.at(param_offset[trainable_layers.at(l)] + 1);
  }
};

namespace detail {

inline Tensor draw(const Shape& shape, InitScheme scheme, std::size_t fan_in, std::size_t fan_out,
                   std::uint64_t seed) {
  Tensor t(shape);
  CounterRng rng(seed);
  const double fi = static_cast<double>(fan_in), fo = static_cast<double>(fan_out);
  switch (scheme) {
    case InitScheme::SN:
      for (double& v : t.data()) v = rng.normal();
      break;
    case InitScheme::XU: {
      const double a = std::sqrt(6.0 / (fi + fo));
      for (double& v : t.data()) v = rng.uniform(-a, a);
      break;
    }
    case InitScheme::HU: {
      const double a = std::sqrt(6.0 / fi);
      for (double& v : t.data()) v = rng.uniform(-a, a);
      break;
    }
    case InitScheme::HN: {
      const double s = std::sqrt(2.0 / fi);
      for (double& v : t.data()) v = s * rng.normal();
      break;
    }
  }
  return t;
}

}  // namespace detail

/// Samples every parameter from `scheme`; bit-reproducible in
/// (spec, scheme, seed). Each tensor draws from its own stream.
inline Network build(const ArchitectureSpec& spec, InitScheme scheme, std::uint64_t seed) {
  validate(spec);
  Network net;
  net.spec = spec;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    net.param_offset.push_back(net.params.size());
    net.buffer_offset.push_back(net.buffers.size());
    const std::string prefix = "layer" + std::to_string(i) + ".";
    const std::uint64_t ws = derive_seed(seed, {i, 0});
    const std::uint64_t bs = derive_seed(seed, {i, 1});
    if (const auto* d = std::get_if<Dense>(&spec.layers[i])) {
      net.trainable_layers.push_back(i);
      net.params.push_back(
          detail::draw(Shape{d->in_units, d->out_units}, scheme, d->in_units, d->out_units, ws));
      net.param_names.push_back(prefix + "weight");
      if (d->has_bias) {
        net.params.push_back(scheme == InitScheme::SN
                                 ? detail::draw(Shape{d->out_units}, scheme, 1, 1, bs)
                                 : Tensor(Shape{d->out_units}, 0.0));
        net.param_names.push_back(prefix + "bias");
      }
    } else if (const auto* c = std::get_if<Conv>(&spec.layers[i])) {
      net.trainable_layers.push_back(i);
      const std::size_t kk = c->kernel * c->kernel;
      net.params.push_back(detail::draw(Shape{c->out_channels, c->in_channels, c->kernel, c->kernel},
                                        scheme, c->in_channels * kk, c->out_channels * kk, ws));
      net.param_names.push_back(prefix + "weight");
      if (c->has_bias) {
        net.params.push_back(scheme == InitScheme::SN
                                 ? detail::draw(Shape{c->out_channels}, scheme, 1, 1, bs)
                                 : Tensor(Shape{c->out_channels}, 0.0));
        net.param_names.push_back(prefix + "bias");
      }
    } else if (const auto* b = std::get_if<BatchNorm>(&spec.layers[i])) {
      net.params.emplace_back(Shape{b->num_features}, 1.0);
      net.param_names.push_back(prefix + "gamma");
      net.params.emplace_back(Shape{b->num_features}, 0.0);
      net.param_names.push_back(prefix + "beta");
      net.buffers.emplace_back(Shape{b->num_features}, 0.0);
      net.buffer_names.push_back(prefix + "running_mean");
      net.buffers.emplace_back(Shape{b->num_features}, 1.0);
      net.buffer_names.push_back(prefix + "running_var");
    }
  }
  return net;
}

/// Knobs for a single forward pass on a tape.
struct ForwardOptions {
  Mode mode = Mode::Eval;
  /// Dropout masks in train mode; required when the architecture has dropout.
  std::uint64_t dropout_seed = 0;
  /// Receives batch statistics of every batch-norm layer in train mode.
  std::vector<ad::BatchStats>* bn_stats = nullptr;
};

/// Dropout mask with inverted scaling: kept units are multiplied by 1/(1-rate).
inline Tensor dropout_mask(const Shape& shape, double rate, std::uint64_t seed) {
  Tensor m(shape);
  CounterRng rng(seed);
  const double keep = 1.0 / (1.0 - rate);
  for (double& v : m.data()) v = rng.uniform() < rate ? 0.0 : keep;
  return m;
}

/// Records the network on `tape`. `params` are the tape nodes of
/// net.params in order; `x` is a batch [N x input_shape...] or [N x D].
inline ad::Var forward([[maybe_unused]] ad::GradTape& tape, const Network& net, const std::vector<ad::Var>& params,
                       ad::Var x, const ForwardOptions& opt = {}) {
  const ArchitectureSpec& spec = net.spec;
  if (params.size() != net.params.size()) throw ShapeError("forward: parameter count mismatch");
  const Shape& xs = x.shape();
  if (xs.empty() || x.value().size() / xs[0] != spec.input_dim()) {
    throw ShapeError("forward: input " + shape_str(xs) + " does not match network input " +
                     shape_str(spec.input_shape));
  }
  const std::size_t n = xs[0];
  Shape want{n};
  want.insert(want.end(), spec.input_shape.begin(), spec.input_shape.end());
  ad::Var h = xs == want ? x : ad::reshape(x, want);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const std::size_t p = net.param_offset[i];
    const auto& layer = spec.layers[i];
    if (const auto* d = std::get_if<Dense>(&layer)) {
      h = ad::matmul(h, params[p]);
      if (d->has_bias) h = ad::add_bias(h, params[p + 1]);
    } else if (const auto* c = std::get_if<Conv>(&layer)) {
      h = ad::conv2d(h, params[p], c->stride, c->padding);
      if (c->has_bias) h = ad::add_bias(h, params[p + 1]);
    } else if (const auto* m = std::get_if<MaxPool>(&layer)) {
      h = ad::maxpool2d(h, m->kernel);
    } else if (const auto* dr = std::get_if<Dropout>(&layer)) {
      if (opt.mode == Mode::Train && dr->rate > 0.0) {
        h = ad::mul_const(h, dropout_mask(h.shape(), dr->rate, derive_seed(opt.dropout_seed, {i})));
      }
    } else if (std::holds_alternative<BatchNorm>(layer)) {
      if (opt.mode == Mode::Train) {
        ad::BatchStats st;
        h = ad::batchnorm_train(h, params[p], params[p + 1], net.bn.eps, &st);
        if (opt.bn_stats) opt.bn_stats->push_back(std::move(st));
      } else {
        const std::size_t b = net.buffer_offset[i];
        h = ad::batchnorm_eval(h, params[p], params[p + 1], net.buffers[b], net.buffers[b + 1],
                               net.bn.eps);
      }
    } else if (const auto* a = std::get_if<Activation>(&layer)) {
      h = ad::activation(h, a->act);
    } else {
      h = ad::flatten(h);
    }
  }
  return h;
}

/// Plain evaluation: logits f(x) for a batch. Uses net.mode; in eval mode
/// the result is deterministic.
inline Tensor forward(const Network& net, const Tensor& x, std::uint64_t dropout_seed = 0) {
  ad::GradTape tape(false);
  tape.set_branch_tracking(false);
  std::vector<ad::Var> params;
  params.reserve(net.params.size());
  for (const auto& p : net.params) params.push_back(tape.constant(p));
  ad::Var in = tape.constant(x);
  ForwardOptions opt;
  opt.mode = net.mode;
  opt.dropout_seed = dropout_seed;
  return forward(tape, net, params, in, opt).value();
}

/// Updates batch-norm running statistics from one train-mode batch.
/// The running variance uses the unbiased batch variance.
inline void update_running_stats(Network& net, const std::vector<ad::BatchStats>& stats) {
  std::size_t k = 0;
  const double m = net.bn.momentum;
  for (std::size_t i = 0; i < net.spec.layers.size(); ++i) {
    if (!std::holds_alternative<BatchNorm>(net.spec.layers[i])) continue;
    const auto& st = stats.at(k++);
    Tensor& rm = net.buffers[net.buffer_offset[i]];
    Tensor& rv = net.buffers[net.buffer_offset[i] + 1];
    const double unbias =
        st.count > 1 ? static_cast<double>(st.count) / static_cast<double>(st.count - 1) : 1.0;
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = (1.0 - m) * rm[c] + m * st.mean[c];
      rv[c] = (1.0 - m) * rv[c] + m * st.var[c] * unbias;
    }
  }
}

/// Empirical second moments, one entry per trainable (dense/conv) layer.
struct ParamMoments {
  std::vector<double> sigma2_w;
  std::vector<double> sigma2_b;  // 0 for bias-free layers
};

inline ParamMoments param_second_moments(const Network& net) {
  ParamMoments m;
  for (std::size_t l = 0; l < net.num_trainable(); ++l) {
    m.sigma2_w.push_back(mean_square(net.weight(l)));
    m.sigma2_b.push_back(net.has_bias(l) ? mean_square(net.bias(l)) : 0.0);
  }
  return m;
}

/// Multiplies one trainable layer's weight and bias by constant factors.
inline void scale_trainable_layer(Network& net, std::size_t l, double weight_factor,
                                  double bias_factor) {
  net.weight(l) *= weight_factor;
  if (net.has_bias(l)) net.bias(l) *= bias_factor;
}

/// Copy of `net` whose final dense layer (weights and bias) is multiplied by
/// `factor`, so the logits scale by exactly that factor.
inline Network scale_output_layer(const Network& net, double factor) {
  if (!(factor > 0.0)) throw Error("output scaling factor must be positive");
  if (net.trainable_layers.empty() ||
      !std::holds_alternative<Dense>(net.spec.layers[net.trainable_layers.back()])) {
    throw Error("scale_output_layer: last trainable layer is not dense");
  }
  Network out = net;
  scale_trainable_layer(out, out.num_trainable() - 1, factor, factor);
  return out;
}

// ---------------------------------------------------------------------------
// Parameter files: a flat little-endian float64 blob plus a JSON manifest
// giving the architecture and each tensor's name, shape and offset.

class ParamFileError : public Error {
 public:
  using Error::Error;
};

inline void save_parameters(const Network& net, const std::filesystem::path& manifest_path) {
  std::filesystem::path blob_path = manifest_path;
  blob_path.replace_extension(".bin");
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<unsigned char> bytes;
  std::size_t offset = 0;
  auto append = [&](const std::string& name, const std::string& kind, const Tensor& t) {
    tensors.push_back({{"name", name}, {"kind", kind}, {"shape", t.shape()}, {"offset", offset},
                       {"count", t.size()}});
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<unsigned char>(bits >> (8 * b)));
    }
    offset += t.size();
  };
  for (std::size_t i = 0; i < net.params.size(); ++i) append(net.param_names[i], "param", net.params[i]);
  for (std::size_t i = 0; i < net.buffers.size(); ++i) append(net.buffer_names[i], "buffer", net.buffers[i]);

  std::ofstream blob(blob_path, std::ios::binary);
  blob.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!blob) throw ParamFileError("cannot write " + blob_path.string());

  nlohmann::json manifest = {{"format", "senlab-params-v1"},
                             {"architecture", to_json(net.spec)},
                             {"blob", blob_path.filename().string()},
                             {"dtype", "float64-le"},
                             {"checksum", hex64(fnv1a64(bytes.data(), bytes.size()))},
                             {"tensors", tensors}};
  std::ofstream out(manifest_path);
  out << manifest.dump(2) << '\n';
  if (!out) throw ParamFileError("cannot write " + manifest_path.string());
}

inline Network load_parameters(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw ParamFileError("cannot open " + manifest_path.string());
  const nlohmann::json manifest = nlohmann::json::parse(in);
  if (manifest.value("format", "") != "senlab-params-v1") {
    throw ParamFileError("unsupported parameter manifest format");
  }
  const ArchitectureSpec spec = architecture_from_json(manifest.at("architecture"));
  Network net = build(spec, InitScheme::HN, 0);

  const auto blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw ParamFileError("cannot open " + blob_path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  if (manifest.contains("checksum") &&
      manifest.at("checksum").get<std::string>() != hex64(fnv1a64(bytes.data(), bytes.size()))) {
    throw ParamFileError("parameter blob checksum mismatch");
  }
  auto read_tensor = [&](const nlohmann::json& entry, Tensor& dst) {
    if (entry.at("shape").get<Shape>() != dst.shape()) {
      throw ParamFileError("shape mismatch for " + entry.at("name").get<std::string>());
    }
    const auto off = entry.at("offset").get<std::size_t>();
    if ((off + dst.size()) * 8 > bytes.size()) throw ParamFileError("parameter blob truncated");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= std::uint64_t{bytes[(off + i) * 8 + static_cast<std::size_t>(b)]} << (8 * b);
      std::memcpy(&dst[i], &bits, sizeof bits);
    }
  };
  std::size_t pi = 0, bi = 0;
  for (const auto& entry : manifest.at("tensors")) {
    if (entry.at("kind") == "param") {
      read_tensor(entry, net.params.at(pi++));
    } else {
      read_tensor(entry, net.buffers.at(bi++));
    }
  }
  if (pi != net.params.size() || bi != net.buffers.size()) {
    throw ParamFileError("parameter manifest does not cover every tensor");
  }
  return net;
}

}  // namespace senlab::nnet
