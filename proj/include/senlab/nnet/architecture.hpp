#pragma once

// Layer topology descriptions and their JSON form.
//
// JSON layer records follow the usual shorthand: Conv(filters, kernel,
// stride, padding), Maxpool(kernel), Linear(units), Dropout(rate).
//
//   {"input_shape": [1, 8, 8], "output_dim": 10, "layers": [
//     {"type": "conv", "in_channels": 1, "out_channels": 5, "kernel": 3,
//      "stride": 1, "padding": 1, "bias": true},
//     {"type": "activation", "alpha": 1, "beta": 0},
//     {"type": "maxpool", "kernel": 2},
//     {"type": "flatten"},
//     {"type": "dense", "in_units": 80, "out_units": 10, "bias": true}]}

#include <nlohmann/json.hpp>

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "senlab/ops.hpp"
#include "senlab/tensor.hpp"

namespace senlab::nnet {

using ActivationSpec = PositiveHomogeneous;

struct Dense {
  std::size_t in_units = 0;
  std::size_t out_units = 0;
  bool has_bias = true;
};

struct Conv {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool has_bias = true;
};

struct MaxPool {
  std::size_t kernel = 2;
};

struct Dropout {
  double rate = 0.5;
};

struct BatchNorm {
  std::size_t num_features = 0;
};

struct Activation {
  ActivationSpec act;
};

struct Flatten {};

using LayerSpec = std::variant<Dense, Conv, MaxPool, Dropout, BatchNorm, Activation, Flatten>;

inline bool is_trainable(const LayerSpec& l) {
  return std::holds_alternative<Dense>(l) || std::holds_alternative<Conv>(l);
}

struct ArchitectureSpec {
  /// Per-sample input shape: {D} for vectors, {C, H, W} for images.
  Shape input_shape;
  std::size_t output_dim = 0;
  std::vector<LayerSpec> layers;

  std::size_t input_dim() const { return shape_numel(input_shape); }
};

class ArchitectureError : public Error {
 public:
  using Error::Error;
};

/// Per-sample output shape of every layer; throws ArchitectureError when the
/// dimensions do not chain from the input to output_dim.
inline std::vector<Shape> infer_shapes(const ArchitectureSpec& spec) {
  if (spec.input_shape.empty() || shape_numel(spec.input_shape) == 0) {
    throw ArchitectureError("architecture needs a non-empty input shape");
  }
  if (spec.output_dim == 0) throw ArchitectureError("output_dim must be positive");
  std::vector<Shape> shapes;
  Shape cur = spec.input_shape;
  std::size_t last_trainable_out = 0;
  bool any_trainable = false;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const std::string where = "layer " + std::to_string(i) + ": ";
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Dense>) {
            if (cur.size() != 1 || cur[0] != l.in_units) {
              throw ArchitectureError(where + "dense expects " + std::to_string(l.in_units) +
                                      " inputs, receives " + shape_str(cur));
            }
            if (l.out_units == 0) throw ArchitectureError(where + "dense with zero units");
            cur = Shape{l.out_units};
            last_trainable_out = l.out_units;
            any_trainable = true;
          } else if constexpr (std::is_same_v<L, Conv>) {
            if (cur.size() != 3 || cur[0] != l.in_channels) {
              throw ArchitectureError(where + "conv expects " + std::to_string(l.in_channels) +
                                      " channels, receives " + shape_str(cur));
            }
            if (l.out_channels == 0 || l.kernel == 0 || l.stride == 0) {
              throw ArchitectureError(where + "conv with zero channels, kernel or stride");
            }
            if (cur[1] + 2 * l.padding < l.kernel || cur[2] + 2 * l.padding < l.kernel) {
              throw ArchitectureError(where + "conv kernel larger than padded input");
            }
            const std::size_t h = (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1;
            const std::size_t w = (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1;
            cur = Shape{l.out_channels, h, w};
            last_trainable_out = 0;
            any_trainable = true;
          } else if constexpr (std::is_same_v<L, MaxPool>) {
            if (cur.size() != 3 || l.kernel == 0 || cur[1] < l.kernel || cur[2] < l.kernel) {
              throw ArchitectureError(where + "maxpool needs an image at least as large as " +
                                      "its window, receives " + shape_str(cur));
            }
            cur = Shape{cur[0], cur[1] / l.kernel, cur[2] / l.kernel};
          } else if constexpr (std::is_same_v<L, Dropout>) {
            if (!(l.rate >= 0.0 && l.rate < 1.0)) {
              throw ArchitectureError(where + "dropout rate must lie in [0, 1)");
            }
          } else if constexpr (std::is_same_v<L, BatchNorm>) {
            if (cur.empty() || cur[0] != l.num_features) {
              throw ArchitectureError(where + "batchnorm over " + std::to_string(l.num_features) +
                                      " features, receives " + shape_str(cur));
            }
          } else if constexpr (std::is_same_v<L, Flatten>) {
            cur = Shape{shape_numel(cur)};
          }
        },
        spec.layers[i]);
    shapes.push_back(cur);
  }
  if (!any_trainable) throw ArchitectureError("architecture has no trainable layer");
  if (cur.size() != 1 || cur[0] != spec.output_dim) {
    throw ArchitectureError("network ends with " + shape_str(cur) + ", expected " +
                            std::to_string(spec.output_dim) + " outputs");
  }
  // The last trainable layer must itself emit the K outputs.
  for (std::size_t i = spec.layers.size(); i-- > 0;) {
    if (is_trainable(spec.layers[i])) {
      if (!std::holds_alternative<Dense>(spec.layers[i]) || last_trainable_out != spec.output_dim) {
        throw ArchitectureError("last trainable layer must be dense with output_dim units");
      }
      break;
    }
  }
  return shapes;
}

inline void validate(const ArchitectureSpec& spec) { (void)infer_shapes(spec); }

/// Fully connected stack D -> H_1 -> ... -> H_M -> K with the activation after
/// every hidden dense layer, optionally followed by batchnorm and dropout.
struct FcOptions {
  ActivationSpec activation = ActivationSpec::relu();
  bool bias = true;
  double dropout = 0.0;
  bool batchnorm = false;
};

inline ArchitectureSpec fc_architecture(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                                        std::size_t output_dim, const FcOptions& opt = {}) {
  ArchitectureSpec spec{Shape{input_dim}, output_dim, {}};
  std::size_t in = input_dim;
  for (std::size_t h : hidden) {
    spec.layers.emplace_back(Dense{in, h, opt.bias});
    if (opt.batchnorm) spec.layers.emplace_back(BatchNorm{h});
    spec.layers.emplace_back(Activation{opt.activation});
    if (opt.dropout > 0.0) spec.layers.emplace_back(Dropout{opt.dropout});
    in = h;
  }
  spec.layers.emplace_back(Dense{in, output_dim, opt.bias});
  validate(spec);
  return spec;
}

inline ArchitectureSpec fc_architecture(std::size_t input_dim, std::size_t width, std::size_t depth,
                                        std::size_t output_dim, const FcOptions& opt = {}) {
  return fc_architecture(input_dim, std::vector<std::size_t>(depth, width), output_dim, opt);
}

/// Small CNN: `conv_layers` x [Conv(channels, 3, 1, 1) - act (- maxpool 2)]
/// then Flatten - Linear(hidden) - act - Linear(K).
struct CnnOptions {
  ActivationSpec activation = ActivationSpec::relu();
  bool maxpool = false;
  bool batchnorm = false;
  double dropout = 0.0;
};

inline ArchitectureSpec cnn_architecture(const Shape& image, std::size_t channels,
                                         std::size_t conv_layers, std::size_t hidden,
                                         std::size_t output_dim, const CnnOptions& opt = {}) {
  if (image.size() != 3) throw ArchitectureError("cnn input must be {C, H, W}");
  ArchitectureSpec spec{image, output_dim, {}};
  Shape cur = image;
  for (std::size_t i = 0; i < conv_layers; ++i) {
    spec.layers.emplace_back(Conv{cur[0], channels, 3, 1, 1, true});
    if (opt.batchnorm) spec.layers.emplace_back(BatchNorm{channels});
    spec.layers.emplace_back(Activation{opt.activation});
    cur = Shape{channels, cur[1], cur[2]};
    if (opt.maxpool && cur[1] >= 2 && cur[2] >= 2) {
      spec.layers.emplace_back(MaxPool{2});
      cur = Shape{channels, cur[1] / 2, cur[2] / 2};
    }
  }
  spec.layers.emplace_back(Flatten{});
  spec.layers.emplace_back(Dense{shape_numel(cur), hidden, true});
  spec.layers.emplace_back(Activation{opt.activation});
  if (opt.dropout > 0.0) spec.layers.emplace_back(Dropout{opt.dropout});
  spec.layers.emplace_back(Dense{hidden, output_dim, true});
  validate(spec);
  return spec;
}

/// Hidden widths H_1..H_M of a plain FC spec (dense layers except the last).
inline std::vector<std::size_t> hidden_widths(const ArchitectureSpec& spec) {
  std::vector<std::size_t> out;
  for (const auto& l : spec.layers) {
    if (const auto* d = std::get_if<Dense>(&l)) out.push_back(d->out_units);
  }
  if (!out.empty()) out.pop_back();
  return out;
}

/// Fan-in of every trainable layer: in_units for dense, C*k*k for conv.
inline std::vector<std::size_t> trainable_fan_in(const ArchitectureSpec& spec) {
  std::vector<std::size_t> out;
  for (const auto& l : spec.layers) {
    if (const auto* d = std::get_if<Dense>(&l)) out.push_back(d->in_units);
    if (const auto* c = std::get_if<Conv>(&l)) out.push_back(c->in_channels * c->kernel * c->kernel);
  }
  return out;
}

inline bool has_regularization(const ArchitectureSpec& spec) {
  for (const auto& l : spec.layers) {
    if (std::holds_alternative<Dropout>(l) || std::holds_alternative<BatchNorm>(l) ||
        std::holds_alternative<MaxPool>(l)) {
      return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json layer_to_json(const LayerSpec& layer) {
  using nlohmann::json;
  return std::visit(
      [](const auto& l) -> json {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Dense>) {
          return {{"type", "dense"}, {"in_units", l.in_units}, {"out_units", l.out_units},
                  {"bias", l.has_bias}};
        } else if constexpr (std::is_same_v<L, Conv>) {
          return {{"type", "conv"},       {"in_channels", l.in_channels},
                  {"out_channels", l.out_channels}, {"kernel", l.kernel},
                  {"stride", l.stride},   {"padding", l.padding},
                  {"bias", l.has_bias}};
        } else if constexpr (std::is_same_v<L, MaxPool>) {
          return {{"type", "maxpool"}, {"kernel", l.kernel}};
        } else if constexpr (std::is_same_v<L, Dropout>) {
          return {{"type", "dropout"}, {"rate", l.rate}};
        } else if constexpr (std::is_same_v<L, BatchNorm>) {
          return {{"type", "batchnorm"}, {"num_features", l.num_features}};
        } else if constexpr (std::is_same_v<L, Activation>) {
          return {{"type", "activation"}, {"alpha", l.act.alpha}, {"beta", l.act.beta}};
        } else {
          return {{"type", "flatten"}};
        }
      },
      layer);
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "dense") {
    return Dense{j.at("in_units").get<std::size_t>(), j.at("out_units").get<std::size_t>(),
                 j.value("bias", true)};
  }
  if (type == "conv") {
    return Conv{j.at("in_channels").get<std::size_t>(), j.at("out_channels").get<std::size_t>(),
                j.at("kernel").get<std::size_t>(),      j.value("stride", std::size_t{1}),
                j.value("padding", std::size_t{0}),     j.value("bias", true)};
  }
  if (type == "maxpool") return MaxPool{j.at("kernel").get<std::size_t>()};
  if (type == "dropout") return Dropout{j.at("rate").get<double>()};
  if (type == "batchnorm") return BatchNorm{j.at("num_features").get<std::size_t>()};
  if (type == "activation") {
    return Activation{ActivationSpec(j.value("alpha", 1.0), j.value("beta", 0.0))};
  }
  if (type == "flatten") return Flatten{};
  throw ArchitectureError("unknown layer type '" + type + "'");
}

inline nlohmann::json to_json(const ArchitectureSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers) layers.push_back(layer_to_json(l));
  return {{"input_shape", spec.input_shape}, {"output_dim", spec.output_dim}, {"layers", layers}};
}

inline ArchitectureSpec architecture_from_json(const nlohmann::json& j) {
  ArchitectureSpec spec;
  spec.input_shape = j.at("input_shape").get<Shape>();
  spec.output_dim = j.at("output_dim").get<std::size_t>();
  for (const auto& l : j.at("layers")) spec.layers.push_back(layer_from_json(l));
  validate(spec);
  return spec;
}

/// Short human-readable descriptor, e.g. "fc-D32-100x3-K10".
inline std::string describe(const ArchitectureSpec& spec) {
  std::string s;
  for (const auto& l : spec.layers) {
    if (!s.empty()) s += '-';
    std::visit(
        [&](const auto& layer) {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, Dense>) {
            s += "L" + std::to_string(layer.out_units);
          } else if constexpr (std::is_same_v<L, Conv>) {
            s += "C" + std::to_string(layer.out_channels) + "k" + std::to_string(layer.kernel);
          } else if constexpr (std::is_same_v<L, MaxPool>) {
            s += "P" + std::to_string(layer.kernel);
          } else if constexpr (std::is_same_v<L, Dropout>) {
            s += "D" + std::to_string(static_cast<int>(layer.rate * 100));
          } else if constexpr (std::is_same_v<L, BatchNorm>) {
            s += "BN";
          } else if constexpr (std::is_same_v<L, Activation>) {
            s += "A";
          } else {
            s += "F";
          }
        },
        l);
  }
  return s;
}

}  // namespace senlab::nnet
