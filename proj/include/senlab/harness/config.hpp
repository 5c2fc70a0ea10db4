#pragma once

// Experiment configuration: one JSON document per run.
//
//   {"kind": "sweep", "seed": 1, "seeds": 5, "init": "SN",
//    "grid": {"family": "fc", "widths": [100, 200], "depths": [1, 2]},
//    "dataset": {"kind": "synthetic", "n": 2000, "d": 32, "k": 10},
//    "train": {"lr": 0.001}, "perturb": {"noise_std": 0.1}}
//
// Missing keys keep their defaults. `out` and `jobs` never change results and
// are left out of the config hash.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "senlab/data/manifest.hpp"
#include "senlab/hash.hpp"
#include "senlab/metrics/perturb.hpp"
#include "senlab/nnet/architecture.hpp"
#include "senlab/nnet/train.hpp"

namespace senlab::harness {

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Architecture grid. FC: every (width, depth) pair. CNN: one network per
/// channel count, with `units_per_channel` * channels hidden units.
struct GridSpec {
  std::string family = "fc";
  std::vector<std::size_t> widths{100, 200, 300, 400, 500};
  std::vector<std::size_t> depths{1, 2, 3, 4};
  std::vector<std::size_t> channels{5, 10, 15, 20, 25};
  std::size_t conv_layers = 2;
  std::size_t units_per_channel = 20;
  Shape image{1, 8, 8};  // CNN input shape {C, H, W}
  bool bias = true;
  double dropout = 0.0;
  bool batchnorm = false;
  bool maxpool = false;
  double alpha = 1.0;
  double beta = 0.0;

  std::size_t size() const {
    return family == "cnn" ? channels.size() : widths.size() * depths.size();
  }
  bool regularized() const { return dropout > 0.0 || batchnorm || maxpool; }
};

/// Sample counts for S on untrained networks (mean over parameter draws).
struct SBeforeSpec {
  std::size_t draws = 10;
  std::size_t n_inputs = 64;
  std::size_t n_noise = 32;
};

/// verify-theory knobs. `tolerance` overrides every Monte-Carlo tolerance.
struct VerifySpec {
  std::optional<double> tolerance;
  std::size_t draws = 100;       // parameter draws for the S checks
  std::size_t n_inputs = 64;
  std::size_t n_noise = 32;
  std::size_t ensemble = 400;    // random networks for the variance checks
  std::size_t var_inputs = 256;
};

struct ExperimentConfig {
  std::string kind = "sweep";
  GridSpec grid;
  nnet::InitScheme init = nnet::InitScheme::SN;
  /// S_after / J measurement. Defaults pair one noise draw with each test
  /// input so S and J see the same number of inputs.
  metrics::PerturbConfig perturb = [] {
    metrics::PerturbConfig p;
    p.n_inputs = 1000;
    p.n_noise = 1;
    return p;
  }();
  SBeforeSpec s_before;
  nnet::TrainConfig train;
  data::DatasetManifest dataset;
  std::size_t members = 1;  // > 1 trains an ensemble per grid point
  bool identical_seeds = false;
  VerifySpec verify;
  std::uint64_t seed = 0;
  std::size_t seeds = 1;  // master seeds seed, seed+1, ...
  bool include_nonconverged = false;
  std::optional<double> min_rho;  // sweep gate on rho(S_after, L)
  std::string models_dir;         // calibrate: load saved networks from here
  bool save_models = false;
  std::string out = "out";
  std::size_t jobs = 1;

  void validate() const {
    if (grid.family != "fc" && grid.family != "cnn") throw ConfigError("grid.family must be fc or cnn");
    if (grid.size() == 0) throw ConfigError("architecture grid is empty");
    for (auto w : grid.widths) if (w == 0) throw ConfigError("grid widths must be positive");
    for (auto c : grid.channels) if (c == 0) throw ConfigError("grid channels must be positive");
    if (grid.family == "fc") for (auto d : grid.depths) if (d == 0) throw ConfigError("grid depths must be >= 1");
    if (grid.family == "cnn" && grid.image.size() != 3) throw ConfigError("grid.image must be [C, H, W]");
    if (seeds == 0) throw ConfigError("seeds must be >= 1");
    if (s_before.draws == 0) throw ConfigError("s_before.draws must be >= 1");
    if (verify.tolerance && !(*verify.tolerance >= 0.0)) throw ConfigError("tolerance must be >= 0");
    perturb.validate();
    train.validate();
  }
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  const auto& g = c.grid;
  json j;
  j["kind"] = c.kind;
  j["grid"] = {{"family", g.family},       {"widths", g.widths},
               {"depths", g.depths},       {"channels", g.channels},
               {"conv_layers", g.conv_layers}, {"units_per_channel", g.units_per_channel},
               {"image", g.image},         {"bias", g.bias},
               {"dropout", g.dropout},     {"batchnorm", g.batchnorm},
               {"maxpool", g.maxpool},     {"alpha", g.alpha},
               {"beta", g.beta}};
  j["init"] = nnet::to_string(c.init);
  j["perturb"] = {{"noise_std", c.perturb.noise_std},
                  {"n_inputs", c.perturb.n_inputs},
                  {"n_noise", c.perturb.n_noise},
                  {"bootstrap", c.perturb.bootstrap}};
  j["s_before"] = {{"draws", c.s_before.draws},
                   {"n_inputs", c.s_before.n_inputs},
                   {"n_noise", c.s_before.n_noise}};
  j["train"] = {{"lr", c.train.lr},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"adam_eps", c.train.adam_eps},
                {"batch_size", c.train.batch_size},
                {"loss_threshold", c.train.loss_threshold},
                {"threshold_hits", c.train.threshold_hits},
                {"max_epochs", c.train.max_epochs}};
  j["dataset"] = c.dataset.to_json();
  j["members"] = c.members;
  j["identical_seeds"] = c.identical_seeds;
  j["verify"] = {{"draws", c.verify.draws},
                 {"n_inputs", c.verify.n_inputs},
                 {"n_noise", c.verify.n_noise},
                 {"ensemble", c.verify.ensemble},
                 {"var_inputs", c.verify.var_inputs}};
  j["verify"]["tolerance"] = c.verify.tolerance ? json(*c.verify.tolerance) : json();
  j["seed"] = c.seed;
  j["seeds"] = c.seeds;
  j["include_nonconverged"] = c.include_nonconverged;
  j["min_rho"] = c.min_rho ? json(*c.min_rho) : json();
  j["models_dir"] = c.models_dir;
  j["save_models"] = c.save_models;
  j["out"] = c.out;
  j["jobs"] = c.jobs;
  return j;
}

namespace detail {

template <class T>
void take(const nlohmann::json& j, const char* key, T& into) {
  if (j.contains(key) && !j.at(key).is_null()) into = j.at(key).get<T>();
}

template <class T>
void take_opt(const nlohmann::json& j, const char* key, std::optional<T>& into) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) into.reset();
  else into = j.at(key).get<T>();
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::take;
  ExperimentConfig c;
  try {
    take(j, "kind", c.kind);
    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      take(g, "family", c.grid.family);
      take(g, "widths", c.grid.widths);
      take(g, "depths", c.grid.depths);
      take(g, "channels", c.grid.channels);
      take(g, "conv_layers", c.grid.conv_layers);
      take(g, "units_per_channel", c.grid.units_per_channel);
      take(g, "image", c.grid.image);
      take(g, "bias", c.grid.bias);
      take(g, "dropout", c.grid.dropout);
      take(g, "batchnorm", c.grid.batchnorm);
      take(g, "maxpool", c.grid.maxpool);
      take(g, "alpha", c.grid.alpha);
      take(g, "beta", c.grid.beta);
    }
    if (j.contains("init")) c.init = nnet::init_scheme_from_string(j.at("init").get<std::string>());
    if (j.contains("perturb")) {
      const auto& p = j.at("perturb");
      take(p, "noise_std", c.perturb.noise_std);
      take(p, "n_inputs", c.perturb.n_inputs);
      take(p, "n_noise", c.perturb.n_noise);
      take(p, "bootstrap", c.perturb.bootstrap);
    }
    if (j.contains("s_before")) {
      const auto& s = j.at("s_before");
      take(s, "draws", c.s_before.draws);
      take(s, "n_inputs", c.s_before.n_inputs);
      take(s, "n_noise", c.s_before.n_noise);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      take(t, "lr", c.train.lr);
      take(t, "beta1", c.train.beta1);
      take(t, "beta2", c.train.beta2);
      take(t, "adam_eps", c.train.adam_eps);
      take(t, "batch_size", c.train.batch_size);
      take(t, "loss_threshold", c.train.loss_threshold);
      take(t, "threshold_hits", c.train.threshold_hits);
      take(t, "max_epochs", c.train.max_epochs);
    }
    if (j.contains("dataset")) c.dataset = data::DatasetManifest::from_json(j.at("dataset"));
    take(j, "members", c.members);
    take(j, "identical_seeds", c.identical_seeds);
    if (j.contains("verify")) {
      const auto& v = j.at("verify");
      detail::take_opt(v, "tolerance", c.verify.tolerance);
      take(v, "draws", c.verify.draws);
      take(v, "n_inputs", c.verify.n_inputs);
      take(v, "n_noise", c.verify.n_noise);
      take(v, "ensemble", c.verify.ensemble);
      take(v, "var_inputs", c.verify.var_inputs);
    }
    take(j, "seed", c.seed);
    take(j, "seeds", c.seeds);
    take(j, "include_nonconverged", c.include_nonconverged);
    detail::take_opt(j, "min_rho", c.min_rho);
    take(j, "models_dir", c.models_dir);
    take(j, "save_models", c.save_models);
    take(j, "out", c.out);
    take(j, "jobs", c.jobs);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config field: ") + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// FNV-1a of the canonical JSON (sorted keys) without `out` and `jobs`.
inline std::string config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("out");
  j.erase("jobs");
  return hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// Grid expansion

struct GridPoint {
  nnet::ArchitectureSpec spec;
  std::string label;
  std::size_t width = 0;  // FC width or CNN channels
  std::size_t depth = 0;  // FC hidden layers or CNN conv layers
};

/// Grid points in row-major order (depth outer, width inner for FC).
inline std::vector<GridPoint> expand_grid(const GridSpec& g, std::size_t input_dim, std::size_t k) {
  const nnet::ActivationSpec act(g.alpha, g.beta);
  std::vector<GridPoint> out;
  if (g.family == "fc") {
    nnet::FcOptions opt;
    opt.activation = act;
    opt.bias = g.bias;
    opt.dropout = g.dropout;
    opt.batchnorm = g.batchnorm;
    if (g.maxpool) throw ConfigError("maxpool needs the cnn family");
    for (std::size_t m : g.depths)
      for (std::size_t h : g.widths)
        out.push_back({nnet::fc_architecture(input_dim, h, m, k, opt),
                       "fc-H" + std::to_string(h) + "-M" + std::to_string(m), h, m});
  } else {
    if (shape_numel(g.image) != input_dim) {
      throw ConfigError("grid.image has " + std::to_string(shape_numel(g.image)) +
                        " entries, inputs have " + std::to_string(input_dim));
    }
    if (!g.bias) throw ConfigError("the cnn family always uses biases");
    nnet::CnnOptions opt;
    opt.activation = act;
    opt.maxpool = g.maxpool;
    opt.batchnorm = g.batchnorm;
    opt.dropout = g.dropout;
    for (std::size_t c : g.channels)
      out.push_back({nnet::cnn_architecture(g.image, c, g.conv_layers, c * g.units_per_channel, k, opt),
                     "cnn-C" + std::to_string(c) + "-L" + std::to_string(g.conv_layers), c,
                     g.conv_layers});
  }
  return out;
}

}  // namespace senlab::harness
