#pragma once

// The five experiment commands. Each writes into cfg.out:
//   config.json        the effective configuration (with its hash)
//   <command>.csv      one row per (grid point, master seed), grid order
//   timings.csv        wall-clock columns, kept apart so the main CSV is
//                      byte-identical across reruns and job counts
//   correlations.json  Pearson rho per (metric, L) pair where applicable
//   logs/<command>.log
// Return value is the process exit code: 0 all gates pass, 1 a gate failed.
// Errors propagate as exceptions.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "senlab/data/manifest.hpp"
#include "senlab/ensemble.hpp"
#include "senlab/harness/config.hpp"
#include "senlab/harness/table.hpp"
#include "senlab/harness/verify.hpp"
#include "senlab/log.hpp"
#include "senlab/metrics/perturb.hpp"
#include "senlab/nnet/train.hpp"
#include "senlab/theory.hpp"

namespace senlab::harness {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Output directory

struct OutputDir {
  std::filesystem::path root;
  std::string hash;
};

inline OutputDir prepare_output(const ExperimentConfig& cfg, const std::string& command) {
  OutputDir o{cfg.out, config_hash(cfg)};
  std::filesystem::create_directories(o.root / "logs");
  auto j = to_json(cfg);
  j["kind"] = command;
  j["config_hash"] = o.hash;
  std::ofstream(o.root / "config.json") << j.dump(2) << '\n';
  log::set_file(o.root / "logs" / (command + ".log"));
  log::info(command + ": config hash " + o.hash + ", output " + o.root.string());
  return o;
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  out << j.dump(2) << '\n';
  if (!out) throw Error("cannot write " + p.string());
}

// ---------------------------------------------------------------------------
// Data

struct ExperimentData {
  data::Dataset train;
  data::Dataset test;
  double sigma2_x = 1.0;  // grand mean of squared training inputs
};

/// The dataset for one master seed. Synthetic generation and the split both
/// draw from streams of the master seed; CNN grids get image-shaped inputs.
inline ExperimentData load_data(const ExperimentConfig& cfg, std::uint64_t master) {
  data::DatasetManifest m = cfg.dataset;
  data::Dataset full = data::load_manifest(m, derive_seed(master, {0xDA7A}));
  data::SplitSpec sp = m.split;
  sp.seed = derive_seed(master, {0x5B17, m.split.seed});
  ExperimentData out;
  if (full.task == data::Task::Regression) {
    auto prep = data::prepare_regression(full, sp);
    out.train = std::move(prep.train);
    out.test = std::move(prep.test);
  } else {
    auto [tr, te] = data::split(full, sp);
    out.train = std::move(tr);
    out.test = std::move(te);
  }
  if (cfg.grid.family == "cnn") {
    for (auto* d : {&out.train, &out.test}) {
      Shape s{d->size()};
      s.insert(s.end(), cfg.grid.image.begin(), cfg.grid.image.end());
      if (shape_numel(s) != d->inputs.size()) throw ConfigError("grid.image does not match the input size");
      d->inputs = d->inputs.reshaped(s);
    }
  }
  out.sigma2_x = data::input_second_moment(out.train);
  return out;
}

inline nnet::LossKind loss_for(const data::Dataset& d) {
  return d.task == data::Task::Classification ? nnet::LossKind::CrossEntropy : nnet::LossKind::MSE;
}

// ---------------------------------------------------------------------------
// Per-network measurements

struct Trained {
  std::vector<nnet::Network> nets;
  std::vector<ensemble::MemberStatus> status;
  bool converged = true;
  std::size_t epochs = 0;     // max over members
  double final_loss = 0.0;    // max over members
  double seconds = 0.0;
};

/// One network (members == 1) or an ensemble, seeded from `master`.
inline Trained train_point(const ExperimentConfig& cfg, const nnet::ArchitectureSpec& spec,
                           const data::Dataset& train, std::uint64_t master, std::size_t members) {
  const auto t0 = metrics::detail::Clock::now();
  Trained t;
  if (members <= 1) {
    ensemble::MemberStatus st;
    st.seed = ensemble::member_seed(master, 0, false);
    nnet::Network net = nnet::build(spec, cfg.init, derive_seed(st.seed, {1}));
    nnet::TrainConfig tc = cfg.train;
    tc.seed = derive_seed(st.seed, {2});
    const auto h = nnet::train(net, train, tc, loss_for(train));
    st.converged = h.converged;
    st.epochs = h.epochs();
    st.final_loss = h.epoch_loss.back();
    t.nets.push_back(std::move(net));
    t.status.push_back(st);
  } else {
    ensemble::EnsembleConfig ec;
    ec.n_members = members;
    ec.identical_seeds = cfg.identical_seeds;
    auto e = ensemble::train_ensemble(spec, cfg.init, train, cfg.train, loss_for(train), ec, master);
    t.nets = std::move(e.members);
    t.status = std::move(e.status);
  }
  for (const auto& s : t.status) {
    t.converged = t.converged && s.converged && !s.diverged;
    t.epochs = std::max(t.epochs, s.epochs);
    t.final_loss = std::max(t.final_loss, s.final_loss);
  }
  if (t.nets.empty()) throw Error("every ensemble member diverged");
  t.seconds = metrics::detail::seconds_since(t0);
  return t;
}

struct Measured {
  metrics::MetricReport m;
  double t_S_post = 0.0;
  double t_J_pre = 0.0;
};

/// Metrics of one trained network on the test split. Regression nets have
/// no softmax: post-softmax columns and the error rate are NaN and L is MSE.
inline Measured measure(const nnet::Network& net, const data::Dataset& test, const metrics::PerturbConfig& pc) {
  Measured out;
  auto& m = out.m;
  const bool cls = test.task == data::Task::Classification;
  metrics::PerturbConfig p = pc;
  p.bootstrap = 0;
  p.tap = metrics::Tap::PreSoftmax;
  const auto s = metrics::estimate_sensitivity(net, test.inputs, p);
  m.S_after = s.value;
  m.t_S = s.seconds;
  const std::size_t nj = std::min(pc.n_inputs, test.size());
  const auto jpre = metrics::jacobian_frobenius(net, test.inputs, metrics::Tap::PreSoftmax, nj);
  m.J_pre = jpre.value;
  out.t_J_pre = jpre.seconds;
  if (cls) {
    p.tap = metrics::Tap::PostSoftmax;
    const auto sp = metrics::estimate_sensitivity(net, test.inputs, p);
    m.S_post = sp.value;
    out.t_S_post = sp.seconds;
    const auto jpost = metrics::jacobian_frobenius(net, test.inputs, metrics::Tap::PostSoftmax, nj);
    m.J_post = jpost.value;
    m.t_J = jpost.seconds;
    const auto ce = metrics::cross_entropy_loss(net, test);
    m.L = ce.value;
    m.ce_clamped = ce.clamped;
    m.L_mse = metrics::mse_loss(net, test);
    m.err = metrics::classification_error(net, test);
  } else {
    m.S_post = m.J_post = m.err = kNaN;
    m.t_J = out.t_J_pre;
    m.L_mse = metrics::mse_loss(net, test);
    m.L = m.L_mse;
  }
  return out;
}

/// Mean S over `draws` untrained networks (fresh parameters per draw).
inline McSummary measure_S_before(const ExperimentConfig& cfg, const nnet::ArchitectureSpec& spec,
                                  const Tensor& inputs, std::uint64_t seed) {
  metrics::PerturbConfig p;
  p.noise_std = cfg.perturb.noise_std;
  p.n_inputs = cfg.s_before.n_inputs;
  p.n_noise = cfg.s_before.n_noise;
  return mc_sensitivity(spec, cfg.init, inputs, p, cfg.s_before.draws, cfg.s_before.draws, 0.0, seed, 1);
}

struct Task {
  std::size_t grid_index;
  std::uint64_t master;
};

inline std::vector<Task> tasks_for(const ExperimentConfig& cfg, std::size_t grid_size) {
  std::vector<Task> t;
  for (std::size_t s = 0; s < cfg.seeds; ++s)
    for (std::size_t g = 0; g < grid_size; ++g) t.push_back({g, cfg.seed + s});
  return t;
}

inline std::uint64_t point_seed(const Task& t) { return derive_seed(t.master, {0x6A1D, t.grid_index}); }

inline std::map<std::uint64_t, ExperimentData> load_all_data(const ExperimentConfig& cfg) {
  std::map<std::uint64_t, ExperimentData> d;
  for (std::size_t s = 0; s < cfg.seeds; ++s) d.emplace(cfg.seed + s, load_data(cfg, cfg.seed + s));
  return d;
}

inline std::size_t output_dim(const ExperimentData& d) { return d.train.output_dim(); }

// ---------------------------------------------------------------------------
// Correlations

struct Series {
  std::string name;
  std::vector<double> x, y;
};

/// rho for each named series; an undefined correlation is recorded with its
/// reason and, when `strict`, rethrown.
inline nlohmann::json correlate(const std::vector<Series>& series, bool strict) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& s : series) {
    std::vector<double> x, y;
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) {
        x.push_back(s.x[i]);
        y.push_back(s.y[i]);
      }
    try {
      const auto r = ensemble::pearson(x, y, s.name, "L");
      out[s.name] = {{"rho", r.rho}, {"n", r.n}};
    } catch (const ensemble::UndefinedCorrelation& e) {
      if (strict) throw;
      out[s.name] = {{"rho", nullptr}, {"n", x.size()}, {"error", e.what()}};
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// verify-theory

inline int cmd_verify_theory(const ExperimentConfig& cfg, std::ostream& os = std::cout) {
  cfg.validate();
  const auto out = prepare_output(cfg, "verify-theory");
  CheckContext cx;
  cx.spec = cfg.verify;
  cx.noise_std = cfg.perturb.noise_std;
  cx.seed = cfg.seed;
  cx.jobs = cfg.jobs;
  const auto rep = run_verify_checks(cx);

  Table t(out.hash, {}), tt(out.hash, {});
  nlohmann::json j = nlohmann::json::array();
  os << std::left << std::setw(46) << "check" << std::setw(6) << "pass" << std::setw(14) << "measured"
     << std::setw(14) << "predicted" << std::setw(12) << "rel_error" << "tolerance\n";
  for (const auto& c : rep.checks) {
    t.add({{"check", c.name},
           {"ops", [&] {
              std::string s;
              for (const auto& o : c.ops) s += (s.empty() ? "" : ";") + o;
              return s;
            }()},
           {"measured", c.measured},
           {"predicted", c.predicted},
           {"std_err", c.std_err},
           {"rel_error", c.rel_error},
           {"tolerance", c.tolerance},
           {"pass", c.pass},
           {"detail", c.detail}});
    tt.add({{"check", c.name}, {"seconds", c.seconds}});
    j.push_back(c.to_json());
    os << std::setw(46) << c.name << std::setw(6) << (c.pass ? "PASS" : "FAIL") << std::setw(14)
       << format_double(c.measured).substr(0, 12) << std::setw(14) << format_double(c.predicted).substr(0, 12)
       << std::setw(12) << format_double(c.rel_error).substr(0, 10) << format_double(c.tolerance) << '\n';
  }
  t.write(out.root / "verify.csv");
  tt.write(out.root / "timings.csv");
  write_json(out.root / "verify.json", {{"checks", j}, {"all_pass", rep.all_pass()}, {"seconds", rep.seconds}});
  os << (rep.all_pass() ? "all checks passed" : "some checks FAILED") << " in " << std::fixed
     << std::setprecision(1) << rep.seconds << " s\n";
  os.unsetf(std::ios::fixed);
  return rep.all_pass() ? 0 : 1;
}

// ---------------------------------------------------------------------------
// sweep

inline const std::vector<std::string>& sweep_metrics() {
  static const std::vector<std::string> m{"S_before", "S_after", "S_post", "J_pre", "J_post", "pred_L", "err"};
  return m;
}

struct SweepPoint {
  GridPoint gp;
  Task task;
  std::size_t params = 0;
  Trained trained;
  McSummary s_before;
  double t_S_before = 0.0;
  Measured meas;  // averaged over members
  theory::MomentProfile declared, empirical;
  std::optional<ensemble::DecompositionReport> dec;
  std::map<std::string, double> values;  // metric columns used for correlations
};

inline std::vector<std::pair<std::string, Cell>> sweep_row(const SweepPoint& p, double sigma2_x,
                                                           double sigma2_eps) {
  const auto& m = p.meas.m;
  const double S = m.S_after;
  const double nan = kNaN;
  return {{"arch", p.gp.label},
          {"width", static_cast<std::int64_t>(p.gp.width)},
          {"depth", static_cast<std::int64_t>(p.gp.depth)},
          {"params", static_cast<std::int64_t>(p.params)},
          {"seed", static_cast<std::int64_t>(p.task.master)},
          {"members", static_cast<std::int64_t>(p.trained.nets.size())},
          {"converged", p.trained.converged},
          {"epochs", static_cast<std::int64_t>(p.trained.epochs)},
          {"final_train_loss", p.trained.final_loss},
          {"S_before", p.s_before.mean},
          {"S_before_se", p.s_before.std_err},
          {"S_after", S},
          {"S_post", m.S_post},
          {"J_pre", m.J_pre},
          {"J_post", m.J_post},
          {"L", m.L},
          {"L_MSE", m.L_mse},
          {"err", m.err},
          {"ce_clamped", static_cast<std::int64_t>(m.ce_clamped)},
          {"sigma2_x", sigma2_x},
          {"sigma2_eps", sigma2_eps},
          {"pred_S", theory::predict_S_general(p.declared)},
          {"pred_var", theory::predict_var_from_S(S, p.empirical)},
          {"pred_eps_var", theory::predict_eps_variance(S, p.empirical)},
          {"pred_L", theory::predict_L_from_S(S, p.empirical)},
          {"Sigma", theory::predict_Sigma(p.empirical)},
          {"ens_L_mse", p.dec ? p.dec->L_mse : nan},
          {"eps_bias", p.dec ? p.dec->eps_bias : nan},
          {"eps_variance", p.dec ? p.dec->eps_variance : nan},
          {"residual", p.dec ? p.dec->residual : nan}};
}

/// Element-wise mean of the members' metric reports.
inline Measured average(const std::vector<Measured>& ms) {
  Measured a;
  const double n = static_cast<double>(ms.size());
  for (const auto& x : ms) {
    a.m.S_after += x.m.S_after / n;
    a.m.S_post += x.m.S_post / n;
    a.m.J_pre += x.m.J_pre / n;
    a.m.J_post += x.m.J_post / n;
    a.m.L += x.m.L / n;
    a.m.L_mse += x.m.L_mse / n;
    a.m.err += x.m.err / n;
    a.m.ce_clamped += x.m.ce_clamped;
    a.m.t_S += x.m.t_S;
    a.m.t_J += x.m.t_J;
    a.t_S_post += x.t_S_post;
    a.t_J_pre += x.t_J_pre;
  }
  return a;
}

inline theory::MomentProfile mean_empirical_profile(const std::vector<nnet::Network>& nets, double s2x,
                                                    double s2e) {
  auto p = theory::empirical_profile(nets.front(), s2x, s2e);
  for (std::size_t i = 1; i < nets.size(); ++i) {
    const auto q = theory::empirical_profile(nets[i], s2x, s2e);
    for (std::size_t l = 0; l < p.sigma2_w.size(); ++l) {
      p.sigma2_w[l] += q.sigma2_w[l];
      p.sigma2_b[l] += q.sigma2_b[l];
    }
  }
  for (std::size_t l = 0; l < p.sigma2_w.size(); ++l) {
    p.sigma2_w[l] /= static_cast<double>(nets.size());
    p.sigma2_b[l] /= static_cast<double>(nets.size());
  }
  return p;
}

struct SweepResult {
  std::vector<SweepPoint> points;
  nlohmann::json correlations;
  int exit_code = 0;
};

inline SweepResult run_sweep(const ExperimentConfig& cfg, const OutputDir& out) {
  const auto datasets = load_all_data(cfg);
  const auto& first = datasets.begin()->second;
  const auto grid = expand_grid(cfg.grid, first.train.input_dim(), output_dim(first));
  const auto tasks = tasks_for(cfg, grid.size());
  const double e2 = cfg.perturb.noise_std * cfg.perturb.noise_std;
  log::info("sweep: " + std::to_string(grid.size()) + " grid points x " + std::to_string(cfg.seeds) + " seeds");

  SweepResult res;
  res.points = parallel_map(tasks.size(), cfg.jobs, [&](std::size_t i) {
    const Task& task = tasks[i];
    const auto& d = datasets.at(task.master);
    const std::uint64_t ps = point_seed(task);
    SweepPoint p;
    p.gp = grid[task.grid_index];
    p.task = task;
    const auto t0 = metrics::detail::Clock::now();
    p.s_before = measure_S_before(cfg, p.gp.spec, d.test.inputs, derive_seed(ps, {1}));
    p.t_S_before = metrics::detail::seconds_since(t0);
    p.trained = train_point(cfg, p.gp.spec, d.train, derive_seed(ps, {2}), cfg.members);
    p.params = p.trained.nets.front().parameter_count();
    metrics::PerturbConfig pc = cfg.perturb;
    pc.seed = derive_seed(ps, {3});
    std::vector<Measured> ms;
    for (const auto& net : p.trained.nets) ms.push_back(measure(net, d.test, pc));
    p.meas = average(ms);
    p.declared = theory::declared_profile(p.gp.spec, cfg.init, d.sigma2_x, e2);
    p.empirical = mean_empirical_profile(p.trained.nets, d.sigma2_x, e2);
    if (p.trained.nets.size() >= 2) p.dec = ensemble::decompose(p.trained.nets, d.test);
    if (cfg.save_models) {
      std::filesystem::create_directories(out.root / "models");
      for (std::size_t k = 0; k < p.trained.nets.size(); ++k)
        nnet::save_parameters(p.trained.nets[k], out.root / "models" /
                                                     (p.gp.label + "-s" + std::to_string(task.master) +
                                                      "-m" + std::to_string(k) + ".json"));
    }
    log::info("sweep: " + p.gp.label + " seed " + std::to_string(task.master) +
              (p.trained.converged ? " converged" : " NOT converged") + " after " +
              std::to_string(p.trained.epochs) + " epochs");
    return p;
  });

  Table t(out.hash, {}), tt(out.hash, {});
  for (auto& p : res.points) {
    const auto& d = datasets.at(p.task.master);
    const auto row = sweep_row(p, d.sigma2_x, e2);
    t.add(row);
    for (const auto& [k, v] : row)
      if (const auto* x = std::get_if<double>(&v)) p.values[k] = *x;
    tt.add({{"arch", p.gp.label},
            {"seed", static_cast<std::int64_t>(p.task.master)},
            {"t_train", p.trained.seconds},
            {"t_S_before", p.t_S_before},
            {"t_S", p.meas.m.t_S},
            {"t_S_post", p.meas.t_S_post},
            {"t_J_pre", p.meas.t_J_pre},
            {"t_J", p.meas.m.t_J},
            {"S_faster_than_J", p.meas.m.t_S < p.meas.m.t_J}});
  }
  t.write(out.root / "sweep.csv");
  tt.write(out.root / "timings.csv");

  // Correlations per master seed and pooled, converged rows only unless asked.
  auto series_for = [&](std::optional<std::uint64_t> seed) {
    std::vector<Series> ss;
    for (const auto& name : sweep_metrics()) {
      Series s{name, {}, {}};
      for (const auto& p : res.points) {
        if (seed && p.task.master != *seed) continue;
        if (!p.trained.converged && !cfg.include_nonconverged) continue;
        s.x.push_back(p.values.at(name));
        s.y.push_back(p.values.at("L"));
      }
      ss.push_back(std::move(s));
    }
    return ss;
  };
  nlohmann::json corr;
  nlohmann::json excluded = nlohmann::json::array();
  for (const auto& p : res.points)
    if (!p.trained.converged)
      excluded.push_back({{"arch", p.gp.label}, {"seed", p.task.master}, {"epochs", p.trained.epochs},
                          {"final_train_loss", p.trained.final_loss}});
  corr["nonconverged"] = excluded;
  corr["include_nonconverged"] = cfg.include_nonconverged;
  corr["per_seed"] = nlohmann::json::object();
  bool gate = true;
  for (std::size_t s = 0; s < cfg.seeds; ++s) {
    const std::uint64_t seed = cfg.seed + s;
    const auto c = correlate(series_for(seed), true);
    corr["per_seed"][std::to_string(seed)] = c;
    if (cfg.min_rho && !(c.at("S_after").at("rho").get<double>() > *cfg.min_rho)) gate = false;
  }
  if (cfg.seeds > 1) corr["pooled"] = correlate(series_for(std::nullopt), true);
  write_json(out.root / "correlations.json", corr);
  res.correlations = corr;
  res.exit_code = gate ? 0 : 1;
  return res;
}

inline int cmd_sweep(const ExperimentConfig& cfg, std::ostream& os = std::cout) {
  cfg.validate();
  const auto out = prepare_output(cfg, "sweep");
  const auto res = run_sweep(cfg, out);
  for (const auto& [seed, c] : res.correlations.at("per_seed").items()) {
    os << "seed " << seed << ':';
    for (const auto& name : sweep_metrics()) {
      const auto& e = c.at(name);
      os << "  rho(" << name << ",L)=" << (e.at("rho").is_null() ? "n/a" : format_double(e.at("rho").get<double>()).substr(0, 6));
    }
    os << '\n';
  }
  const auto nc = res.correlations.at("nonconverged").size();
  if (nc) os << nc << " non-converged run(s) excluded from correlations\n";
  if (cfg.min_rho) os << (res.exit_code == 0 ? "gate passed" : "gate FAILED") << ": rho(S_after, L) > " << *cfg.min_rho << '\n';
  return res.exit_code;
}

// ---------------------------------------------------------------------------
// rank

/// Checks the two preconditions for ranking untrained networks by S.
inline void require_rankable(const ExperimentConfig& cfg) {
  if (cfg.init != nnet::InitScheme::SN) {
    throw ConfigError("rank needs SN initialization: He and Xavier initialization techniques force the "
                      "sensitivity to be the same across architectures, so S_before cannot rank them");
  }
  if (cfg.grid.regularized()) {
    throw ConfigError("rank needs networks without dropout, batchnorm or max-pooling: these change "
                      "the network only after training, so S_before cannot reflect them");
  }
}

struct RankEntry {
  GridPoint gp;
  std::size_t params = 0;
  McSummary mc;
  double predicted = 0.0;
  std::size_t rank_mc = 0;
  std::size_t rank_pred = 0;
};

struct RankResult {
  std::vector<RankEntry> entries;
  ensemble::FootruleReport footrule;
};

inline RankResult run_rank(const ExperimentConfig& cfg, const OutputDir& out) {
  require_rankable(cfg);
  const auto d = load_data(cfg, cfg.seed);
  const auto grid = expand_grid(cfg.grid, d.train.input_dim(), output_dim(d));
  const double e2 = cfg.perturb.noise_std * cfg.perturb.noise_std;
  RankResult res;
  res.entries = parallel_map(grid.size(), cfg.jobs, [&](std::size_t g) {
    RankEntry e;
    e.gp = grid[g];
    e.params = nnet::build(e.gp.spec, cfg.init, 0).parameter_count();
    e.mc = measure_S_before(cfg, e.gp.spec, d.test.inputs, point_seed({g, cfg.seed}));
    const auto widths = nnet::hidden_widths(e.gp.spec);
    const bool equal = cfg.grid.family == "fc" && cfg.grid.alpha == 1.0 && cfg.grid.beta == 0.0 &&
                       !widths.empty() && std::all_of(widths.begin(), widths.end(), [&](auto w) { return w == widths[0]; });
    e.predicted = equal ? theory::predict_S_fc(static_cast<double>(d.train.input_dim()),
                                               static_cast<double>(e.gp.spec.output_dim),
                                               static_cast<double>(widths[0]), static_cast<int>(widths.size()), e2)
                        : theory::predict_S_general(theory::declared_profile(e.gp.spec, cfg.init, d.sigma2_x, e2));
    return e;
  });
  std::vector<double> mc, pred, params;
  for (const auto& e : res.entries) {
    mc.push_back(e.mc.mean);
    pred.push_back(e.predicted);
    params.push_back(static_cast<double>(e.params));
  }
  const auto rm = ensemble::ranks(mc, params), rp = ensemble::ranks(pred, params);
  for (std::size_t i = 0; i < res.entries.size(); ++i) {
    res.entries[i].rank_mc = rm[i];
    res.entries[i].rank_pred = rp[i];
  }
  res.footrule = ensemble::spearman_footrule(rm, rp);

  Table t(out.hash, {});
  for (const auto& e : res.entries)
    t.add({{"arch", e.gp.label},
           {"width", static_cast<std::int64_t>(e.gp.width)},
           {"depth", static_cast<std::int64_t>(e.gp.depth)},
           {"params", static_cast<std::int64_t>(e.params)},
           {"S_before", e.mc.mean},
           {"S_before_se", e.mc.std_err},
           {"pred_S", e.predicted},
           {"rank_mc", static_cast<std::int64_t>(e.rank_mc)},
           {"rank_pred", static_cast<std::int64_t>(e.rank_pred)}});
  t.write(out.root / "rank.csv");
  write_json(out.root / "correlations.json",
             {{"footrule_distance", res.footrule.distance}, {"footrule_agreement", res.footrule.agreement},
              {"n", res.entries.size()}});
  return res;
}

inline int cmd_rank(const ExperimentConfig& cfg, std::ostream& os = std::cout) {
  cfg.validate();
  const auto out = prepare_output(cfg, "rank");
  const auto res = run_rank(cfg, out);
  std::vector<const RankEntry*> order(res.entries.size());
  for (const auto& e : res.entries) order[e.rank_mc] = &e;
  os << std::left << std::setw(6) << "rank" << std::setw(22) << "arch" << std::setw(14) << "S_before"
     << std::setw(14) << "pred_S" << "pred_rank\n";
  for (const auto* e : order)
    os << std::setw(6) << e->rank_mc << std::setw(22) << e->gp.label << std::setw(14)
       << format_double(e->mc.mean).substr(0, 12) << std::setw(14) << format_double(e->predicted).substr(0, 12)
       << e->rank_pred << '\n';
  os << "footrule distance " << res.footrule.distance << ", agreement " << format_double(res.footrule.agreement) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// decompose

struct DecomposeResult {
  std::vector<SweepPoint> points;
  double worst_relative_residual = 0.0;
  nlohmann::json correlations;
};

inline constexpr double kResidualGate = 1e-10;

inline DecomposeResult run_decompose(const ExperimentConfig& cfg, const OutputDir& out) {
  if (cfg.members < 2) {
    throw ConfigError("decompose needs at least 2 ensemble members: the variance term is undefined for " +
                      std::to_string(cfg.members));
  }
  const auto datasets = load_all_data(cfg);
  const auto& first = datasets.begin()->second;
  const auto grid = expand_grid(cfg.grid, first.train.input_dim(), output_dim(first));
  const auto tasks = tasks_for(cfg, grid.size());
  const double e2 = cfg.perturb.noise_std * cfg.perturb.noise_std;
  DecomposeResult res;
  res.points = parallel_map(tasks.size(), cfg.jobs, [&](std::size_t i) {
    const Task& task = tasks[i];
    const auto& d = datasets.at(task.master);
    const std::uint64_t ps = point_seed(task);
    SweepPoint p;
    p.gp = grid[task.grid_index];
    p.task = task;
    p.trained = train_point(cfg, p.gp.spec, d.train, derive_seed(ps, {2}), cfg.members);
    if (p.trained.nets.size() < 2) throw Error("fewer than 2 ensemble members survived training");
    p.params = p.trained.nets.front().parameter_count();
    metrics::PerturbConfig pc = cfg.perturb;
    pc.seed = derive_seed(ps, {3});
    pc.bootstrap = 0;
    double s = 0.0;
    for (const auto& net : p.trained.nets) s += metrics::estimate_sensitivity(net, d.test.inputs, pc).value;
    p.meas.m.S_after = s / static_cast<double>(p.trained.nets.size());
    p.empirical = mean_empirical_profile(p.trained.nets, d.sigma2_x, e2);
    p.dec = ensemble::decompose(p.trained.nets, d.test);
    return p;
  });
  Table t(out.hash, {});
  std::vector<double> S, V;
  for (const auto& p : res.points) {
    res.worst_relative_residual = std::max(res.worst_relative_residual, p.dec->relative_residual());
    t.add({{"arch", p.gp.label},
           {"width", static_cast<std::int64_t>(p.gp.width)},
           {"depth", static_cast<std::int64_t>(p.gp.depth)},
           {"seed", static_cast<std::int64_t>(p.task.master)},
           {"members", static_cast<std::int64_t>(p.trained.nets.size())},
           {"converged", p.trained.converged},
           {"L_mse", p.dec->L_mse},
           {"eps_bias", p.dec->eps_bias},
           {"eps_variance", p.dec->eps_variance},
           {"residual", p.dec->residual},
           {"S_after", p.meas.m.S_after},
           {"pred_var", theory::predict_var_from_S(p.meas.m.S_after, p.empirical)},
           {"pred_eps_var", theory::predict_eps_variance(p.meas.m.S_after, p.empirical)}});
    if (p.trained.converged || cfg.include_nonconverged) {
      S.push_back(p.meas.m.S_after);
      V.push_back(p.dec->eps_variance);
    }
  }
  t.write(out.root / "decompose.csv");
  res.correlations = correlate({{"S_after_vs_eps_variance", S, V}}, false);
  res.correlations["worst_relative_residual"] = res.worst_relative_residual;
  write_json(out.root / "correlations.json", res.correlations);
  return res;
}

inline int cmd_decompose(const ExperimentConfig& cfg, std::ostream& os = std::cout) {
  cfg.validate();
  const auto out = prepare_output(cfg, "decompose");
  const auto res = run_decompose(cfg, out);
  const auto& c = res.correlations.at("S_after_vs_eps_variance");
  os << res.points.size() << " decompositions, worst relative residual "
     << format_double(res.worst_relative_residual) << '\n';
  os << "rho(S_after, eps_variance) = " << (c.at("rho").is_null() ? "n/a" : format_double(c.at("rho").get<double>())) << '\n';
  const bool ok = res.worst_relative_residual <= kResidualGate;
  os << (ok ? "identity gate passed" : "identity gate FAILED") << '\n';
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrationRow {
  GridPoint gp;
  std::uint64_t master = 0;
  ensemble::CalibrationResult cal;
  double err_before = 0.0, err_after = 0.0;
  double S_before_cal = 0.0, S_after_cal = 0.0;
};

struct CalibrateResult {
  std::vector<CalibrationRow> rows;
  nlohmann::json correlations;
  bool gates_pass = true;
};

inline std::filesystem::path model_path(const std::filesystem::path& dir, const std::string& label,
                                        std::uint64_t seed) {
  return dir / (label + "-s" + std::to_string(seed) + "-m0.json");
}

/// Temperature scaling fitted on the test split of each network, then the
/// pairwise correlations of (L, S, error) before and after.
inline CalibrateResult run_calibrate(const ExperimentConfig& cfg, const OutputDir& out) {
  const auto datasets = load_all_data(cfg);
  const auto& first = datasets.begin()->second;
  if (first.train.task != data::Task::Classification) throw ConfigError("calibrate needs a classification dataset");
  const auto grid = expand_grid(cfg.grid, first.train.input_dim(), output_dim(first));
  const auto tasks = tasks_for(cfg, grid.size());
  CalibrateResult res;
  res.rows = parallel_map(tasks.size(), cfg.jobs, [&](std::size_t i) {
    const Task& task = tasks[i];
    const auto& d = datasets.at(task.master);
    CalibrationRow r;
    r.gp = grid[task.grid_index];
    r.master = task.master;
    nnet::Network net;
    if (!cfg.models_dir.empty()) {
      net = nnet::load_parameters(model_path(cfg.models_dir, r.gp.label, task.master));
    } else {
      net = std::move(train_point(cfg, r.gp.spec, d.train, derive_seed(point_seed(task), {2}), 1).nets.front());
    }
    const Tensor logits = metrics::detail::eval_outputs(net, d.test.inputs, metrics::Tap::PreSoftmax);
    r.cal = ensemble::temperature_scale(logits, d.test.targets);
    r.err_before = metrics::classification_error_from_logits(logits, d.test.targets);
    r.err_after = metrics::classification_error_from_logits(ensemble::scale_logits(logits, r.cal.T), d.test.targets);
    metrics::PerturbConfig pc = cfg.perturb;
    pc.seed = derive_seed(point_seed(task), {3});
    pc.bootstrap = 0;
    const auto [a, b] = metrics::sensitivity_under_output_scaling(net, 1.0 / r.cal.T, d.test.inputs, pc);
    r.S_before_cal = a.value;
    r.S_after_cal = b.value;
    return r;
  });
  Table t(out.hash, {});
  std::vector<double> Lb, La, Sb, Sa, E;
  for (const auto& r : res.rows) {
    const bool same_err = std::memcmp(&r.err_before, &r.err_after, sizeof(double)) == 0;
    res.gates_pass = res.gates_pass && same_err && r.cal.ce_after <= r.cal.ce_before;
    t.add({{"arch", r.gp.label},
           {"seed", static_cast<std::int64_t>(r.master)},
           {"T_star", r.cal.T},
           {"ce_before_cal", r.cal.ce_before},
           {"ce_after_cal", r.cal.ce_after},
           {"err_before", r.err_before},
           {"err_after", r.err_after},
           {"S_before_cal", r.S_before_cal},
           {"S_after_cal", r.S_after_cal},
           {"unimodal", r.cal.unimodal},
           {"grid_fallback", r.cal.grid_fallback}});
    Lb.push_back(r.cal.ce_before);
    La.push_back(r.cal.ce_after);
    Sb.push_back(r.S_before_cal);
    Sa.push_back(r.S_after_cal);
    E.push_back(r.err_before);
  }
  t.write(out.root / "calibrate.csv");
  res.correlations = {{"before", correlate({{"L_vs_S", Lb, Sb}, {"L_vs_err", Lb, E}, {"S_vs_err", Sb, E}}, false)},
                      {"after", correlate({{"L_vs_S", La, Sa}, {"L_vs_err", La, E}, {"S_vs_err", Sa, E}}, false)}};
  write_json(out.root / "correlations.json", res.correlations);
  return res;
}

inline int cmd_calibrate(const ExperimentConfig& cfg, std::ostream& os = std::cout) {
  cfg.validate();
  const auto out = prepare_output(cfg, "calibrate");
  const auto res = run_calibrate(cfg, out);
  os << std::left << std::setw(22) << "arch" << std::setw(8) << "seed" << std::setw(12) << "T*" << std::setw(14)
     << "CE before" << std::setw(14) << "CE after" << "error\n";
  for (const auto& r : res.rows)
    os << std::setw(22) << r.gp.label << std::setw(8) << r.master << std::setw(12) << format_double(r.cal.T).substr(0, 10)
       << std::setw(14) << format_double(r.cal.ce_before).substr(0, 12) << std::setw(14)
       << format_double(r.cal.ce_after).substr(0, 12) << format_double(r.err_before) << '\n';
  for (const char* when : {"before", "after"}) {
    os << when << " calibration:";
    for (const auto& [k, v] : res.correlations.at(when).items())
      os << "  rho(" << k << ")=" << (v.at("rho").is_null() ? "n/a" : format_double(v.at("rho").get<double>()).substr(0, 6));
    os << '\n';
  }
  os << (res.gates_pass ? "calibration gates passed" : "calibration gates FAILED") << '\n';
  return res.gates_pass ? 0 : 1;
}

/// Dispatch by command name.
inline int run_command(const std::string& name, const ExperimentConfig& cfg, std::ostream& os = std::cout) {
  if (name == "verify-theory") return cmd_verify_theory(cfg, os);
  if (name == "sweep") return cmd_sweep(cfg, os);
  if (name == "rank") return cmd_rank(cfg, os);
  if (name == "decompose") return cmd_decompose(cfg, os);
  if (name == "calibrate") return cmd_calibrate(cfg, os);
  throw ConfigError("unknown command '" + name + "'");
}

}  // namespace senlab::harness
