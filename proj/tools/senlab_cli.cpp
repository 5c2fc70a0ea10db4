// senlab: experiment driver.
//
//   senlab <command> [--config cfg.json] [--seed N] [--out DIR] [--jobs N]
//                    [--noise-std X] [--members N] [--tolerance X]
//
// Commands: verify-theory, sweep, rank, decompose, calibrate.
// Exit status: 0 when every gated check passes, 1 when one fails, 2 on
// usage, configuration or data errors. SENLAB_LOG sets log verbosity.

#include <CLI11.hpp>

#include <optional>
#include <string>

#include "senlab/harness/commands.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> jobs;
  std::optional<double> noise_std;
  std::optional<std::size_t> members;
  std::optional<double> tolerance;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "experiment configuration (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--noise-std", o.noise_std, "input noise standard deviation")->check(CLI::PositiveNumber);
  cmd->add_option("--members", o.members, "ensemble members per grid point");
  cmd->add_option("--tolerance", o.tolerance, "override every Monte-Carlo tolerance")->check(CLI::NonNegativeNumber);
}

senlab::harness::ExperimentConfig resolve(const Overrides& o) {
  using namespace senlab::harness;
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out = *o.out;
  if (o.jobs) cfg.jobs = *o.jobs;
  if (o.noise_std) cfg.perturb.noise_std = *o.noise_std;
  if (o.members) cfg.members = *o.members;
  if (o.tolerance) cfg.verify.tolerance = *o.tolerance;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  senlab::tune_allocator();
  CLI::App app{"Sensitivity and generalization experiments"};
  app.require_subcommand(1);
  Overrides o;
  for (const char* name : {"verify-theory", "sweep", "rank", "decompose", "calibrate"}) {
    add_common(app.add_subcommand(name, std::string("run ") + name), o);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    auto cfg = resolve(o);
    cfg.kind = command;
    return senlab::harness::run_command(command, cfg);
  } catch (const std::exception& e) {
    senlab::log::error(command + ": " + e.what());
    return 2;
  }
}
