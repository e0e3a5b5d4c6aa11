// fedlora: command-line front end for the federated LoRA simulator.
//
//   fedlora run        <config> [--set key=value]... [--resume] [--stop-after N]
//   fedlora gridsearch <config> [--set key=value]...
//   fedlora fdcheck    <config> [--set key=value]... [--inject-sign-flip]
//   fedlora drift      <config> [--set key=value]...
//   fedlora validate   <config> [--set key=value]...

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedlora/experiment.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, Common& c) {
  auto* sub = app.add_subcommand(name, help);
  sub->add_option("config", c.config, "configuration file")->required();
  sub->add_option("--set", c.overrides, "override a configuration key (key=value); repeatable");
  return sub;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated LoRA fine-tuning simulator"};
  app.require_subcommand(1);

  Common run_args, grid_args, fd_args, drift_args, validate_args;
  fedlora::RunOptions run_opts;
  bool inject = false;

  auto* run = add_command(app, "run", "run the configured experiment mode", run_args);
  run->add_flag("--resume", run_opts.resume, "continue from checkpoints in the output directory");
  run->add_option("--stop-after", run_opts.stop_after, "stop after writing this many checkpoints");
  auto* grid = add_command(app, "gridsearch", "sweep adapter rank x heads with the pipeline", grid_args);
  auto* fd = add_command(app, "fdcheck", "check analytic gradients against finite differences", fd_args);
  fd->add_flag("--inject-sign-flip", inject, "negate the magnitude gradient (oracle self-test)");
  auto* drift = add_command(app, "drift", "run the magnitude/direction drift observation", drift_args);
  auto* val = add_command(app, "validate", "validate the configuration only", validate_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? fedlora::kExitOk : fedlora::kExitInvalid;
  }

  const auto load = [](const Common& c) { return fedlora::load_config(c.config, c.overrides); };
  try {
    if (*run) return fedlora::cmd_run(load(run_args), run_opts, std::cout);
    if (*grid) return fedlora::cmd_gridsearch(load(grid_args), std::cout);
    if (*fd) return fedlora::cmd_fdcheck(load(fd_args), inject, std::cout);
    if (*drift) return fedlora::cmd_drift(load(drift_args), std::cout);
    if (*val) return fedlora::cmd_validate(load(validate_args), std::cout);
  } catch (const fedlora::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return fedlora::kExitInvalid;
  } catch (const fedlora::LockError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return fedlora::kExitInvalid;
  } catch (const fedlora::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return fedlora::kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return fedlora::kExitInvalid;
  }
  return fedlora::kExitInvalid;
}
