// stmap <command> --config <path> [--out <dir>] [--seed <u64>] [--threads <n>] [--quiet]

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "stmap/experiment.hpp"

namespace {

int fail(stmap::ErrorCategory cat, const std::string& what) {
  std::cerr << "stmap: error category=" << stmap::category_name(cat) << ": " << what << '\n';
  return stmap::exit_code(cat);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Particle samplers driven by stochastic transport maps"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  bool quiet = false;

  for (const char* name : {"sample", "transport-ode", "convergence", "funnel", "mixture", "diagnose"}) {
    CLI::App* sub = app.add_subcommand(name, std::string("run a '") + name + "' experiment");
    sub->add_option("--config", config_path, "experiment JSON")->required();
    sub->add_option("--out", out_dir, "output directory (overrides output.dir)");
    sub->add_option("--seed", seed, "seed override (u64)");
    sub->add_option("--threads", threads, "worker threads (results do not depend on it)");
    sub->add_flag("--quiet", quiet, "no summary on standard output");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : stmap::exit_code(stmap::ErrorCategory::Config);
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    stmap::ExperimentConfig cfg = stmap::load_config(config_path);
    if (sub->get_name() != stmap::command_name(cfg.command))
      throw stmap::ConfigError("command '" + sub->get_name() + "' does not match the config's command '" +
                               stmap::command_name(cfg.command) + "'");
    stmap::RunOverrides ov;
    if (sub->count("--out")) ov.out_dir = out_dir;
    if (sub->count("--seed")) ov.seed = seed;
    if (sub->count("--threads")) ov.threads = threads;
    cfg = stmap::apply_overrides(std::move(cfg), ov);
    for (const auto& w : cfg.warnings) std::cerr << "stmap: warning: " << w << '\n';
    stmap::run_experiment(cfg, quiet ? nullptr : &std::cout);
  } catch (const stmap::ConfigViolations& e) {
    return fail(e.category(), e.what());
  } catch (const stmap::Error& e) {
    return fail(e.category(), e.what());
  } catch (const std::exception& e) {
    return fail(stmap::ErrorCategory::Io, e.what());
  }
  return 0;
}
