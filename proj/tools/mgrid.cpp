#include <cstdio>
#include <exception>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "mgrid/runner.hpp"
#include "mgrid/version.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Droop-controlled DC microgrid simulation and estimation"};
  app.set_version_flag("--version", std::string(mgrid::kVersion));

  std::string command;
  mgrid::RunOptions opt;
  const std::set<std::string> commands{"solve",      "train",     "estimate",
                                       "crlb",       "doed",      "sweep-rrmse",
                                       "sweep-rci"};
  app.add_option("command", command, "One of: solve, train, estimate, crlb, doed, sweep-rrmse, sweep-rci")
      ->required()
      ->check(CLI::IsMember(commands));
  app.add_option("--config", opt.config_path, "Scenario file")->required();
  app.add_option("--seed", opt.seed,
                 "Base seed for all random streams (default: scenario)");
  app.add_option("--trials", opt.trials,
                 "Monte Carlo trials per point (default: scenario)");
  app.add_option("--out", opt.out,
                 "Output CSV path (default: $MGRID_OUT_DIR/<command>.csv)");
  app.add_option("--parallel", opt.parallel, "Worker thread count");

  CLI11_PARSE(app, argc, argv);

  try {
    const std::string path = mgrid::run_command(command, opt);
    std::printf("%s\n", path.c_str());
    return 0;
  } catch (const mgrid::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return mgrid::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
