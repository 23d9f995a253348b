#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "../vendor/CLI11.hpp"
#include "xferepi/config.hpp"
#include "xferepi/pipeline.hpp"

namespace {

struct CliOptions {
  std::string config_path;
  std::string out_dir;
  int jobs = 0;
  bool force = false;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stochastic epidemic simulation and forecasting transfer study"};
  app.require_subcommand(1);

  CliOptions opt;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"simulate", "generate or ingest epidemic series"},
      {"prepare", "build windowed forecasting datasets and scale tables"},
      {"train", "fit every requested model"},
      {"evaluate", "score models on held-out series and compute similarity"},
      {"report", "assemble the final report tables"},
      {"all", "run every stage in order"},
      {"validate", "check a config file and print diagnostics"},
  };
  for (const auto& [name, desc] : commands) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", opt.config_path, "experiment config (JSON)")->required();
    if (name != "validate") {
      sub->add_flag("--force", opt.force, "re-run stages even when artifacts are current");
      sub->add_option("--jobs", opt.jobs, "worker threads, overrides config");
      sub->add_option("--out", opt.out_dir, "output directory, overrides config");
    }
  }

  CLI11_PARSE(app, argc, argv);
  const std::string cmd = app.get_subcommands().front()->get_name();

  xferepi::config::ConfigParse parsed = xferepi::config::load_config(opt.config_path);
  if (cmd == "validate") {
    for (const auto& d : parsed.diagnostics) std::cout << d << "\n";
    if (!parsed.ok()) return 2;
    std::cout << "config ok\n";
    return 0;
  }
  if (!parsed.ok()) {
    for (const auto& d : parsed.diagnostics) std::cerr << d << "\n";
    return 2;
  }

  xferepi::config::ExperimentConfig cfg = parsed.config;
  if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
  if (opt.jobs > 0) cfg.jobs = opt.jobs;
  return xferepi::pipeline::run(cfg, cmd, opt.force, std::cout, std::cerr);
}
