// Command-line entry point: one subcommand per pipeline stage.
#include <exception>
#include <future>
#include <iostream>
#include <optional>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "cbm/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitOther = 1;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool quiet = false;
  bool parallel_seeds = false;
};

int run(const std::string& command, const Options& opt) {
  cbm::ExperimentConfig cfg = opt.config_path.empty() ? cbm::parse_config(nlohmann::json::object())
                                                      : cbm::load_config(opt.config_path);
  if (opt.seed) cfg.run.seeds = {*opt.seed};
  if (!opt.out_dir.empty()) cfg.run.out_dir = opt.out_dir;

  auto one = [&](std::uint64_t seed) {
    return cbm::run_command(command, cfg, seed, cbm::seed_dir(cfg.run.out_dir, seed));
  };
  std::vector<cbm::CommandResult> results;
  if (opt.parallel_seeds && cfg.run.seeds.size() > 1) {
    std::vector<std::future<cbm::CommandResult>> jobs;
    for (auto s : cfg.run.seeds) jobs.push_back(std::async(std::launch::async, one, s));
    for (auto& j : jobs) results.push_back(j.get());
  } else {
    for (auto s : cfg.run.seeds) results.push_back(one(s));
  }
  if (!opt.quiet) {
    for (std::size_t n = 0; n < results.size(); ++n) {
      const auto dir = cbm::seed_dir(cfg.run.out_dir, cfg.run.seeds[n]);
      for (const auto& w : results[n].warnings) std::cerr << "warning: " << w << "\n";
      std::cout << fmt::format("{}: {} artifacts in {}\n", command, results[n].artifacts.size(), dir);
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal dynamics and reward learning, state abstraction and task learning on synthetic factored MDPs"};
  app.require_subcommand(1);
  Options opt;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Run only this seed (overrides run.seeds)");
  app.add_option("--config", opt.config_path, "Experiment config JSON");
  app.add_option("--out-dir", opt.out_dir, "Output root (overrides run.out_dir)");
  app.add_flag("--quiet", opt.quiet, "Suppress progress and warnings");
  app.add_flag("--parallel-seeds", opt.parallel_seeds, "Run seeds concurrently");
  app.fallthrough();
  for (const auto& name : cbm::command_names()) app.add_subcommand(name, "")->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  if (*seed_opt) opt.seed = seed;
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    return run(command, opt);
  } catch (const cbm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const cbm::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
}
