// cptrd: pretrain a backbone, run method x order x seed grids, report.
//
//   cptrd pretrain --config exp.json [--out DIR] [--seed N]
//   cptrd run      --config exp.json [--out DIR] [--seed N] [--jobs J]
//   cptrd report   DIR
//
// Exit codes: 0 success, 1 run failure, 2 config error.

#include "cptrd/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

using namespace cptrd;

namespace {

constexpr int kOk = 0, kRunFailure = 1, kConfigError = 2;

void log_line(const std::string& msg) { std::cerr << msg << std::endl; }

ExperimentConfig load(const std::string& path, const std::string& out, std::optional<std::uint64_t> seed) {
  ExperimentConfig config = load_experiment(path);
  if (!out.empty()) config.output = out;
  if (seed) {
    config.seeds = {*seed};
    config.pretrain.seed = *seed;
  }
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual prompt tuning experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, report_dir;
  std::optional<std::uint64_t> seed;
  int jobs = 1;

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain and freeze the masked-LM backbone");
  pretrain->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  pretrain->add_option("--out", out_dir, "Output directory (overrides the config)");
  pretrain->add_option("--seed", seed, "Pretraining seed override");

  auto* run = app.add_subcommand("run", "Run every method x order x seed cell of the grid");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "Output directory (overrides the config)");
  run->add_option("--seed", seed, "Run a single seed instead of the configured list");
  run->add_option("--jobs", jobs, "Grid cells to run in parallel")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Summarise completed runs");
  report->add_option("dir", report_dir, "Output directory of a previous run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*pretrain) {
      const ExperimentConfig config = load(config_path, out_dir, seed);
      const PreparedData data = prepare_data(config);
      const PretrainReport r = cmd_pretrain(config, data, log_line);
      std::cout << "checkpoint " << config.checkpoint_path().string() << "\n"
                << "digest " << r.digest << "\n"
                << "held-out MLM loss: random " << r.held_out_random << ", pretrained " << r.held_out_pretrained << "\n";
      return kOk;
    }
    if (*run) {
      const ExperimentConfig config = load(config_path, out_dir, seed);
      const PreparedData data = prepare_data(config);
      const RunSummary s = cmd_run(config, data, jobs, log_line);
      std::cout << s.completed << " runs completed, " << s.failed << " failed; results in " << config.output << "\n";
      for (const auto& e : s.errors) std::cerr << "failed: " << e << "\n";
      return s.failed == 0 ? kOk : kRunFailure;
    }
    const ReportOutput r = cmd_report(report_dir);
    std::cout << r.table;
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRunFailure;
  }
}
