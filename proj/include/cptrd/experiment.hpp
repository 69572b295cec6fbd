#pragma once

#include "cptrd/backbone.hpp"
#include "cptrd/data.hpp"
#include "cptrd/harness.hpp"
#include "cptrd/model_config.hpp"
#include "cptrd/pretrain.hpp"
#include "cptrd/verbalizer.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cptrd {

// Raised for any problem detected while reading or validating a config;
// maps to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSource {
  std::optional<SynthStreamConfig> synth;  // exactly one of synth / jsonl
  std::vector<std::string> jsonl;
  std::uint64_t split_seed = 7;            // splits and few-shot subsets
};

struct ExperimentConfig {
  ModelConfig model;
  DataSource data;
  PretrainConfig pretrain;
  double held_out_fraction = 0.1;  // corpus share kept for the held-out MLM loss
  std::string checkpoint;          // empty: <output>/backbone.cptrd
  std::vector<MethodConfig> methods;
  std::vector<std::vector<std::string>> orders;  // empty: the source's natural order
  std::vector<std::uint64_t> seeds{1};
  TrainingConfig training;
  std::string output = "runs";

  std::filesystem::path checkpoint_path() const;
};

// Parses and validates the whole document (unknown keys, value ranges,
// method names, duplicate method names). Relative paths are resolved
// against `base_dir`. Throws ConfigError.
ExperimentConfig experiment_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& config);

// Everything derived from the data source: vocabulary, verbalizer, the split
// domains (with few-shot subsets) and the pretraining corpus.
struct PreparedData {
  Vocabulary vocab;
  Verbalizer verbalizer;
  std::vector<DomainTask> domains;
  std::vector<CorpusSequence> corpus;
  nlohmann::json manifest;

  const DomainTask& domain(const std::string& name) const;  // throws ConfigError
};

PreparedData prepare_data(const ExperimentConfig& config);

// Checks that every order names existing, distinct domains (at least two).
void validate_orders(const ExperimentConfig& config, const PreparedData& data);
std::vector<std::vector<std::string>> effective_orders(const ExperimentConfig& config, const PreparedData& data);

std::vector<EncodedTask> encode_order(const PreparedData& data, const std::vector<std::string>& order);

struct PretrainReport {
  std::string digest;
  double held_out_random = 0;
  double held_out_pretrained = 0;
  std::vector<PretrainLog> log;
};

// Trains, saves the checkpoint and returns the summary. Throws NumericError
// on divergence.
PretrainReport cmd_pretrain(const ExperimentConfig& config, const PreparedData& data,
                            const std::function<void(const std::string&)>& progress = {});

// Metrics document written next to every R matrix.
nlohmann::json metrics_json(const MethodConfig& method, std::uint64_t seed, const std::string& order,
                            const RunResult& result, const TrainingConfig& training);

struct RunCell {
  MethodConfig method;
  std::string order_name;  // "order1", ...
  std::vector<std::string> order;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
};

std::vector<RunCell> plan_grid(const ExperimentConfig& config, const PreparedData& data);

// Runs one cell and writes rmatrix.csv, metrics.json, stages.jsonl (plus the
// prompt library / hypernetwork when present) into cell.dir.
RunResult run_cell(const RunCell& cell, const Backbone& backbone, const PreparedData& data,
                   const TrainingConfig& training, const ProgressFn& progress = {});

// Mean and sample standard deviation per method over every completed cell.
nlohmann::json aggregate(const std::vector<nlohmann::json>& metrics);

struct RunSummary {
  int completed = 0;
  int failed = 0;
  std::vector<std::string> errors;
};

RunSummary cmd_run(const ExperimentConfig& config, const PreparedData& data, int jobs,
                   const std::function<void(const std::string&)>& progress = {});

struct ReportOutput {
  std::string table;     // fixed-width text table
  std::string fs_curve;  // CSV: method,task_index,fs_f1_k...
  int runs = 0;
};

// Reads every metrics.json / stages.jsonl below `dir`. Throws ConfigError
// when none exist.
ReportOutput cmd_report(const std::filesystem::path& dir);

}  // namespace cptrd
