#pragma once

#include "cptrd/backbone.hpp"
#include "cptrd/data.hpp"
#include "cptrd/metrics.hpp"
#include "cptrd/model.hpp"
#include "cptrd/prompt_store.hpp"
#include "cptrd/tphnet.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cptrd {

enum class Learner { finetune, prompt_tuning, p_tuning_v2, cpt_rd };
enum class InitStrategy { random, clinit, siminit, meaninit };

std::string_view to_string(Learner learner);
Learner parse_learner(std::string_view text);
std::string_view to_string(InitStrategy init);
InitStrategy parse_init(std::string_view text);

struct MethodConfig {
  std::string name;  // label used in reports and output paths
  Learner learner = Learner::cpt_rd;
  HeadMode head = HeadMode::verbalizer;
  InitStrategy init = InitStrategy::random;
  bool tphnet = false;
  int rehearsal_per_domain = 0;  // 0 = off
  bool mtl = false;

  // prompt-tuning injects shallow prompts; p-tuning v2 and CPT-RD inject deep
  // prompts; fine-tuning has no prompt.
  std::optional<InjectionMode> injection() const;
  TuningMode tuning_mode() const;
  // Throws std::invalid_argument on inconsistent combinations.
  void validate() const;
};

nlohmann::json to_json(const MethodConfig& method);
// Unknown keys are rejected.
MethodConfig method_from_json(const nlohmann::json& j);

struct TrainingConfig {
  double prompt_lr = 7e-3;    // CPT-RD prompts
  double baseline_lr = 5e-3;  // prompt-tuning / p-tuning v2 baselines
  double finetune_lr = 5e-5;
  double tphnet_lr = 1e-4;    // hypernetwork and task embedding
  int batch_size = 16;
  int max_epochs = 100;
  int patience = 4;
  int few_shot_steps = 500;
  std::vector<int> k_shots{16, 8, 4};
  double beta = 0.01;
  bool few_shot_on_test = false;  // default: few-shot F1 on validation
  double max_grad_norm = 0;       // 0: no clipping

  void validate() const;
};

nlohmann::json to_json(const TrainingConfig& training);

// Factor that rescales a gradient of the given norm to at most max_norm (0 disables).
double clip_factor(double norm, double max_norm);
TrainingConfig training_from_json(const nlohmann::json& j);

struct StageRecord {
  int task_id = 0;  // 1-based position in the stream
  std::string task;
  std::string init;
  std::optional<int> source_task;
  double zero_shot_f1 = 0;
  std::map<int, double> few_shot_f1;
  double full_shot_f1 = 0;
  int epochs = 0;
  double best_validation_f1 = 0;
  std::vector<int> replaced;  // consolidation
  std::string digest_before;
  std::string digest_after;
};

nlohmann::json to_json(const StageRecord& record);

// Seeded uniform sample of up to `per_domain` training examples from each
// task in order; per_domain >= size takes the whole set.
std::vector<std::vector<EncodedExample>> rehearsal_buffer(std::span<const EncodedTask> tasks, int per_domain,
                                                          std::uint64_t seed);

// Seeds of the per-run random streams.
namespace seed_tag {
inline constexpr std::uint64_t baseline = 1, full_shot = 2, few_shot = 3, shuffle = 4, tphnet = 5, prior = 6,
                               rehearsal = 7;
}

struct RunResult {
  RMatrix r;
  std::vector<StageRecord> stages;
  SourcePromptLibrary library;
  std::optional<TphnetParams> tphnet;
  double params_fraction = 0;
};

using ProgressFn = std::function<void(const std::string&)>;

// Sequential CDET runner: zero-shot, few-shot and full-shot stages per task,
// R-matrix bookkeeping and the frozen-backbone audit.
class StreamRunner {
 public:
  // `tasks` must outlive the runner. Throws std::invalid_argument on a bad
  // method or training config, fewer than two tasks, or a missing split.
  StreamRunner(const Backbone& backbone, const Verbalizer& verbalizer, std::span<const EncodedTask> tasks,
               MethodConfig method, TrainingConfig training, std::uint64_t seed, ProgressFn progress = {});
  ~StreamRunner();
  StreamRunner(const StreamRunner&) = delete;
  StreamRunner& operator=(const StreamRunner&) = delete;

  // Runs the three stages of task k (1-based); tasks 1..k-1 must be done.
  const StageRecord& run_task(int k);
  // Pooled multi-task training on every task at once (MTL mode).
  void run_pooled();

  int completed() const;
  const RMatrix& rmatrix() const;
  const SourcePromptLibrary& library() const;
  RunResult result() const;

 private:
  struct State;
  std::unique_ptr<State> state_;
};

RunResult run_stream(const Backbone& backbone, const Verbalizer& verbalizer, std::span<const EncodedTask> tasks,
                     const MethodConfig& method, const TrainingConfig& training, std::uint64_t seed,
                     const ProgressFn& progress = {});

// Test-set macro-F1 of `prompt` (may be null) under `model`.
double evaluate_f1(const Classifier& model, const SoftPrompt* prompt, std::span<const EncodedExample> examples);

}  // namespace cptrd
