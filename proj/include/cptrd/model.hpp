#pragma once

#include "cptrd/backbone.hpp"
#include "cptrd/model_config.hpp"
#include "cptrd/soft_prompt.hpp"
#include "cptrd/tensor.hpp"
#include "cptrd/verbalizer.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace cptrd {

// A tokenised claim + comments example. `label` is 0 (non-rumor) or 1 (rumor).
struct EncodedExample {
  std::vector<TokenId> claim;
  std::vector<TokenId> comments;
  int label = 0;
};

// Marks a shallow prompt position in an assembled layout.
inline constexpr TokenId kPromptSlot = -1;

// Position layout of `P, [MASK], X, [SEP], C` after truncation.
struct InputLayout {
  std::vector<TokenId> positions;
  int mask_index = 0;
  int prompt_rows = 0;  // leading kPromptSlot entries
};

// Truncates comments first, then the claim, so that the sequence plus the
// prompt length fits in max_seq. `prompt_mode` null means no prompt at all.
InputLayout assemble_layout(const InjectionMode* prompt_mode, std::span<const TokenId> claim,
                            std::span<const TokenId> comments, const ModelConfig& config);

struct AssembledInput {
  InputLayout layout;
  Matrix embeddings;                 // n x d, including position embeddings
  const SoftPrompt* prefix = nullptr;  // deep prompt attached to every layer
};

// Throws std::invalid_argument on an empty claim or a prompt whose shape does
// not fit the backbone config. `prompt` may be null (no prompt).
AssembledInput assemble_input(const SoftPrompt* prompt, std::span<const TokenId> claim,
                              std::span<const TokenId> comments, const Backbone& backbone);

struct ForwardOutput {
  Vector mask_logits;   // over the full vocabulary, at layout.mask_index
  Vector first_hidden;  // final hidden state at position 0
};

ForwardOutput forward(const AssembledInput& input, const Backbone& backbone);

// Softmax over the vocabulary, mass summed within each label word set, then
// renormalised across labels.
LabelDistribution verbalize(const Eigen::Ref<const Vector>& mask_logits, const Verbalizer& verbalizer);

LabelDistribution classify_cls(const Eigen::Ref<const Vector>& first_hidden, const Backbone& backbone);

// Backbone + label head used for prediction and training.
struct Classifier {
  const Backbone* backbone = nullptr;
  const Verbalizer* verbalizer = nullptr;
  HeadMode head = HeadMode::verbalizer;
};

LabelDistribution predict(const Classifier& model, const SoftPrompt* prompt, const EncodedExample& example);

// Where gradients go. Null members are skipped.
struct GradTargets {
  RowMatrix* prompt = nullptr;           // same shape as the prompt values
  BackboneWeights* weights = nullptr;    // all backbone parameters
};

// Negative log-likelihood summed over `batch`. Gradients are accumulated
// into `targets`. Throws NumericError on a non-finite loss.
Scalar loss_and_grad(const Classifier& model, std::span<const EncodedExample> batch, const SoftPrompt* prompt,
                     const GradTargets& targets);

struct PromptLossAndGrad {
  Scalar loss = 0;
  SoftPrompt grad;
};

PromptLossAndGrad prompt_loss_and_grad(const Classifier& model, std::span<const EncodedExample> batch,
                                       const SoftPrompt& prompt);

// Mean-pooled prompt-free encoding of `claim [SEP] comments`, averaged over
// the examples. Throws std::invalid_argument on an empty set.
Vector task_encode(std::span<const EncodedExample> examples, const Backbone& backbone);

// Masked-token objective used for pretraining. `targets` holds
// (position, original token) pairs; the input must already carry [MASK] at
// those positions. Returns the summed cross-entropy.
struct MaskedSequence {
  std::vector<TokenId> tokens;
  std::vector<std::pair<int, TokenId>> targets;
};
Scalar mlm_loss_and_grad(const Backbone& backbone, const MaskedSequence& sequence, BackboneWeights* grads);

enum class TuningMode { finetune, shallow_prompt, deep_prompt, deep_prompt_tphnet };

struct ParameterCount {
  std::int64_t tunable = 0;
  std::int64_t total = 0;
  double fraction() const { return static_cast<double>(tunable) / static_cast<double>(total); }
};

inline constexpr int kTphnetHidden = 64;

// Exact counts from tensor shapes; total = backbone + added parameters.
ParameterCount parameter_count(const ModelConfig& config, TuningMode mode);
double trainable_fraction(const ModelConfig& config, TuningMode mode);

}  // namespace cptrd
