#pragma once

#include "cptrd/backbone.hpp"
#include "cptrd/model.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace cptrd {

// A token sequence for masked-token pretraining. `focus` is masked with
// `focus_mask_prob` instead of the uniform rate (-1 for none).
struct CorpusSequence {
  std::vector<TokenId> tokens;
  int focus = -1;
};

struct PretrainConfig {
  int steps = 6000;
  int batch_size = 16;
  double learning_rate = 2e-3;  // Adam
  double mask_prob = 0.1;
  double focus_mask_prob = 1.0;
  std::uint64_t seed = 1;
};

// Seeded masking of one sequence. Always yields at least one target.
MaskedSequence mask_sequence(const CorpusSequence& sequence, double mask_prob, double focus_mask_prob, Rng& rng);

// Mean masked-token loss per target over a fixed, seeded masking of `held_out`.
double masked_lm_loss(const Backbone& backbone, const std::vector<CorpusSequence>& held_out, std::uint64_t seed,
                      double mask_prob = 0.1, double focus_mask_prob = 1.0);

struct PretrainLog {
  int step = 0;
  double loss = 0;  // mean per masked target over the batch
};

// Trains a fresh backbone with Adam on the masked-token objective, then
// rounds every weight to float32 so the checkpoint round-trips exactly.
// Throws NumericError if the loss diverges.
Backbone pretrain_backbone(const ModelConfig& config, const std::vector<CorpusSequence>& corpus,
                           const PretrainConfig& options, const std::function<void(const PretrainLog&)>& log = {});

// Element-wise Adam state over a BackboneWeights-shaped parameter set.
class AdamOptimizer {
 public:
  AdamOptimizer(const BackboneWeights& like, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void step(BackboneWeights& params, const BackboneWeights& grads);

 private:
  BackboneWeights m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
};

}  // namespace cptrd
