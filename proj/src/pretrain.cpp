#include "cptrd/pretrain.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace cptrd {

MaskedSequence mask_sequence(const CorpusSequence& sequence, double mask_prob, double focus_mask_prob, Rng& rng) {
  MaskedSequence out;
  out.tokens = sequence.tokens;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int> candidates;
  for (std::size_t i = 0; i < sequence.tokens.size(); ++i) {
    const TokenId t = sequence.tokens[i];
    if (t == token::sep || t == token::pad || t == token::mask) continue;
    candidates.push_back(static_cast<int>(i));
    const double p = static_cast<int>(i) == sequence.focus ? focus_mask_prob : mask_prob;
    if (u(rng) < p) out.targets.emplace_back(static_cast<int>(i), t);
  }
  if (out.targets.empty() && !candidates.empty()) {
    const int i = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
    out.targets.emplace_back(i, sequence.tokens[static_cast<std::size_t>(i)]);
  }
  for (const auto& [pos, tok] : out.targets) out.tokens[static_cast<std::size_t>(pos)] = token::mask;
  return out;
}

double masked_lm_loss(const Backbone& backbone, const std::vector<CorpusSequence>& held_out, std::uint64_t seed,
                      double mask_prob, double focus_mask_prob) {
  Rng rng(seed);
  double total = 0;
  std::size_t targets = 0;
  for (const auto& seq : held_out) {
    const MaskedSequence m = mask_sequence(seq, mask_prob, focus_mask_prob, rng);
    total += mlm_loss_and_grad(backbone, m, nullptr);
    targets += m.targets.size();
  }
  return targets ? total / static_cast<double>(targets) : 0.0;
}

AdamOptimizer::AdamOptimizer(const BackboneWeights& like, double learning_rate, double beta1, double beta2, double eps)
    : m_(like), v_(like), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.set_zero();
  v_.set_zero();
}

void AdamOptimizer::step(BackboneWeights& params, const BackboneWeights& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  std::vector<Matrix*> p, m, v;
  std::vector<const Matrix*> g;
  params.for_each([&](const std::string&, Matrix& x) { p.push_back(&x); });
  m_.for_each([&](const std::string&, Matrix& x) { m.push_back(&x); });
  v_.for_each([&](const std::string&, Matrix& x) { v.push_back(&x); });
  grads.for_each([&](const std::string&, const Matrix& x) { g.push_back(&x); });
  for (std::size_t i = 0; i < p.size(); ++i) {
    *m[i] = beta1_ * *m[i] + (1.0 - beta1_) * *g[i];
    *v[i] = beta2_ * *v[i] + (1.0 - beta2_) * g[i]->cwiseAbs2();
    p[i]->array() -= lr_ * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + eps_);
  }
}

Backbone pretrain_backbone(const ModelConfig& config, const std::vector<CorpusSequence>& corpus,
                           const PretrainConfig& options, const std::function<void(const PretrainLog&)>& log) {
  if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
  Backbone backbone = Backbone::initialize(config, options.seed);
  backbone.thaw();
  AdamOptimizer adam(backbone.weights(), options.learning_rate);
  BackboneWeights grads = BackboneWeights::zeros(config);
  Rng rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);

  for (int step = 1; step <= options.steps; ++step) {
    grads.set_zero();
    double loss = 0;
    std::size_t targets = 0;
    for (int b = 0; b < options.batch_size; ++b) {
      const MaskedSequence m = mask_sequence(corpus[pick(rng)], options.mask_prob, options.focus_mask_prob, rng);
      loss += mlm_loss_and_grad(backbone, m, &grads);
      targets += m.targets.size();
    }
    if (!std::isfinite(loss)) throw NumericError("pretrain: loss diverged at step " + std::to_string(step));
    const double scale = targets ? 1.0 / static_cast<double>(targets) : 0.0;
    grads.for_each([&](const std::string&, Matrix& g) { g *= scale; });
    adam.step(backbone.mutable_weights(), grads);
    if (log) log({step, loss * scale});
  }
  BackboneWeights w = backbone.weights();
  w.for_each([](const std::string&, Matrix& m) { round_to_float(m); });
  return Backbone(config, std::move(w));
}

}  // namespace cptrd
