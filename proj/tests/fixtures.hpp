#pragma once

#include "cptrd/backbone.hpp"
#include "cptrd/model.hpp"
#include "cptrd/verbalizer.hpp"

#include <random>
#include <vector>

namespace fixtures {

using namespace cptrd;

inline ModelConfig tiny_config(InjectionMode mode = InjectionMode::deep) {
  ModelConfig c;
  c.vocab_size = 24;
  c.d = 8;
  c.layers = 2;
  c.heads = 2;
  c.prompt_length = 3;
  c.max_seq = 16;
  c.ffn_dim = 12;
  c.injection_mode = mode;
  return c;
}

inline Verbalizer tiny_verbalizer() { return Verbalizer({6, 7}, {8, 9}); }

// A random backbone whose weights are large enough that every path carries
// signal (plain initialisation leaves the heads nearly flat).
inline Backbone tiny_backbone(const ModelConfig& c, std::uint64_t seed) {
  Backbone init = Backbone::initialize(c, seed);
  BackboneWeights w = init.weights();
  Rng rng(seed + 1000);
  w.for_each([&](const std::string&, Matrix& m) {
    Matrix noise(m.rows(), m.cols());
    fill_uniform(noise, rng, -0.3, 0.3);
    m += noise;
  });
  return Backbone(c, std::move(w));
}

inline std::vector<TokenId> random_tokens(Rng& rng, int n, int vocab) {
  std::uniform_int_distribution<int> tok(token::reserved_count, vocab - 1);
  std::vector<TokenId> out(static_cast<std::size_t>(n));
  for (auto& t : out) t = tok(rng);
  return out;
}

inline std::vector<EncodedExample> random_batch(Rng& rng, int n, const ModelConfig& c) {
  std::uniform_int_distribution<int> claim_len(1, 4), comment_len(0, 4), label(0, 1);
  std::vector<EncodedExample> out;
  for (int i = 0; i < n; ++i)
    out.push_back({random_tokens(rng, claim_len(rng), c.vocab_size), random_tokens(rng, comment_len(rng), c.vocab_size),
                   label(rng)});
  return out;
}

// Norm-wise relative error ||a - n|| / max(||a||, ||n||); 0 when both vanish.
template <typename A, typename B>
double rel_error(const A& analytic, const B& numeric) {
  const double scale = std::max(analytic.norm(), numeric.norm());
  return scale == 0 ? 0.0 : (analytic - numeric).norm() / scale;
}

}  // namespace fixtures
