#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance binary.

#include "cptrd/metrics.hpp"
#include "cptrd/model.hpp"
#include "cptrd/tphnet.hpp"
#include "fixtures.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace oracles {

using namespace cptrd;

// Plain nested-vector R matrix: rows[j][i-1].
using Grid = std::vector<std::vector<double>>;

inline double naive_avg(const Grid& r) {
  const std::size_t n = r[0].size();
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += r[n][i];
  return s / static_cast<double>(n);
}

inline double naive_bwt(const Grid& r) {
  const std::size_t n = r[0].size();
  double s = 0;
  for (std::size_t i = 1; i <= n - 1; ++i) s += r[n][i - 1] - r[i][i - 1];
  return s / static_cast<double>(n - 1);
}

inline double naive_fwt(const Grid& r) {
  const std::size_t n = r[0].size();
  double s = 0;
  for (std::size_t i = 2; i <= n; ++i) s += r[i - 1][i - 1] - r[0][i - 1];
  return s / static_cast<double>(n - 1);
}

inline RMatrix to_rmatrix(const Grid& g) {
  RMatrix r(static_cast<int>(g[0].size()));
  for (std::size_t j = 0; j < g.size(); ++j)
    for (std::size_t i = 0; i < g[j].size(); ++i) r.set(static_cast<int>(j), static_cast<int>(i + 1), g[j][i]);
  return r;
}

inline Grid random_grid(Rng& rng, int n) {
  std::uniform_real_distribution<double> f1(0, 100);
  Grid g(static_cast<std::size_t>(n + 1), std::vector<double>(static_cast<std::size_t>(n)));
  for (auto& row : g)
    for (auto& v : row) v = f1(rng);
  return g;
}

// Largest deviation of the library metrics from the naive ones over
// `count` random R matrices with 2..8 tasks.
inline double metric_oracle_deviation(int count, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> tasks(2, 8);
  double worst = 0;
  for (int c = 0; c < count; ++c) {
    const Grid g = random_grid(rng, tasks(rng));
    const RMatrix r = to_rmatrix(g);
    worst = std::max({worst, std::abs(avg_f1(r) - naive_avg(g)), std::abs(*bwt(r) - naive_bwt(g)),
                      std::abs(*fwt(r) - naive_fwt(g))});
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient cases.

inline constexpr double kFdStep = 1e-4;

template <typename Fn>
Vector central_difference(Eigen::Ref<Vector> x, Fn&& loss) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x(i);
    x(i) = keep + kFdStep;
    const double up = loss();
    x(i) = keep - kFdStep;
    const double down = loss();
    x(i) = keep;
    g(i) = (up - down) / (2 * kFdStep);
  }
  return g;
}

inline double rel_error(const Vector& analytic, const Vector& numeric) { return fixtures::rel_error(analytic, numeric); }

struct GradientCase {
  std::string kind;
  double error = 0;
};

inline constexpr int kGradientKinds = 6;

// Case `index` cycles through: shallow/deep prompt under the verbalizer head,
// shallow/deep prompt under the CLS head, TPHNet parameters and the task
// embedding (both with the prior penalty active).
inline GradientCase gradient_case(int index, std::uint64_t seed) {
  Rng rng(mix_seed(seed, {static_cast<std::uint64_t>(index)}));
  const int kind = index % kGradientKinds;
  const InjectionMode mode = (kind == 0 || kind == 2) ? InjectionMode::shallow : InjectionMode::deep;
  const ModelConfig config = fixtures::tiny_config(mode);
  const Backbone backbone = fixtures::tiny_backbone(config, rng());
  const Verbalizer verbalizer = fixtures::tiny_verbalizer();
  const Classifier model{&backbone, &verbalizer, kind == 2 || kind == 3 ? HeadMode::cls : HeadMode::verbalizer};
  const auto batch = fixtures::random_batch(rng, 3, config);

  if (kind < 4) {
    SoftPrompt prompt = SoftPrompt::random(config, rng());
    prompt.values() *= 8.0;  // well away from the near-zero regime
    const SoftPrompt grad = prompt_loss_and_grad(model, batch, prompt).grad;
    const Vector numeric =
        central_difference(prompt.flat(), [&] { return prompt_loss_and_grad(model, batch, prompt).loss; });
    static const char* names[] = {"prompt/shallow/verbalizer", "prompt/deep/verbalizer", "prompt/shallow/cls",
                                  "prompt/deep/cls"};
    return {names[kind], rel_error(grad.flat(), numeric)};
  }

  TphnetParams params = TphnetParams::random(config, rng(), 5);
  params.w2 *= 20.0;
  fill_uniform(params.b1, rng, -1, 1);
  fill_uniform(params.b2, rng, -1, 1);
  Vector z(config.d);
  fill_uniform(z, rng, -1, 1);
  const SoftPrompt prior = SoftPrompt::random(config, rng());
  const int k = 3;
  const double beta = 0.5;
  const auto loss = [&] { return tphnet_loss_and_grad(model, batch, params, z, &prior, k, beta).loss; };
  const TphnetLossAndGrad r = tphnet_loss_and_grad(model, batch, params, z, &prior, k, beta);
  if (kind == 5) return {"tphnet/task-embedding", rel_error(r.d_z, central_difference(z, loss))};

  // Flatten every parameter tensor in a fixed order.
  Vector analytic(params.parameter_count()), numeric(params.parameter_count());
  Eigen::Index at = 0;
  auto take = [&](auto& value, const auto& grad) {
    Eigen::Map<Vector> flat(value.data(), value.size());
    const Vector g = central_difference(flat, loss);
    numeric.segment(at, value.size()) = g;
    analytic.segment(at, value.size()) = Eigen::Map<const Vector>(grad.data(), grad.size());
    at += value.size();
  };
  take(params.w1, r.grad.w1);
  take(params.b1, r.grad.b1);
  take(params.w2, r.grad.w2);
  take(params.b2, r.grad.b2);
  return {"tphnet/parameters", rel_error(analytic, numeric)};
}

// ---------------------------------------------------------------------------
// Parameter counts by enumerating the actual tensors.

inline std::int64_t audited_tunable(const ModelConfig& config, TuningMode mode) {
  const std::int64_t backbone = BackboneWeights::zeros(config).parameter_count();
  ModelConfig shallow = config, deep = config;
  shallow.injection_mode = InjectionMode::shallow;
  deep.injection_mode = InjectionMode::deep;
  switch (mode) {
    case TuningMode::finetune: return backbone;
    case TuningMode::shallow_prompt: return SoftPrompt::zeros(shallow).size();
    case TuningMode::deep_prompt: return SoftPrompt::zeros(deep).size();
    case TuningMode::deep_prompt_tphnet: return TphnetParams::zeros(deep).parameter_count() + config.d;
  }
  return 0;
}

inline double audited_fraction(const ModelConfig& config, TuningMode mode) {
  const std::int64_t backbone = BackboneWeights::zeros(config).parameter_count();
  const std::int64_t tunable = audited_tunable(config, mode);
  const std::int64_t total = mode == TuningMode::finetune ? backbone : backbone + tunable;
  return static_cast<double>(tunable) / static_cast<double>(total);
}

}  // namespace oracles
