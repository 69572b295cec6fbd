#pragma once

#include "cptrd/model.hpp"
#include "cptrd/model_config.hpp"
#include "cptrd/prompt_store.hpp"
#include "cptrd/soft_prompt.hpp"
#include "cptrd/tensor.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cptrd {

// Two-layer prompt generator g(z) = W2 tanh(W1 z + b1) + b2. The output is
// reshaped row-major into the configured prompt layout.
struct TphnetParams {
  Matrix w1;  // hidden x d
  Vector b1;  // hidden
  Matrix w2;  // (prompt rows * d) x hidden
  Vector b2;  // prompt rows * d

  static TphnetParams zeros(const ModelConfig& config, int hidden = kTphnetHidden);
  // W1 ~ U(+-1/sqrt(d)), W2 ~ U(+-0.5/sqrt(d * hidden)), biases zero.
  static TphnetParams random(const ModelConfig& config, std::uint64_t seed, int hidden = kTphnetHidden);

  int hidden() const { return static_cast<int>(w1.rows()); }
  Eigen::Index parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }
  void check_shape(const ModelConfig& config) const;
  bool all_finite() const { return w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite(); }
  void set_zero();

  template <typename Fn>
  void for_each(Fn&& fn) {
    fn("W1", w1); fn("b1", b1); fn("W2", w2); fn("b2", b2);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    fn("W1", w1); fn("b1", b1); fn("W2", w2); fn("b2", b2);
  }
  bool operator==(const TphnetParams&) const;
};

struct TphnetTrace {
  Vector hidden;  // tanh(W1 z + b1)
};

SoftPrompt generate(const TphnetParams& params, const Eigen::Ref<const Vector>& z, const ModelConfig& config,
                    TphnetTrace* trace = nullptr);

// Back-propagates dL/dP into parameter gradients (accumulated) and dL/dz
// (accumulated when non-null).
void generate_backward(const TphnetParams& params, const Eigen::Ref<const Vector>& z, const TphnetTrace& trace,
                       const SoftPrompt& d_prompt, TphnetParams& grads, Vector* d_z);

// base + beta/(k-1) * ||generated - prior||^2. For k < 2 the penalty is
// absent. Throws std::invalid_argument on a shape mismatch.
Scalar regularized_loss(Scalar base_loss, const SoftPrompt& generated, const SoftPrompt& prior, int k, Scalar beta);
// d(penalty)/d(generated) = 2 beta/(k-1) (generated - prior).
SoftPrompt regularizer_grad(const SoftPrompt& generated, const SoftPrompt& prior, int k, Scalar beta);

// Uniform over stored entries; nullopt for an empty library (no penalty).
std::optional<SplEntry> sample_prior(const SourcePromptLibrary& library, Rng& rng);

// Evaluates `final_prompt` on every prior task first, then replaces each
// entry whose recorded F1 is matched or beaten. An evaluator exception
// leaves the library untouched. Returns the replaced task ids in order.
using PromptEvaluator = std::function<double(int task_id, const SoftPrompt& prompt)>;
std::vector<int> consolidate(SourcePromptLibrary& library, const SoftPrompt& final_prompt,
                             const PromptEvaluator& evaluator);

struct TphnetLossAndGrad {
  Scalar loss = 0;  // including the regularizer
  TphnetParams grad;
  Vector d_z;
};

// Full objective for one batch: classifier NLL on g(z) plus the prior
// penalty (when `prior` is non-null).
TphnetLossAndGrad tphnet_loss_and_grad(const Classifier& model, std::span<const EncodedExample> batch,
                                       const TphnetParams& params, const Eigen::Ref<const Vector>& z,
                                       const SoftPrompt* prior, int k, Scalar beta);

void save_tphnet(const TphnetParams& params, const ModelConfig& config, const std::string& path);
TphnetParams load_tphnet(const std::string& path, const ModelConfig& config);

}  // namespace cptrd
