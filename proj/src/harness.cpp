#include "cptrd/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace cptrd {

std::string_view to_string(Learner learner) {
  switch (learner) {
    case Learner::finetune: return "finetune";
    case Learner::prompt_tuning: return "prompt-tuning";
    case Learner::p_tuning_v2: return "p-tuning-v2";
    case Learner::cpt_rd: return "cpt-rd";
  }
  return "?";
}

Learner parse_learner(std::string_view text) {
  for (const Learner l : {Learner::finetune, Learner::prompt_tuning, Learner::p_tuning_v2, Learner::cpt_rd})
    if (text == to_string(l)) return l;
  throw std::invalid_argument("unknown learner '" + std::string(text) + "'");
}

std::string_view to_string(InitStrategy init) {
  switch (init) {
    case InitStrategy::random: return "random";
    case InitStrategy::clinit: return "clinit";
    case InitStrategy::siminit: return "siminit";
    case InitStrategy::meaninit: return "meaninit";
  }
  return "?";
}

InitStrategy parse_init(std::string_view text) {
  for (const InitStrategy s : {InitStrategy::random, InitStrategy::clinit, InitStrategy::siminit, InitStrategy::meaninit})
    if (text == to_string(s)) return s;
  throw std::invalid_argument("unknown init strategy '" + std::string(text) + "'");
}

std::optional<InjectionMode> MethodConfig::injection() const {
  switch (learner) {
    case Learner::finetune: return std::nullopt;
    case Learner::prompt_tuning: return InjectionMode::shallow;
    default: return InjectionMode::deep;
  }
}

TuningMode MethodConfig::tuning_mode() const {
  if (learner == Learner::finetune) return TuningMode::finetune;
  if (learner == Learner::prompt_tuning) return TuningMode::shallow_prompt;
  return tphnet ? TuningMode::deep_prompt_tphnet : TuningMode::deep_prompt;
}

void MethodConfig::validate() const {
  if (name.empty()) throw std::invalid_argument("method: name must not be empty");
  if (name.find_first_of("/\\ ") != std::string::npos || name == "." || name == "..")
    throw std::invalid_argument("method '" + name + "': name must be usable as a directory name");
  if (tphnet && learner != Learner::cpt_rd) throw std::invalid_argument("method '" + name + "': tphnet requires cpt-rd");
  if (init != InitStrategy::random && learner != Learner::cpt_rd)
    throw std::invalid_argument("method '" + name + "': init strategies other than random require cpt-rd");
  if (rehearsal_per_domain < 0) throw std::invalid_argument("method '" + name + "': rehearsal_per_domain must be >= 0");
  if (mtl && (tphnet || rehearsal_per_domain > 0 || init != InitStrategy::random))
    throw std::invalid_argument("method '" + name + "': mtl excludes tphnet, rehearsal and transfer init");
}

nlohmann::json to_json(const MethodConfig& m) {
  return {{"name", m.name},
          {"learner", to_string(m.learner)},
          {"head", to_string(m.head)},
          {"init", to_string(m.init)},
          {"tphnet", m.tphnet},
          {"rehearsal_per_domain", m.rehearsal_per_domain},
          {"mtl", m.mtl}};
}

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw std::invalid_argument(where + ": unknown key '" + key + "'");
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument(where + ": key '" + key + "' has the wrong type");
  }
}

}  // namespace

MethodConfig method_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"name", "learner", "head", "init", "tphnet", "rehearsal_per_domain", "mtl"}, "method");
  MethodConfig m;
  std::string learner = "cpt-rd", head = "verbalizer", init = "random";
  read(j, "learner", learner, "method");
  read(j, "head", head, "method");
  read(j, "init", init, "method");
  m.learner = parse_learner(learner);
  m.head = parse_head_mode(head);
  m.init = parse_init(init);
  read(j, "tphnet", m.tphnet, "method");
  read(j, "rehearsal_per_domain", m.rehearsal_per_domain, "method");
  read(j, "mtl", m.mtl, "method");
  m.name = std::string(to_string(m.learner));
  if (m.learner == Learner::cpt_rd && m.init != InitStrategy::random) m.name += "-" + std::string(to_string(m.init));
  if (m.tphnet) m.name += "-tphnet";
  if (m.rehearsal_per_domain > 0) m.name += "-rehearsal";
  if (m.mtl) m.name += "-mtl";
  read(j, "name", m.name, "method");
  m.validate();
  return m;
}

void TrainingConfig::validate() const {
  if (!(prompt_lr > 0 && baseline_lr > 0 && finetune_lr > 0 && tphnet_lr > 0))
    throw std::invalid_argument("training: learning rates must be positive");
  if (batch_size < 1 || max_epochs < 1 || patience < 1 || few_shot_steps < 0)
    throw std::invalid_argument("training: batch_size, max_epochs and patience must be >= 1, few_shot_steps >= 0");
  for (const int k : k_shots)
    if (k < 1) throw std::invalid_argument("training: k_shots entries must be >= 1");
  if (!(beta >= 0)) throw std::invalid_argument("training: beta must be >= 0");
  if (!(max_grad_norm >= 0)) throw std::invalid_argument("training: max_grad_norm must be >= 0");
}

nlohmann::json to_json(const TrainingConfig& t) {
  return {{"prompt_lr", t.prompt_lr},       {"baseline_lr", t.baseline_lr},   {"finetune_lr", t.finetune_lr},
          {"tphnet_lr", t.tphnet_lr},       {"batch_size", t.batch_size},     {"max_epochs", t.max_epochs},
          {"patience", t.patience},         {"few_shot_steps", t.few_shot_steps}, {"k_shots", t.k_shots},
          {"beta", t.beta},                 {"few_shot_on_test", t.few_shot_on_test}, {"max_grad_norm", t.max_grad_norm}};
}

double clip_factor(double norm, double max_norm) {
  return max_norm > 0 && norm > max_norm ? max_norm / norm : 1.0;
}

TrainingConfig training_from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"prompt_lr", "baseline_lr", "finetune_lr", "tphnet_lr", "batch_size", "max_epochs", "patience",
                  "few_shot_steps", "k_shots", "beta", "few_shot_on_test", "max_grad_norm"},
                 "training");
  TrainingConfig t;
  read(j, "prompt_lr", t.prompt_lr, "training");
  read(j, "baseline_lr", t.baseline_lr, "training");
  read(j, "finetune_lr", t.finetune_lr, "training");
  read(j, "tphnet_lr", t.tphnet_lr, "training");
  read(j, "batch_size", t.batch_size, "training");
  read(j, "max_epochs", t.max_epochs, "training");
  read(j, "patience", t.patience, "training");
  read(j, "few_shot_steps", t.few_shot_steps, "training");
  read(j, "k_shots", t.k_shots, "training");
  read(j, "beta", t.beta, "training");
  read(j, "few_shot_on_test", t.few_shot_on_test, "training");
  read(j, "max_grad_norm", t.max_grad_norm, "training");
  t.validate();
  return t;
}

nlohmann::json to_json(const StageRecord& s) {
  nlohmann::json few = nlohmann::json::object();
  for (const auto& [k, f1] : s.few_shot_f1) few[std::to_string(k)] = f1;
  return {{"task_id", s.task_id},
          {"task", s.task},
          {"init", s.init},
          {"source_task", s.source_task ? nlohmann::json(*s.source_task) : nlohmann::json(nullptr)},
          {"zero_shot_f1", s.zero_shot_f1},
          {"few_shot_f1", few},
          {"full_shot_f1", s.full_shot_f1},
          {"epochs", s.epochs},
          {"best_validation_f1", s.best_validation_f1},
          {"replaced", s.replaced},
          {"digest_before", s.digest_before},
          {"digest_after", s.digest_after}};
}

namespace {

std::vector<EncodedExample> sample_domain(const std::vector<EncodedExample>& train, int per_domain, std::uint64_t seed) {
  if (per_domain <= 0) return {};
  if (static_cast<std::size_t>(per_domain) >= train.size()) return train;
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(per_domain));
  std::sort(idx.begin(), idx.end());
  std::vector<EncodedExample> out;
  for (const auto i : idx) out.push_back(train[i]);
  return out;
}

// Visits matching matrices of two weight sets.
template <typename Fn>
void zip_weights(BackboneWeights& a, const BackboneWeights& b, Fn&& fn) {
  std::vector<const Matrix*> bs;
  b.for_each([&](const std::string&, const Matrix& m) { bs.push_back(&m); });
  std::size_t i = 0;
  a.for_each([&](const std::string&, Matrix& m) { fn(m, *bs[i++]); });
}

struct EarlyStopResult {
  int epochs = 0;
  double best = 0;
};

// Epoch loop with validation-based early stopping: an epoch counts as an
// improvement only when validation F1 is strictly higher than the best so far.
template <typename Step, typename Validate, typename Save, typename Restore>
EarlyStopResult train_early_stopping(std::vector<EncodedExample> data, int batch, int max_epochs, int patience,
                                     Rng& rng, Step&& step, Validate&& validate, Save&& save, Restore&& restore) {
  EarlyStopResult out;
  double best = -1;
  int since = 0;
  for (int epoch = 1; epoch <= max_epochs; ++epoch) {
    std::shuffle(data.begin(), data.end(), rng);
    for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch)) {
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch), data.size() - i);
      step(std::span<const EncodedExample>(data.data() + i, n));
    }
    out.epochs = epoch;
    const double v = validate();
    if (v > best) {
      best = v;
      since = 0;
      save();
    } else if (++since >= patience) {
      break;
    }
  }
  restore();
  out.best = best;
  return out;
}

// Fixed number of minibatch steps, cycling through reshuffled passes.
template <typename Step>
void train_steps(std::vector<EncodedExample> data, int batch, int steps, Rng& rng, Step&& step) {
  if (data.empty() || steps <= 0) return;
  const std::size_t b = std::min<std::size_t>(static_cast<std::size_t>(batch), data.size());
  std::size_t pos = data.size();
  for (int s = 0; s < steps; ++s) {
    if (pos + b > data.size()) {
      std::shuffle(data.begin(), data.end(), rng);
      pos = 0;
    }
    step(std::span<const EncodedExample>(data.data() + pos, b));
    pos += b;
  }
}

std::vector<EncodedExample> concat(const std::vector<EncodedExample>& a,
                                   const std::vector<std::vector<EncodedExample>>& rest) {
  std::vector<EncodedExample> out = a;
  for (const auto& r : rest) out.insert(out.end(), r.begin(), r.end());
  return out;
}

}  // namespace

std::vector<std::vector<EncodedExample>> rehearsal_buffer(std::span<const EncodedTask> tasks, int per_domain,
                                                          std::uint64_t seed) {
  std::vector<std::vector<EncodedExample>> out;
  for (std::size_t i = 0; i < tasks.size(); ++i)
    out.push_back(sample_domain(tasks[i].train, per_domain, mix_seed(seed, {seed_tag::rehearsal, i + 1})));
  return out;
}

double evaluate_f1(const Classifier& model, const SoftPrompt* prompt, std::span<const EncodedExample> examples) {
  std::vector<int> pred, gold;
  pred.reserve(examples.size());
  gold.reserve(examples.size());
  for (const auto& e : examples) {
    pred.push_back(predict(model, prompt, e).argmax());
    gold.push_back(e.label);
  }
  return f1_score(pred, gold);
}

struct StreamRunner::State {
  MethodConfig method;
  TrainingConfig training;
  std::uint64_t seed = 0;
  ProgressFn progress;
  std::span<const EncodedTask> tasks;
  const Verbalizer* verbalizer = nullptr;

  Backbone frozen;  // prompt learners: never written
  Backbone tuned;   // fine-tuning learner: thawed copy
  std::uint64_t frozen_digest = 0;
  ModelConfig config;

  SoftPrompt baseline_prompt;
  SoftPrompt current;  // evolving prompt of the prompt baselines
  SourcePromptLibrary library;
  std::optional<TphnetParams> tph;
  RMatrix r;
  std::vector<StageRecord> stages;
  std::vector<std::vector<EncodedExample>> buffer;
  int done = 0;

  bool is_finetune() const { return method.learner == Learner::finetune; }
  Classifier frozen_model() const { return {&frozen, verbalizer, method.head}; }
  Classifier model_of(const Backbone& b) const { return {&b, verbalizer, method.head}; }
  int n() const { return static_cast<int>(tasks.size()); }

  void say(const std::string& msg) const {
    if (progress) progress(msg);
  }

  double eval_prompt(const SoftPrompt& p, std::span<const EncodedExample> xs) const {
    return evaluate_f1(frozen_model(), &p, xs);
  }
  double eval_tuned(const Backbone& b, std::span<const EncodedExample> xs) const {
    return evaluate_f1(model_of(b), nullptr, xs);
  }

  std::string model_digest() const { return hex_digest(is_finetune() ? tuned.digest() : frozen.digest()); }

  void audit(const char* where) const {
    if (frozen.digest() != frozen_digest)
      throw std::logic_error(std::string("frozen backbone changed during ") + where);
  }

  // --- parameter updates -------------------------------------------------
  Scalar prompt_step(SoftPrompt& p, std::span<const EncodedExample> batch, double lr) const {
    PromptLossAndGrad g = prompt_loss_and_grad(frozen_model(), batch, p);
    const double c = clip_factor(g.grad.values().norm(), training.max_grad_norm);
    p.values() -= lr * c * g.grad.values();
    return g.loss;
  }

  Scalar finetune_step(Backbone& b, std::span<const EncodedExample> batch, BackboneWeights& grads) const {
    grads.set_zero();
    const Scalar loss = loss_and_grad(model_of(b), batch, nullptr, {nullptr, &grads});
    double sq = 0;
    grads.for_each([&sq](const std::string&, const Matrix& g) { sq += g.squaredNorm(); });
    const double lr = training.finetune_lr * clip_factor(std::sqrt(sq), training.max_grad_norm);
    zip_weights(b.mutable_weights(), grads, [lr](Matrix& w, const Matrix& g) { w -= lr * g; });
    return loss;
  }

  // Trains a prompt in place with early stopping; returns epochs and best F1.
  EarlyStopResult fit_prompt(SoftPrompt& p, const std::vector<EncodedExample>& data,
                             std::span<const EncodedExample> validation, double lr, Rng& rng) const {
    SoftPrompt best = p;
    return train_early_stopping(
        data, training.batch_size, training.max_epochs, training.patience, rng,
        [&](std::span<const EncodedExample> b) { prompt_step(p, b, lr); },
        [&] { return eval_prompt(p, validation); }, [&] { best = p; }, [&] { p = best; });
  }

  EarlyStopResult fit_backbone(Backbone& b, const std::vector<EncodedExample>& data,
                               std::span<const EncodedExample> validation, Rng& rng) const {
    BackboneWeights grads = BackboneWeights::zeros(config);
    BackboneWeights best = b.weights();
    return train_early_stopping(
        data, training.batch_size, training.max_epochs, training.patience, rng,
        [&](std::span<const EncodedExample> batch) { finetune_step(b, batch, grads); },
        [&] { return eval_tuned(b, validation); }, [&] { best = b.weights(); },
        [&] { b.mutable_weights() = best; });
  }

  // TPHNet full-shot training of the shared generator and this task's z.
  EarlyStopResult fit_tphnet(Vector& z, const std::vector<EncodedExample>& data,
                             std::span<const EncodedExample> validation, int k, Rng& rng) {
    TphnetParams& params = *tph;
    Rng prior_rng(mix_seed(seed, {seed_tag::prior, static_cast<std::uint64_t>(k)}));
    TphnetParams best_params = params;
    Vector best_z = z;
    const double lr = training.tphnet_lr;
    return train_early_stopping(
        data, training.batch_size, training.max_epochs, training.patience, rng,
        [&](std::span<const EncodedExample> b) {
          const std::optional<SplEntry> prior = sample_prior(library, prior_rng);
          TphnetLossAndGrad g = tphnet_loss_and_grad(frozen_model(), b, params, z, prior ? &prior->prompt : nullptr, k,
                                                     training.beta);
          const double norm = std::sqrt(g.grad.w1.squaredNorm() + g.grad.b1.squaredNorm() + g.grad.w2.squaredNorm() +
                                        g.grad.b2.squaredNorm() + g.d_z.squaredNorm());
          const double step = lr * clip_factor(norm, training.max_grad_norm);
          params.w1 -= step * g.grad.w1;
          params.b1 -= step * g.grad.b1;
          params.w2 -= step * g.grad.w2;
          params.b2 -= step * g.grad.b2;
          z -= step * g.d_z;
        },
        [&] { return eval_prompt(generate(params, z, config), validation); },
        [&] {
          best_params = params;
          best_z = z;
        },
        [&] {
          params = best_params;
          z = best_z;
        });
  }

  InitResult transfer_init(const EncodedTask& task) const {
    const std::uint64_t s = mix_seed(seed, {seed_tag::baseline});
    switch (method.init) {
      case InitStrategy::random: return {baseline_prompt, std::nullopt};
      case InitStrategy::clinit: return init_clinit(library, config, s);
      case InitStrategy::siminit: return init_siminit(library, task_encode(task.train, frozen), config, s);
      case InitStrategy::meaninit: return init_meaninit(library, config, s);
    }
    throw std::logic_error("unreachable");
  }
};

StreamRunner::StreamRunner(const Backbone& backbone, const Verbalizer& verbalizer, std::span<const EncodedTask> tasks,
                           MethodConfig method, TrainingConfig training, std::uint64_t seed, ProgressFn progress)
    : state_(std::make_unique<State>()) {
  method.validate();
  training.validate();
  if (tasks.size() < 2) throw std::invalid_argument("stream needs at least two tasks");
  verbalizer.validate(backbone.config().vocab_size);
  State& s = *state_;
  for (const auto& t : tasks) {
    if (t.train.empty() || t.validation.empty() || t.test.empty())
      throw std::invalid_argument("task " + t.name + " is missing a train/validation/test split");
    if (!method.mtl)
      for (const int k : training.k_shots)
        if (!t.few_shot.count(k))
          throw std::invalid_argument("task " + t.name + " is missing its " + std::to_string(k) + "-shot split");
  }
  s.method = std::move(method);
  s.training = std::move(training);
  s.seed = seed;
  s.progress = std::move(progress);
  s.tasks = tasks;
  s.verbalizer = &verbalizer;

  s.config = backbone.config();
  if (const auto mode = s.method.injection()) s.config.injection_mode = *mode;
  s.frozen = Backbone(s.config, backbone.weights());
  s.frozen_digest = s.frozen.digest();
  s.r = RMatrix(s.n());

  if (s.is_finetune()) {
    s.tuned = s.frozen;
    s.tuned.thaw();
    for (int i = 1; i <= s.n(); ++i) s.r.set(0, i, s.eval_tuned(s.tuned, s.tasks[i - 1].test));
  } else {
    s.baseline_prompt = SoftPrompt::random(s.config, mix_seed(seed, {seed_tag::baseline}));
    s.current = s.baseline_prompt;
    for (int i = 1; i <= s.n(); ++i) s.r.set(0, i, s.eval_prompt(s.baseline_prompt, s.tasks[i - 1].test));
  }
  if (s.method.tphnet) s.tph = TphnetParams::random(s.config, mix_seed(seed, {seed_tag::tphnet}));
}

StreamRunner::~StreamRunner() = default;

int StreamRunner::completed() const { return state_->done; }
const RMatrix& StreamRunner::rmatrix() const { return state_->r; }
const SourcePromptLibrary& StreamRunner::library() const { return state_->library; }

RunResult StreamRunner::result() const {
  const State& s = *state_;
  return {s.r, s.stages, s.library, s.tph, trainable_fraction(s.config, s.method.tuning_mode())};
}

const StageRecord& StreamRunner::run_task(int k) {
  State& s = *state_;
  if (s.method.mtl) throw std::logic_error("run_task: mtl methods train with run_pooled");
  if (k != s.done + 1 || k > s.n()) throw std::logic_error("run_task: tasks must run in order");
  const EncodedTask& task = s.tasks[static_cast<std::size_t>(k - 1)];
  const auto uk = static_cast<std::uint64_t>(k);
  const bool cpt = s.method.learner == Learner::cpt_rd;

  StageRecord rec;
  rec.task_id = k;
  rec.task = task.name;
  rec.digest_before = s.model_digest();

  // Zero-shot: transfer initialisation (CPT-RD) or the current parameters.
  InitResult init;
  if (cpt) {
    init = s.transfer_init(task);
    rec.init = std::string(to_string(s.method.init));
    rec.source_task = init.source;
  } else {
    rec.init = "current";
  }
  rec.zero_shot_f1 = s.is_finetune() ? s.eval_tuned(s.tuned, task.test)
                                     : s.eval_prompt(cpt ? init.prompt : s.current, task.test);
  s.r.set(k - 1, k, rec.zero_shot_f1);

  // Few-shot: k examples per class, a fixed number of steps, no early stopping.
  const std::vector<EncodedExample>& fs_eval = s.training.few_shot_on_test ? task.test : task.validation;
  for (const int shots : s.training.k_shots) {
    Rng rng(mix_seed(s.seed, {seed_tag::few_shot, uk, static_cast<std::uint64_t>(shots)}));
    const auto& data = task.few_shot.at(shots);
    if (s.is_finetune()) {
      Backbone copy = s.tuned;
      BackboneWeights grads = BackboneWeights::zeros(s.config);
      train_steps(data, s.training.batch_size, s.training.few_shot_steps, rng,
                  [&](std::span<const EncodedExample> b) { s.finetune_step(copy, b, grads); });
      rec.few_shot_f1[shots] = s.eval_tuned(copy, fs_eval);
    } else {
      SoftPrompt p = cpt ? init.prompt : s.current;
      const double lr = cpt ? s.training.prompt_lr : s.training.baseline_lr;
      train_steps(data, s.training.batch_size, s.training.few_shot_steps, rng,
                  [&](std::span<const EncodedExample> b) { s.prompt_step(p, b, lr); });
      rec.few_shot_f1[shots] = s.eval_prompt(p, fs_eval);
    }
  }
  s.audit("few-shot training");

  // Full-shot.
  const std::vector<EncodedExample> data = concat(task.train, s.buffer);
  Rng rng(mix_seed(s.seed, {seed_tag::shuffle, uk}));
  EarlyStopResult fit;
  if (cpt) {
    const Vector z_task = task_encode(task.train, s.frozen);
    SoftPrompt final_prompt;
    if (s.tph) {
      Vector z = z_task;
      fit = s.fit_tphnet(z, data, task.validation, k, rng);
      final_prompt = generate(*s.tph, z, s.config);
    } else {
      final_prompt = SoftPrompt::random(s.config, mix_seed(s.seed, {seed_tag::full_shot, uk}));
      fit = s.fit_prompt(final_prompt, data, task.validation, s.training.prompt_lr, rng);
    }
    rec.full_shot_f1 = s.eval_prompt(final_prompt, task.test);
    if (s.tph) {
      rec.replaced = consolidate(s.library, final_prompt, [&](int j, const SoftPrompt& p) {
        return s.eval_prompt(p, s.tasks[static_cast<std::size_t>(j - 1)].test);
      });
    }
    s.library.store(k, final_prompt, z_task, rec.full_shot_f1);
    s.r.set(k, k, rec.full_shot_f1);
    for (int i = 1; i < k; ++i)
      s.r.set(k, i, s.eval_prompt(s.library.find(i)->prompt, s.tasks[static_cast<std::size_t>(i - 1)].test));
  } else if (s.is_finetune()) {
    fit = s.fit_backbone(s.tuned, data, task.validation, rng);
    for (int i = 1; i <= k; ++i) s.r.set(k, i, s.eval_tuned(s.tuned, s.tasks[static_cast<std::size_t>(i - 1)].test));
    rec.full_shot_f1 = s.r(k, k);
  } else {
    fit = s.fit_prompt(s.current, data, task.validation, s.training.baseline_lr, rng);
    for (int i = 1; i <= k; ++i)
      s.r.set(k, i, s.eval_prompt(s.current, s.tasks[static_cast<std::size_t>(i - 1)].test));
    rec.full_shot_f1 = s.r(k, k);
  }
  rec.epochs = fit.epochs;
  rec.best_validation_f1 = fit.best;
  s.audit("full-shot training");

  if (s.method.rehearsal_per_domain > 0)
    s.buffer.push_back(
        sample_domain(task.train, s.method.rehearsal_per_domain, mix_seed(s.seed, {seed_tag::rehearsal, uk})));

  rec.digest_after = s.model_digest();
  s.done = k;
  std::ostringstream msg;
  msg << s.method.name << " task " << k << "/" << s.n() << " (" << task.name << "): zero-shot " << rec.zero_shot_f1;
  for (const auto& [shots, f1] : rec.few_shot_f1) msg << ", " << shots << "-shot " << f1;
  msg << ", full-shot " << rec.full_shot_f1 << " after " << rec.epochs << " epochs";
  if (!rec.replaced.empty()) msg << ", replaced " << rec.replaced.size();
  s.say(msg.str());
  s.stages.push_back(std::move(rec));
  return s.stages.back();
}

void StreamRunner::run_pooled() {
  State& s = *state_;
  if (!s.method.mtl) throw std::logic_error("run_pooled: method is not in mtl mode");
  if (s.done != 0) throw std::logic_error("run_pooled: already run");
  std::vector<EncodedExample> train, validation;
  for (const auto& t : s.tasks) {
    train.insert(train.end(), t.train.begin(), t.train.end());
    validation.insert(validation.end(), t.validation.begin(), t.validation.end());
  }
  const std::string before = s.model_digest();
  Rng rng(mix_seed(s.seed, {seed_tag::shuffle, 0}));
  EarlyStopResult fit;
  SoftPrompt prompt;
  if (s.is_finetune()) {
    fit = s.fit_backbone(s.tuned, train, validation, rng);
  } else {
    prompt = s.method.learner == Learner::cpt_rd ? SoftPrompt::random(s.config, mix_seed(s.seed, {seed_tag::full_shot, 0}))
                                                 : s.current;
    const double lr = s.method.learner == Learner::cpt_rd ? s.training.prompt_lr : s.training.baseline_lr;
    fit = s.fit_prompt(prompt, train, validation, lr, rng);
    s.current = prompt;
  }
  s.audit("pooled training");
  const int n = s.n();
  for (int i = 1; i <= n; ++i) {
    const EncodedTask& t = s.tasks[static_cast<std::size_t>(i - 1)];
    const double f1 = s.is_finetune() ? s.eval_tuned(s.tuned, t.test) : s.eval_prompt(prompt, t.test);
    s.r.set(n, i, f1);
    StageRecord rec;
    rec.task_id = i;
    rec.task = t.name;
    rec.init = "pooled";
    rec.zero_shot_f1 = s.r(0, i);
    rec.full_shot_f1 = f1;
    rec.epochs = fit.epochs;
    rec.best_validation_f1 = fit.best;
    rec.digest_before = before;
    rec.digest_after = s.model_digest();
    s.stages.push_back(std::move(rec));
  }
  s.done = n;
  s.say(s.method.name + " pooled: " + std::to_string(fit.epochs) + " epochs, avg F1 " + std::to_string(avg_f1(s.r)));
}

RunResult run_stream(const Backbone& backbone, const Verbalizer& verbalizer, std::span<const EncodedTask> tasks,
                     const MethodConfig& method, const TrainingConfig& training, std::uint64_t seed,
                     const ProgressFn& progress) {
  StreamRunner runner(backbone, verbalizer, tasks, method, training, seed, progress);
  if (method.mtl)
    runner.run_pooled();
  else
    for (int k = 1; k <= static_cast<int>(tasks.size()); ++k) runner.run_task(k);
  return runner.result();
}

}  // namespace cptrd
