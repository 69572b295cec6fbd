#include "cptrd/tphnet.hpp"

#include "cptrd/container.hpp"

#include <cmath>

namespace cptrd {

namespace {

Eigen::Index output_size(const ModelConfig& config) {
  return static_cast<Eigen::Index>(config.prompt_rows()) * config.d;
}

void check_same_shape(const SoftPrompt& a, const SoftPrompt& b) {
  if (a.mode() != b.mode() || a.values().rows() != b.values().rows() || a.values().cols() != b.values().cols())
    throw std::invalid_argument("prompt shapes differ");
}

}  // namespace

TphnetParams TphnetParams::zeros(const ModelConfig& config, int hidden) {
  if (hidden < 1) throw std::invalid_argument("tphnet: hidden size must be positive");
  const Eigen::Index out = output_size(config);
  return {Matrix::Zero(hidden, config.d), Vector::Zero(hidden), Matrix::Zero(out, hidden), Vector::Zero(out)};
}

TphnetParams TphnetParams::random(const ModelConfig& config, std::uint64_t seed, int hidden) {
  TphnetParams p = zeros(config, hidden);
  Rng rng(seed);
  const Scalar a1 = 1.0 / std::sqrt(static_cast<Scalar>(config.d));
  const Scalar a2 = 0.5 / std::sqrt(static_cast<Scalar>(config.d) * hidden);
  fill_uniform(p.w1, rng, -a1, a1);
  fill_uniform(p.w2, rng, -a2, a2);
  return p;
}

void TphnetParams::check_shape(const ModelConfig& config) const {
  const Eigen::Index h = w1.rows(), out = output_size(config);
  if (h < 1 || w1.cols() != config.d || b1.size() != h || w2.rows() != out || w2.cols() != h || b2.size() != out)
    throw std::invalid_argument("tphnet: parameter shapes do not match the model config");
}

void TphnetParams::set_zero() {
  w1.setZero(); b1.setZero(); w2.setZero(); b2.setZero();
}

bool TphnetParams::operator==(const TphnetParams& o) const {
  auto same = [](const auto& a, const auto& b) { return a.rows() == b.rows() && a.cols() == b.cols() && a == b; };
  return same(w1, o.w1) && same(b1, o.b1) && same(w2, o.w2) && same(b2, o.b2);
}

SoftPrompt generate(const TphnetParams& params, const Eigen::Ref<const Vector>& z, const ModelConfig& config,
                    TphnetTrace* trace) {
  params.check_shape(config);
  if (z.size() != config.d) throw std::invalid_argument("generate: task embedding has the wrong dimension");
  Vector h = (params.w1 * z + params.b1).array().tanh().matrix();
  SoftPrompt out = SoftPrompt::zeros(config);
  out.flat() = params.w2 * h + params.b2;
  if (trace) trace->hidden = std::move(h);
  return out;
}

void generate_backward(const TphnetParams& params, const Eigen::Ref<const Vector>& z, const TphnetTrace& trace,
                       const SoftPrompt& d_prompt, TphnetParams& grads, Vector* d_z) {
  const auto g = d_prompt.flat();
  grads.b2 += g;
  grads.w2.noalias() += g * trace.hidden.transpose();
  const Vector d_pre = ((params.w2.transpose() * g).array() * (1.0 - trace.hidden.array().square())).matrix();
  grads.b1 += d_pre;
  grads.w1.noalias() += d_pre * z.transpose();
  if (d_z) d_z->noalias() += params.w1.transpose() * d_pre;
}

Scalar regularized_loss(Scalar base_loss, const SoftPrompt& generated, const SoftPrompt& prior, int k, Scalar beta) {
  check_same_shape(generated, prior);
  if (k < 2) return base_loss;
  return base_loss + beta / static_cast<Scalar>(k - 1) * (generated.values() - prior.values()).squaredNorm();
}

SoftPrompt regularizer_grad(const SoftPrompt& generated, const SoftPrompt& prior, int k, Scalar beta) {
  check_same_shape(generated, prior);
  SoftPrompt g = generated;
  if (k < 2)
    g.values().setZero();
  else
    g.values() = 2 * beta / static_cast<Scalar>(k - 1) * (generated.values() - prior.values());
  return g;
}

std::optional<SplEntry> sample_prior(const SourcePromptLibrary& library, Rng& rng) {
  const auto entries = library.snapshot();
  if (entries.empty()) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(0, entries.size() - 1);
  return *entries[pick(rng)];
}

std::vector<int> consolidate(SourcePromptLibrary& library, const SoftPrompt& final_prompt,
                             const PromptEvaluator& evaluator) {
  const auto entries = library.snapshot();
  std::vector<std::pair<int, double>> wins;
  for (const auto& e : entries) {
    const double f1 = evaluator(e->task_id, final_prompt);
    if (f1 >= e->recorded_f1) wins.emplace_back(e->task_id, f1);
  }
  std::vector<int> replaced;
  for (const auto& [id, f1] : wins) {
    library.replace(id, final_prompt, f1);
    replaced.push_back(id);
  }
  return replaced;
}

TphnetLossAndGrad tphnet_loss_and_grad(const Classifier& model, std::span<const EncodedExample> batch,
                                       const TphnetParams& params, const Eigen::Ref<const Vector>& z,
                                       const SoftPrompt* prior, int k, Scalar beta) {
  const ModelConfig& config = model.backbone->config();
  TphnetTrace trace;
  const SoftPrompt prompt = generate(params, z, config, &trace);
  PromptLossAndGrad base = prompt_loss_and_grad(model, batch, prompt);
  TphnetLossAndGrad out;
  out.loss = base.loss;
  if (prior) {
    out.loss = regularized_loss(base.loss, prompt, *prior, k, beta);
    base.grad.values() += regularizer_grad(prompt, *prior, k, beta).values();
  }
  out.grad = TphnetParams::zeros(config, params.hidden());
  out.d_z = Vector::Zero(z.size());
  generate_backward(params, z, trace, base.grad, out.grad, &out.d_z);
  return out;
}

void save_tphnet(const TphnetParams& params, const ModelConfig& config, const std::string& path) {
  params.check_shape(config);
  Container c;
  c.config = config;
  c.metadata = {{"kind", "tphnet"}, {"hidden", params.hidden()}};
  params.for_each([&](const char* name, const auto& m) {
    NamedTensor t;
    t.name = name;
    if (m.cols() == 1)
      t.shape = {static_cast<std::uint64_t>(m.rows())};
    else
      t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    t.values = m.cols() == 1 ? RowMatrix(m.transpose()) : RowMatrix(m);
    t.dtype = DType::f64;
    c.tensors.push_back(std::move(t));
  });
  write_container(path, c);
}

TphnetParams load_tphnet(const std::string& path, const ModelConfig& config) {
  const Container c = read_container(path);
  if (c.metadata.value("kind", "") != "tphnet") throw FormatError("container is not a tphnet checkpoint", 0);
  if (!c.config.same_architecture(config) || c.config.injection_mode != config.injection_mode)
    throw FormatError("tphnet checkpoint was written for a different model config", 0);
  TphnetParams p = TphnetParams::zeros(config, c.metadata.value("hidden", kTphnetHidden));
  p.for_each([&](const char* name, auto& m) {
    const NamedTensor& t = c.get(name);
    if (t.values.size() != m.size()) throw FormatError(std::string("tensor ") + name + " has the wrong size", 0);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index col = 0; col < m.cols(); ++col) m(r, col) = t.values.data()[r * m.cols() + col];
  });
  return p;
}

}  // namespace cptrd
