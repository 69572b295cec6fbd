#include "cptrd/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cptrd {

namespace {

int prompt_budget(const InjectionMode* mode, const ModelConfig& config) {
  return mode ? config.prompt_length : 0;
}

Matrix embed(const InputLayout& layout, const SoftPrompt* prompt, const Backbone& backbone) {
  const BackboneWeights& w = backbone.weights();
  const auto n = static_cast<Eigen::Index>(layout.positions.size());
  Matrix x(n, backbone.config().d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const TokenId t = layout.positions[static_cast<std::size_t>(i)];
    if (t == kPromptSlot)
      x.row(i) = prompt->values().row(i);
    else
      x.row(i) = w.token_embedding.row(t);
  }
  x += w.position_embedding.topRows(n);
  return x;
}

// Scatters d(embeddings) into the token and position tables.
void accumulate_embedding_grads(const InputLayout& layout, const Matrix& d_emb, BackboneWeights& g) {
  const auto n = static_cast<Eigen::Index>(layout.positions.size());
  g.position_embedding.topRows(n) += d_emb;
  for (Eigen::Index i = 0; i < n; ++i) {
    const TokenId t = layout.positions[static_cast<std::size_t>(i)];
    if (t != kPromptSlot) g.token_embedding.row(t) += d_emb.row(i);
  }
}

Scalar log_sum_exp(const Eigen::Ref<const Vector>& z) {
  const Scalar mx = z.maxCoeff();
  return mx + std::log((z.array() - mx).exp().sum());
}

}  // namespace

InputLayout assemble_layout(const InjectionMode* prompt_mode, std::span<const TokenId> claim,
                            std::span<const TokenId> comments, const ModelConfig& config) {
  if (claim.empty()) throw std::invalid_argument("assemble_input: empty claim");
  const int budget = config.max_seq - prompt_budget(prompt_mode, config) - 2;  // [MASK] and [SEP]
  if (budget < 1) throw std::invalid_argument("assemble_input: max_seq too small for the prompt");
  const auto claim_len = static_cast<int>(std::min<std::size_t>(claim.size(), static_cast<std::size_t>(budget)));
  const auto comment_len =
      static_cast<int>(std::min<std::size_t>(comments.size(), static_cast<std::size_t>(budget - claim_len)));

  InputLayout layout;
  if (prompt_mode && *prompt_mode == InjectionMode::shallow) {
    layout.prompt_rows = config.prompt_length;
    layout.positions.assign(static_cast<std::size_t>(config.prompt_length), kPromptSlot);
  }
  layout.mask_index = static_cast<int>(layout.positions.size());
  layout.positions.push_back(token::mask);
  layout.positions.insert(layout.positions.end(), claim.begin(), claim.begin() + claim_len);
  layout.positions.push_back(token::sep);
  layout.positions.insert(layout.positions.end(), comments.begin(), comments.begin() + comment_len);
  return layout;
}

AssembledInput assemble_input(const SoftPrompt* prompt, std::span<const TokenId> claim,
                              std::span<const TokenId> comments, const Backbone& backbone) {
  const ModelConfig& config = backbone.config();
  if (prompt) {
    if (prompt->dim() != config.d || prompt->length() != config.prompt_length ||
        (prompt->mode() == InjectionMode::deep && prompt->layers() != config.layers) ||
        prompt->values().rows() != static_cast<Eigen::Index>(prompt->layers()) * prompt->length())
      throw std::invalid_argument("assemble_input: prompt shape does not match the model config");
  }
  for (const TokenId t : claim)
    if (t < 0 || t >= config.vocab_size) throw std::invalid_argument("assemble_input: token id out of range");
  for (const TokenId t : comments)
    if (t < 0 || t >= config.vocab_size) throw std::invalid_argument("assemble_input: token id out of range");

  const InjectionMode mode = prompt ? prompt->mode() : InjectionMode::shallow;
  AssembledInput input;
  input.layout = assemble_layout(prompt ? &mode : nullptr, claim, comments, config);
  input.embeddings = embed(input.layout, prompt, backbone);
  if (prompt && prompt->mode() == InjectionMode::deep) input.prefix = prompt;
  return input;
}

ForwardOutput forward(const AssembledInput& input, const Backbone& backbone) {
  const EncoderTrace trace = backbone.encode(input.embeddings, input.prefix);
  const auto head = backbone.head_forward(trace.hidden.row(input.layout.mask_index));
  ForwardOutput out;
  out.mask_logits = (head.out * backbone.weights().token_embedding.transpose() + backbone.weights().output_bias)
                        .transpose();
  out.first_hidden = trace.hidden.row(0).transpose();
  return out;
}

LabelDistribution verbalize(const Eigen::Ref<const Vector>& mask_logits, const Verbalizer& verbalizer) {
  std::array<Scalar, label_count> lse{};
  for (int y = 0; y < label_count; ++y) {
    const auto& words = verbalizer.words(y);
    Vector z(static_cast<Eigen::Index>(words.size()));
    for (std::size_t i = 0; i < words.size(); ++i) z(static_cast<Eigen::Index>(i)) = mask_logits(words[i]);
    lse[static_cast<std::size_t>(y)] = log_sum_exp(z);
  }
  // p(y) = S_y / (S_0 + S_1) with S_y the summed vocab probability of V_y;
  // the vocab normaliser cancels.
  const Scalar mx = std::max(lse[0], lse[1]);
  const Scalar e0 = std::exp(lse[0] - mx);
  const Scalar e1 = std::exp(lse[1] - mx);
  LabelDistribution out;
  out.p = {e0 / (e0 + e1), e1 / (e0 + e1)};
  return out;
}

LabelDistribution classify_cls(const Eigen::Ref<const Vector>& first_hidden, const Backbone& backbone) {
  const BackboneWeights& w = backbone.weights();
  const RowVector logits = first_hidden.transpose() * w.cls_weight + w.cls_bias;
  const Scalar mx = logits.maxCoeff();
  const Scalar e0 = std::exp(logits(0) - mx);
  const Scalar e1 = std::exp(logits(1) - mx);
  LabelDistribution out;
  out.p = {e0 / (e0 + e1), e1 / (e0 + e1)};
  return out;
}

LabelDistribution predict(const Classifier& model, const SoftPrompt* prompt, const EncodedExample& example) {
  const Backbone& backbone = *model.backbone;
  const AssembledInput input = assemble_input(prompt, example.claim, example.comments, backbone);
  const EncoderTrace trace = backbone.encode(input.embeddings, input.prefix);
  if (model.head == HeadMode::cls) return classify_cls(trace.hidden.row(0).transpose(), backbone);

  const auto& words = model.verbalizer->all_words();
  const auto head = backbone.head_forward(trace.hidden.row(input.layout.mask_index));
  Vector logits = Vector::Constant(backbone.config().vocab_size, -std::numeric_limits<Scalar>::infinity());
  const BackboneWeights& w = backbone.weights();
  for (const TokenId v : words) logits(v) = head.out.row(0).dot(w.token_embedding.row(v)) + w.output_bias(0, v);
  return verbalize(logits, *model.verbalizer);
}

Scalar loss_and_grad(const Classifier& model, std::span<const EncodedExample> batch, const SoftPrompt* prompt,
                     const GradTargets& targets) {
  if (batch.empty()) throw std::invalid_argument("loss_and_grad: empty batch");
  const Backbone& backbone = *model.backbone;
  const BackboneWeights& w = backbone.weights();
  BackboneWeights* gw = targets.weights;
  Scalar total = 0;

  for (const EncodedExample& ex : batch) {
    if (ex.label != 0 && ex.label != 1) throw std::invalid_argument("loss_and_grad: label must be 0 or 1");
    const AssembledInput input = assemble_input(prompt, ex.claim, ex.comments, backbone);
    const EncoderTrace trace = backbone.encode(input.embeddings, input.prefix);
    Matrix d_hidden = Matrix::Zero(trace.hidden.rows(), trace.hidden.cols());
    Scalar loss = 0;

    if (model.head == HeadMode::cls) {
      const RowVector h0 = trace.hidden.row(0);
      const RowVector logits = h0 * w.cls_weight + w.cls_bias;
      const Scalar lse = log_sum_exp(logits.transpose());
      loss = lse - logits(ex.label);
      RowVector dr = (logits.array() - lse).exp().matrix();
      dr(ex.label) -= 1.0;
      if (gw) {
        gw->cls_weight.noalias() += h0.transpose() * dr;
        gw->cls_bias += dr;
      }
      d_hidden.row(0) = dr * w.cls_weight.transpose();
    } else {
      const Verbalizer& verb = *model.verbalizer;
      const auto& words = verb.all_words();
      const auto head = backbone.head_forward(trace.hidden.row(input.layout.mask_index));
      const auto nw = static_cast<Eigen::Index>(words.size());
      Vector z(nw);
      for (Eigen::Index i = 0; i < nw; ++i) {
        const TokenId v = words[static_cast<std::size_t>(i)];
        z(i) = head.out.row(0).dot(w.token_embedding.row(v)) + w.output_bias(0, v);
      }
      // Restricted softmax q over label words; loss = -log sum_{V_y} q.
      const Scalar lse_all = log_sum_exp(z);
      const Vector q = (z.array() - lse_all).exp().matrix();
      const auto n_label = static_cast<Eigen::Index>(verb.words(0).size());
      const Eigen::Index begin = ex.label == 0 ? 0 : n_label;
      const Eigen::Index count = ex.label == 0 ? n_label : nw - n_label;
      const Scalar q_label = q.segment(begin, count).sum();
      loss = -std::log(q_label);
      Vector dz = q;
      dz.segment(begin, count) -= q.segment(begin, count) / q_label;
      RowVector d_out = RowVector::Zero(backbone.config().d);
      for (Eigen::Index i = 0; i < nw; ++i) {
        const TokenId v = words[static_cast<std::size_t>(i)];
        d_out += dz(i) * w.token_embedding.row(v);
        if (gw) {
          gw->token_embedding.row(v) += dz(i) * head.out.row(0);
          gw->output_bias(0, v) += dz(i);
        }
      }
      d_hidden.row(input.layout.mask_index) = backbone.head_backward(head, d_out, gw);
    }

    if (!std::isfinite(loss)) throw NumericError("loss_and_grad: non-finite loss");
    total += loss;
    if (!targets.prompt && !gw) continue;

    const EncoderGrad g = backbone.encode_backward(trace, d_hidden, gw);
    if (targets.prompt && prompt) {
      if (prompt->mode() == InjectionMode::deep)
        *targets.prompt += g.prefix;
      else
        targets.prompt->topRows(input.layout.prompt_rows) += g.embeddings.topRows(input.layout.prompt_rows);
    }
    if (gw) accumulate_embedding_grads(input.layout, g.embeddings, *gw);
  }
  return total;
}

PromptLossAndGrad prompt_loss_and_grad(const Classifier& model, std::span<const EncodedExample> batch,
                                       const SoftPrompt& prompt) {
  PromptLossAndGrad out;
  out.grad = prompt;
  out.grad.values().setZero();
  out.loss = loss_and_grad(model, batch, &prompt, GradTargets{&out.grad.values(), nullptr});
  return out;
}

Vector task_encode(std::span<const EncodedExample> examples, const Backbone& backbone) {
  if (examples.empty()) throw std::invalid_argument("task_encode: empty dataset");
  const ModelConfig& config = backbone.config();
  const BackboneWeights& w = backbone.weights();
  Vector sum = Vector::Zero(config.d);
  for (const EncodedExample& ex : examples) {
    if (ex.claim.empty()) throw std::invalid_argument("task_encode: empty claim");
    std::vector<TokenId> tokens(ex.claim.begin(), ex.claim.end());
    tokens.push_back(token::sep);
    tokens.insert(tokens.end(), ex.comments.begin(), ex.comments.end());
    tokens.resize(std::min<std::size_t>(tokens.size(), static_cast<std::size_t>(config.max_seq)));
    const auto n = static_cast<Eigen::Index>(tokens.size());
    Matrix x(n, config.d);
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = w.token_embedding.row(tokens[static_cast<std::size_t>(i)]);
    x += w.position_embedding.topRows(n);
    const EncoderTrace trace = backbone.encode(x, nullptr);
    sum += trace.hidden.colwise().mean().transpose();
  }
  return sum / static_cast<Scalar>(examples.size());
}

Scalar mlm_loss_and_grad(const Backbone& backbone, const MaskedSequence& seq, BackboneWeights* grads) {
  const ModelConfig& config = backbone.config();
  const BackboneWeights& w = backbone.weights();
  const auto n = static_cast<Eigen::Index>(seq.tokens.size());
  if (n == 0 || n > config.max_seq) throw std::invalid_argument("mlm: bad sequence length");
  if (seq.targets.empty()) return 0;
  InputLayout layout;
  layout.positions = seq.tokens;
  Matrix x(n, config.d);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = w.token_embedding.row(seq.tokens[static_cast<std::size_t>(i)]);
  x += w.position_embedding.topRows(n);
  const EncoderTrace trace = backbone.encode(x, nullptr);

  const auto m = static_cast<Eigen::Index>(seq.targets.size());
  Matrix rows(m, config.d);
  for (Eigen::Index i = 0; i < m; ++i) rows.row(i) = trace.hidden.row(seq.targets[static_cast<std::size_t>(i)].first);
  const auto head = backbone.head_forward(rows);
  Matrix logits = head.out * w.token_embedding.transpose();
  logits.rowwise() += w.output_bias.row(0);
  Scalar loss = 0;
  Matrix d_logits(m, config.vocab_size);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Scalar lse = log_sum_exp(logits.row(i).transpose());
    const TokenId target = seq.targets[static_cast<std::size_t>(i)].second;
    loss += lse - logits(i, target);
    d_logits.row(i) = (logits.row(i).array() - lse).exp().matrix();
    d_logits(i, target) -= 1.0;
  }
  if (!std::isfinite(loss)) throw NumericError("mlm: non-finite loss");
  if (!grads) return loss;

  grads->token_embedding.noalias() += d_logits.transpose() * head.out;
  grads->output_bias += d_logits.colwise().sum();
  const Matrix d_rows = backbone.head_backward(head, d_logits * w.token_embedding, grads);
  Matrix d_hidden = Matrix::Zero(n, config.d);
  for (Eigen::Index i = 0; i < m; ++i) d_hidden.row(seq.targets[static_cast<std::size_t>(i)].first) += d_rows.row(i);
  const EncoderGrad g = backbone.encode_backward(trace, d_hidden, grads);
  accumulate_embedding_grads(layout, g.embeddings, *grads);
  return loss;
}

namespace {

std::int64_t backbone_parameter_count(const ModelConfig& c) {
  const std::int64_t d = c.d;
  const std::int64_t f = c.ffn();
  const std::int64_t v = c.vocab_size;
  const std::int64_t per_layer = 4 * d * d + 4 * d  // attention projections
                                 + 4 * d            // two layer norms
                                 + d * f + f + f * d + d;
  return v * d + static_cast<std::int64_t>(c.max_seq) * d + c.layers * per_layer + 2 * d  // final LN
         + d * d + d + 2 * d + v                                                         // MLM head
         + d * label_count + label_count;                                                // CLS head
}

}  // namespace

ParameterCount parameter_count(const ModelConfig& config, TuningMode mode) {
  config.validate();
  const std::int64_t backbone = backbone_parameter_count(config);
  const std::int64_t d = config.d;
  const std::int64_t shallow = static_cast<std::int64_t>(config.prompt_length) * d;
  const std::int64_t deep = config.layers * shallow;
  ParameterCount out;
  switch (mode) {
    case TuningMode::finetune:
      out.tunable = backbone;
      out.total = backbone;
      break;
    case TuningMode::shallow_prompt:
      out.tunable = shallow;
      out.total = backbone + shallow;
      break;
    case TuningMode::deep_prompt:
      out.tunable = deep;
      out.total = backbone + deep;
      break;
    case TuningMode::deep_prompt_tphnet: {
      const std::int64_t h = kTphnetHidden;
      // W1, b1, W2, b2 and the trainable task embedding.
      out.tunable = h * d + h + deep * h + deep + d;
      out.total = backbone + out.tunable;
      break;
    }
  }
  return out;
}

double trainable_fraction(const ModelConfig& config, TuningMode mode) {
  return parameter_count(config, mode).fraction();
}

}  // namespace cptrd
