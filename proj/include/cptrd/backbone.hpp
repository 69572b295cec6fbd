#pragma once

#include "cptrd/model_config.hpp"
#include "cptrd/soft_prompt.hpp"
#include "cptrd/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cptrd {

// Row-vector convention throughout: activations are n x d, weights are in x out,
// biases are 1 x out.
struct LayerWeights {
  Matrix wq, wk, wv, wo;
  Matrix bq, bk, bv, bo;
  Matrix ln1_gain, ln1_bias;
  Matrix ln2_gain, ln2_bias;
  Matrix ffn_in, ffn_in_bias;
  Matrix ffn_out, ffn_out_bias;

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    fn(prefix + "wq", self.wq);
    fn(prefix + "wk", self.wk);
    fn(prefix + "wv", self.wv);
    fn(prefix + "wo", self.wo);
    fn(prefix + "bq", self.bq);
    fn(prefix + "bk", self.bk);
    fn(prefix + "bv", self.bv);
    fn(prefix + "bo", self.bo);
    fn(prefix + "ln1_gain", self.ln1_gain);
    fn(prefix + "ln1_bias", self.ln1_bias);
    fn(prefix + "ln2_gain", self.ln2_gain);
    fn(prefix + "ln2_bias", self.ln2_bias);
    fn(prefix + "ffn_in", self.ffn_in);
    fn(prefix + "ffn_in_bias", self.ffn_in_bias);
    fn(prefix + "ffn_out", self.ffn_out);
    fn(prefix + "ffn_out_bias", self.ffn_out_bias);
  }
};

// All parameters of the masked language model. The MLM decoder is tied to
// `token_embedding`; the CLS head reads the first position.
struct BackboneWeights {
  Matrix token_embedding;     // V x d
  Matrix position_embedding;  // max_seq x d
  std::vector<LayerWeights> layers;
  Matrix final_ln_gain, final_ln_bias;
  Matrix head_transform, head_transform_bias;  // d x d, 1 x d
  Matrix head_ln_gain, head_ln_bias;
  Matrix output_bias;  // 1 x V
  Matrix cls_weight;   // d x 2
  Matrix cls_bias;     // 1 x 2

  template <typename Fn>
  void for_each(Fn&& fn) {
    visit_all(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit_all(*this, fn);
  }

  static BackboneWeights zeros(const ModelConfig& config);
  std::int64_t parameter_count() const;
  void set_zero();

 private:
  template <typename Self, typename Fn>
  static void visit_all(Self& self, Fn& fn) {
    fn(std::string("token_embedding"), self.token_embedding);
    fn(std::string("position_embedding"), self.position_embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i)
      LayerWeights::visit(self.layers[i], "layer" + std::to_string(i) + ".", fn);
    fn(std::string("final_ln_gain"), self.final_ln_gain);
    fn(std::string("final_ln_bias"), self.final_ln_bias);
    fn(std::string("head_transform"), self.head_transform);
    fn(std::string("head_transform_bias"), self.head_transform_bias);
    fn(std::string("head_ln_gain"), self.head_ln_gain);
    fn(std::string("head_ln_bias"), self.head_ln_bias);
    fn(std::string("output_bias"), self.output_bias);
    fn(std::string("cls_weight"), self.cls_weight);
    fn(std::string("cls_bias"), self.cls_bias);
  }
};

// Per-layer activations kept for the backward pass.
struct LayerNormCache {
  Matrix normalized;
  Vector inv_std;
};

struct LayerTrace {
  Matrix input;
  LayerNormCache ln1;
  Matrix ln1_out;
  LayerNormCache prefix_ln;  // deep prefix rows pass through ln1 as well
  Matrix prefix_ln_out;
  Matrix q, k, v;  // k and v include prefix rows first
  std::vector<Matrix> attention;  // per head, n x (prefix + n)
  Matrix context;
  Matrix residual;  // input + attention output
  LayerNormCache ln2;
  Matrix ln2_out;
  Matrix ffn_pre;
  Matrix ffn_tanh;
  Matrix ffn_act;
};

struct EncoderTrace {
  std::vector<LayerTrace> layers;
  LayerNormCache final_ln;
  Matrix hidden;  // n x d, after the final layer norm
  const SoftPrompt* prefix = nullptr;
};

struct EncoderGrad {
  Matrix embeddings;  // n x d
  RowMatrix prefix;   // deep prompt shaped, empty when no prefix
};

// Frozen masked-LM backbone. Parameters can only be modified after an
// explicit thaw, which the fine-tuning learner uses.
class Backbone {
 public:
  Backbone() = default;
  Backbone(ModelConfig config, BackboneWeights weights);

  // Seeded random initialisation (not pretrained).
  static Backbone initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const BackboneWeights& weights() const { return weights_; }

  void thaw() { thawed_ = true; }
  bool thawed() const { return thawed_; }
  // Throws std::logic_error unless thawed.
  BackboneWeights& mutable_weights();

  std::uint64_t digest() const;
  std::int64_t parameter_count() const { return weights_.parameter_count(); }

  // Forward through all layers. `prefix` supplies per-layer key/value rows
  // (deep prompts) and may be null.
  EncoderTrace encode(const Matrix& embeddings, const SoftPrompt* prefix) const;
  // Backward from d(hidden). Parameter gradients are accumulated into
  // `param_grads` when non-null.
  EncoderGrad encode_backward(const EncoderTrace& trace, const Matrix& d_hidden,
                              BackboneWeights* param_grads) const;

  // MLM head: hidden rows -> transformed rows ready for the tied decoder.
  struct HeadTrace {
    Matrix input;
    Matrix pre;
    Matrix tanh;
    Matrix act;
    LayerNormCache ln;
    Matrix out;
  };
  HeadTrace head_forward(const Matrix& hidden_rows) const;
  Matrix head_backward(const HeadTrace& trace, const Matrix& d_out, BackboneWeights* param_grads) const;

 private:
  ModelConfig config_;
  BackboneWeights weights_;
  bool thawed_ = false;
};

// Building blocks shared with tests.
Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache);
Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache,
                           Matrix* d_gain, Matrix* d_bias);
Scalar gelu(Scalar x);
Scalar gelu_derivative(Scalar x);

}  // namespace cptrd
