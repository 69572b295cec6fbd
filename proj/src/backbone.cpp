#include "cptrd/backbone.hpp"

#include "cptrd/verbalizer.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace cptrd {

namespace {

constexpr Scalar kLayerNormEps = 1e-5;
constexpr Scalar kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr Scalar kGeluCubic = 0.044715;

Matrix row_sum(const Matrix& m) { return m.colwise().sum(); }

void softmax_rows(Matrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const Scalar mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp();
    s.row(r) /= s.row(r).sum();
  }
}

// Tanh-approximated GELU; `t` receives the inner tanh for the backward pass.
Matrix gelu_matrix(const Matrix& x, Matrix& t) {
  t = (kGeluScale * (x.array() + kGeluCubic * x.array().cube())).tanh();
  return (0.5 * x.array() * (1.0 + t.array())).matrix();
}

Matrix gelu_backward(const Matrix& x, const Matrix& t, const Matrix& dy) {
  const auto xa = x.array();
  const auto ta = t.array();
  return (dy.array() * (0.5 * (1.0 + ta) +
                        0.5 * xa * (1.0 - ta.square()) * kGeluScale * (1.0 + 3.0 * kGeluCubic * xa.square())))
      .matrix();
}

void add_bias(Matrix& x, const Matrix& bias) { x.rowwise() += bias.row(0); }

}  // namespace

Scalar gelu(Scalar x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + kGeluCubic * x * x * x)));
}

Scalar gelu_derivative(Scalar x) {
  const Scalar t = std::tanh(kGeluScale * (x + kGeluCubic * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache) {
  const Eigen::Index n = x.rows();
  const auto width = static_cast<Scalar>(x.cols());
  cache.normalized.resize(n, x.cols());
  cache.inv_std.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Scalar mean = x.row(r).sum() / width;
    const auto centered = (x.row(r).array() - mean).matrix();
    const Scalar var = centered.squaredNorm() / width;
    const Scalar inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(r) = inv;
    cache.normalized.row(r) = centered * inv;
  }
  Matrix out = cache.normalized.array().rowwise() * gain.row(0).array();
  add_bias(out, bias);
  return out;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache,
                           Matrix* d_gain, Matrix* d_bias) {
  if (d_gain) *d_gain += row_sum(dy.cwiseProduct(cache.normalized));
  if (d_bias) *d_bias += row_sum(dy);
  const Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
  const auto width = static_cast<Scalar>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Scalar mean_d = dxhat.row(r).sum() / width;
    const Scalar mean_dx = dxhat.row(r).dot(cache.normalized.row(r)) / width;
    dx.row(r) = cache.inv_std(r) *
                (dxhat.row(r).array() - mean_d - cache.normalized.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

BackboneWeights BackboneWeights::zeros(const ModelConfig& c) {
  BackboneWeights w;
  const int d = c.d;
  const int f = c.ffn();
  w.token_embedding = Matrix::Zero(c.vocab_size, d);
  w.position_embedding = Matrix::Zero(c.max_seq, d);
  w.layers.resize(static_cast<std::size_t>(c.layers));
  for (auto& layer : w.layers) {
    layer.wq = layer.wk = layer.wv = layer.wo = Matrix::Zero(d, d);
    layer.bq = layer.bk = layer.bv = layer.bo = Matrix::Zero(1, d);
    layer.ln1_gain = layer.ln1_bias = layer.ln2_gain = layer.ln2_bias = Matrix::Zero(1, d);
    layer.ffn_in = Matrix::Zero(d, f);
    layer.ffn_in_bias = Matrix::Zero(1, f);
    layer.ffn_out = Matrix::Zero(f, d);
    layer.ffn_out_bias = Matrix::Zero(1, d);
  }
  w.final_ln_gain = w.final_ln_bias = Matrix::Zero(1, d);
  w.head_transform = Matrix::Zero(d, d);
  w.head_transform_bias = Matrix::Zero(1, d);
  w.head_ln_gain = w.head_ln_bias = Matrix::Zero(1, d);
  w.output_bias = Matrix::Zero(1, c.vocab_size);
  w.cls_weight = Matrix::Zero(d, label_count);
  w.cls_bias = Matrix::Zero(1, label_count);
  return w;
}

std::int64_t BackboneWeights::parameter_count() const {
  std::int64_t count = 0;
  for_each([&](const std::string&, const Matrix& m) { count += m.size(); });
  return count;
}

void BackboneWeights::set_zero() {
  for_each([](const std::string&, Matrix& m) { m.setZero(); });
}

Backbone::Backbone(ModelConfig config, BackboneWeights weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  const BackboneWeights expected = BackboneWeights::zeros(config_);
  if (weights_.layers.size() != expected.layers.size())
    throw std::invalid_argument("backbone layer count does not match config");
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  expected.for_each([&](const std::string&, const Matrix& m) { shapes.emplace_back(m.rows(), m.cols()); });
  std::size_t i = 0;
  weights_.for_each([&](const std::string& name, const Matrix& m) {
    if (m.rows() != shapes[i].first || m.cols() != shapes[i].second)
      throw std::invalid_argument("backbone tensor " + name + " has the wrong shape");
    ++i;
  });
}

Backbone Backbone::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  BackboneWeights w = BackboneWeights::zeros(config);
  Rng rng(seed);
  std::normal_distribution<Scalar> emb(0.0, 0.5);
  for (Eigen::Index r = 0; r < w.token_embedding.rows(); ++r)
    for (Eigen::Index c = 0; c < w.token_embedding.cols(); ++c) w.token_embedding(r, c) = emb(rng);
  for (Eigen::Index r = 0; r < w.position_embedding.rows(); ++r)
    for (Eigen::Index c = 0; c < w.position_embedding.cols(); ++c) w.position_embedding(r, c) = emb(rng);
  auto linear = [&](Matrix& m) {
    const Scalar a = 1.0 / std::sqrt(static_cast<Scalar>(m.rows()));
    fill_uniform(m, rng, -a, a);
  };
  for (auto& layer : w.layers) {
    linear(layer.wq);
    linear(layer.wk);
    linear(layer.wv);
    linear(layer.wo);
    layer.ln1_gain.setOnes();
    layer.ln2_gain.setOnes();
    linear(layer.ffn_in);
    linear(layer.ffn_out);
  }
  w.final_ln_gain.setOnes();
  linear(w.head_transform);
  w.head_ln_gain.setOnes();
  linear(w.cls_weight);
  return Backbone(config, std::move(w));
}

BackboneWeights& Backbone::mutable_weights() {
  if (!thawed_) throw std::logic_error("backbone is frozen; thaw() before modifying weights");
  return weights_;
}

std::uint64_t Backbone::digest() const {
  Fnv1a h;
  weights_.for_each([&](const std::string& name, const Matrix& m) {
    h.update(name.data(), name.size());
    h.update(m);
  });
  return h.value();
}

EncoderTrace Backbone::encode(const Matrix& embeddings, const SoftPrompt* prefix) const {
  const int d = config_.d;
  const int heads = config_.heads;
  const int dh = config_.head_dim();
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));
  const Eigen::Index n = embeddings.rows();
  const Eigen::Index p = prefix ? prefix->length() : 0;
  if (prefix && (prefix->mode() != InjectionMode::deep || prefix->layers() != config_.layers ||
                 prefix->dim() != d))
    throw std::invalid_argument("deep prefix shape does not match the backbone");

  EncoderTrace trace;
  trace.prefix = prefix;
  trace.layers.resize(weights_.layers.size());
  Matrix x = embeddings;
  for (std::size_t li = 0; li < weights_.layers.size(); ++li) {
    const LayerWeights& w = weights_.layers[li];
    LayerTrace& t = trace.layers[li];
    t.input = x;
    t.ln1_out = layer_norm(x, w.ln1_gain, w.ln1_bias, t.ln1);
    t.q = t.ln1_out * w.wq;
    add_bias(t.q, w.bq);
    t.k.resize(p + n, d);
    t.v.resize(p + n, d);
    if (p > 0) {
      t.prefix_ln_out = layer_norm(prefix->layer(static_cast<int>(li)), w.ln1_gain, w.ln1_bias, t.prefix_ln);
      t.k.topRows(p) = t.prefix_ln_out * w.wk;
      t.v.topRows(p) = t.prefix_ln_out * w.wv;
    }
    t.k.bottomRows(n) = t.ln1_out * w.wk;
    t.v.bottomRows(n) = t.ln1_out * w.wv;
    add_bias(t.k, w.bk);
    add_bias(t.v, w.bv);

    t.attention.resize(static_cast<std::size_t>(heads));
    t.context.resize(n, d);
    for (int h = 0; h < heads; ++h) {
      Matrix s = t.q.middleCols(h * dh, dh) * t.k.middleCols(h * dh, dh).transpose() * scale;
      softmax_rows(s);
      t.context.middleCols(h * dh, dh) = s * t.v.middleCols(h * dh, dh);
      t.attention[static_cast<std::size_t>(h)] = std::move(s);
    }
    Matrix attn_out = t.context * w.wo;
    add_bias(attn_out, w.bo);
    t.residual = x + attn_out;

    t.ln2_out = layer_norm(t.residual, w.ln2_gain, w.ln2_bias, t.ln2);
    t.ffn_pre = t.ln2_out * w.ffn_in;
    add_bias(t.ffn_pre, w.ffn_in_bias);
    t.ffn_act = gelu_matrix(t.ffn_pre, t.ffn_tanh);
    Matrix ffn_out = t.ffn_act * w.ffn_out;
    add_bias(ffn_out, w.ffn_out_bias);
    x = t.residual + ffn_out;
    if (!x.allFinite()) {
      std::ostringstream os;
      os << "non-finite activation at layer " << li;
      throw NumericError(os.str());
    }
  }
  trace.hidden = layer_norm(x, weights_.final_ln_gain, weights_.final_ln_bias, trace.final_ln);
  return trace;
}

EncoderGrad Backbone::encode_backward(const EncoderTrace& trace, const Matrix& d_hidden,
                                      BackboneWeights* g) const {
  const int heads = config_.heads;
  const int dh = config_.head_dim();
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));
  const SoftPrompt* prefix = trace.prefix;
  const Eigen::Index p = prefix ? prefix->length() : 0;

  EncoderGrad out;
  if (prefix) out.prefix = RowMatrix::Zero(prefix->values().rows(), prefix->values().cols());

  Matrix dx = layer_norm_backward(d_hidden, weights_.final_ln_gain, trace.final_ln,
                                  g ? &g->final_ln_gain : nullptr, g ? &g->final_ln_bias : nullptr);

  for (std::size_t li = weights_.layers.size(); li-- > 0;) {
    const LayerWeights& w = weights_.layers[li];
    const LayerTrace& t = trace.layers[li];
    LayerWeights* gw = g ? &g->layers[li] : nullptr;
    const Eigen::Index n = t.input.rows();

    // Feed-forward block.
    if (gw) {
      gw->ffn_out.noalias() += t.ffn_act.transpose() * dx;
      gw->ffn_out_bias += row_sum(dx);
    }
    const Matrix d_pre = gelu_backward(t.ffn_pre, t.ffn_tanh, dx * w.ffn_out.transpose());
    if (gw) {
      gw->ffn_in.noalias() += t.ln2_out.transpose() * d_pre;
      gw->ffn_in_bias += row_sum(d_pre);
    }
    Matrix d_residual = dx + layer_norm_backward(d_pre * w.ffn_in.transpose(), w.ln2_gain, t.ln2,
                                                 gw ? &gw->ln2_gain : nullptr, gw ? &gw->ln2_bias : nullptr);

    // Attention block.
    if (gw) {
      gw->wo.noalias() += t.context.transpose() * d_residual;
      gw->bo += row_sum(d_residual);
    }
    const Matrix d_context = d_residual * w.wo.transpose();
    Matrix dq(n, config_.d);
    Matrix dk = Matrix::Zero(p + n, config_.d);
    Matrix dv = Matrix::Zero(p + n, config_.d);
    for (int h = 0; h < heads; ++h) {
      const Matrix& a = t.attention[static_cast<std::size_t>(h)];
      const auto d_ctx_h = d_context.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh).noalias() = a.transpose() * d_ctx_h;
      Matrix da = d_ctx_h * t.v.middleCols(h * dh, dh).transpose();
      const Vector inner = da.cwiseProduct(a).rowwise().sum();
      Matrix ds = a.cwiseProduct(da.colwise() - inner) * scale;
      dq.middleCols(h * dh, dh).noalias() = ds * t.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * t.q.middleCols(h * dh, dh);
    }
    const auto dk_seq = dk.bottomRows(n);
    const auto dv_seq = dv.bottomRows(n);
    if (gw) {
      gw->wq.noalias() += t.ln1_out.transpose() * dq;
      gw->wk.noalias() += t.ln1_out.transpose() * dk_seq;
      gw->wv.noalias() += t.ln1_out.transpose() * dv_seq;
      gw->bq += row_sum(dq);
      gw->bk += row_sum(dk);
      gw->bv += row_sum(dv);
    }
    if (p > 0) {
      const auto dk_pre = dk.topRows(p);
      const auto dv_pre = dv.topRows(p);
      if (gw) {
        gw->wk.noalias() += t.prefix_ln_out.transpose() * dk_pre;
        gw->wv.noalias() += t.prefix_ln_out.transpose() * dv_pre;
      }
      out.prefix.middleRows(static_cast<Eigen::Index>(li) * p, p) =
          layer_norm_backward(dk_pre * w.wk.transpose() + dv_pre * w.wv.transpose(), w.ln1_gain, t.prefix_ln,
                              gw ? &gw->ln1_gain : nullptr, gw ? &gw->ln1_bias : nullptr);
    }
    const Matrix d_ln1 = dq * w.wq.transpose() + dk_seq * w.wk.transpose() + dv_seq * w.wv.transpose();
    dx = d_residual + layer_norm_backward(d_ln1, w.ln1_gain, t.ln1, gw ? &gw->ln1_gain : nullptr,
                                          gw ? &gw->ln1_bias : nullptr);
  }
  out.embeddings = std::move(dx);
  return out;
}

Backbone::HeadTrace Backbone::head_forward(const Matrix& hidden_rows) const {
  HeadTrace t;
  t.input = hidden_rows;
  t.pre = hidden_rows * weights_.head_transform;
  add_bias(t.pre, weights_.head_transform_bias);
  t.act = gelu_matrix(t.pre, t.tanh);
  t.out = layer_norm(t.act, weights_.head_ln_gain, weights_.head_ln_bias, t.ln);
  return t;
}

Matrix Backbone::head_backward(const HeadTrace& t, const Matrix& d_out, BackboneWeights* g) const {
  const Matrix d_act = layer_norm_backward(d_out, weights_.head_ln_gain, t.ln, g ? &g->head_ln_gain : nullptr,
                                           g ? &g->head_ln_bias : nullptr);
  const Matrix d_pre = gelu_backward(t.pre, t.tanh, d_act);
  if (g) {
    g->head_transform.noalias() += t.input.transpose() * d_pre;
    g->head_transform_bias += row_sum(d_pre);
  }
  return d_pre * weights_.head_transform.transpose();
}

}  // namespace cptrd
