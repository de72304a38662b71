#pragma once

// Two-branch classifier.
//
//   q      = affine(mean of token embeddings)                 question encoder
//   v      = relu(affine(visual feature))                     visual encoder
//   logits = out(relu(hidden(proj_v(v) * proj_q(q))))         fusion head
//   qo     = mlp3(stop_gradient(q))                           question-only branch
//
// The question-only branch reads the live encoder output on the forward pass,
// but its backward stops at the detach node: nothing it computes reaches the
// embeddings or the question encoder.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lpf/errors.hpp"
#include "lpf/rng.hpp"
#include "lpf/tensor.hpp"

namespace lpf {

using TokenId = std::uint32_t;
using AnswerId = std::uint32_t;
using QTypeId = std::uint32_t;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 16;
  std::size_t q_dim = 32;
  std::size_t v_in_dim = 0;
  std::size_t v_dim = 4;
  std::size_t joint_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t num_answers = 0;
  std::size_t qo_hidden_dim = 64;
  std::uint64_t seed = 0;

  void validate() const {
    const std::size_t dims[] = {vocab_size, embed_dim, q_dim,      v_in_dim,     v_dim,
                                joint_dim,  hidden_dim, num_answers, qo_hidden_dim};
    for (auto d : dims) {
      if (d == 0) throw InvalidArgument("model config: every dimension must be positive");
    }
    if (num_answers < 2) throw InvalidArgument("model config: need at least 2 answers");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct VqaModelParams {
  ModelConfig config;

  Parameter token_embeddings;  // vocab x embed
  Parameter q_enc_w, q_enc_b;  // embed -> q
  Parameter v_enc_w, v_enc_b;  // v_in -> v
  // fusion
  Parameter proj_v_w, proj_v_b;  // v -> joint
  Parameter proj_q_w, proj_q_b;  // q -> joint
  Parameter hidden_w, hidden_b;  // joint -> hidden
  Parameter out_w, out_b;        // hidden -> answers
  // question-only branch
  Parameter qo1_w, qo1_b;  // q -> qo_hidden
  Parameter qo2_w, qo2_b;  // qo_hidden -> qo_hidden
  Parameter qo3_w, qo3_b;  // qo_hidden -> answers

  VqaModelParams() = default;
  VqaModelParams(const VqaModelParams& other) : config(other.config) { copy_from(other); }
  VqaModelParams& operator=(const VqaModelParams& other) {
    if (this != &other) {
      config = other.config;
      copy_from(other);
    }
    return *this;
  }
  VqaModelParams(VqaModelParams&&) = default;
  VqaModelParams& operator=(VqaModelParams&&) = default;

  std::vector<Parameter*> embedding() { return {&token_embeddings}; }
  std::vector<Parameter*> question_encoder() { return {&q_enc_w, &q_enc_b}; }
  std::vector<Parameter*> visual_encoder() { return {&v_enc_w, &v_enc_b}; }
  std::vector<Parameter*> fusion() {
    return {&proj_v_w, &proj_v_b, &proj_q_w, &proj_q_b, &hidden_w, &hidden_b, &out_w, &out_b};
  }
  std::vector<Parameter*> qo_branch() { return {&qo1_w, &qo1_b, &qo2_w, &qo2_b, &qo3_w, &qo3_b}; }

  // Everything on the VQA path (used at inference).
  std::vector<Parameter*> vqa_path() {
    std::vector<Parameter*> out = embedding();
    for (auto group : {question_encoder(), visual_encoder(), fusion()}) {
      out.insert(out.end(), group.begin(), group.end());
    }
    return out;
  }

  std::vector<Parameter*> all() {
    auto out = vqa_path();
    for (Parameter* p : qo_branch()) out.push_back(p);
    return out;
  }

  std::vector<const Parameter*> all() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<VqaModelParams*>(this)->all()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (Parameter* p : all()) p->zero_grad();
  }

 private:
  void copy_from(const VqaModelParams& other) {
    auto dst = all();
    auto src = other.all();
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = *src[i];
  }
};

// Bitwise equality of every parameter value.
inline bool same_values(const VqaModelParams& a, const VqaModelParams& b) {
  auto pa = a.all();
  auto pb = b.all();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!bitwise_equal(pa[i]->value, pb[i]->value)) return false;
  }
  return true;
}

inline double max_abs_diff(const VqaModelParams& a, const VqaModelParams& b) {
  auto pa = a.all();
  auto pb = b.all();
  double worst = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->shape() != pb[i]->shape()) throw ShapeError("parameter " + pa[i]->name + " shape differs");
    for (std::size_t k = 0; k < pa[i]->value.size(); ++k) {
      worst = std::max(worst, std::abs(pa[i]->value[k] - pb[i]->value[k]));
    }
  }
  return worst;
}

namespace detail {

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
inline void init_affine(Rng& rng, Parameter& w, Parameter& b, const std::string& name,
                        std::size_t fan_in, std::size_t fan_out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor wt = Tensor::matrix(fan_in, fan_out);
  for (double& x : wt.data()) x = rng.uniform(-bound, bound);
  w = Parameter(name + ".weight", std::move(wt));
  b = Parameter(name + ".bias", Tensor({fan_out}));
}

}  // namespace detail

inline VqaModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  VqaModelParams p;
  p.config = cfg;
  Rng rng(cfg.seed);

  // Embedding rows are looked up, not summed over inputs: fan_in is 1.
  Tensor emb = Tensor::matrix(cfg.vocab_size, cfg.embed_dim);
  for (double& x : emb.data()) x = rng.uniform(-1.0, 1.0);
  p.token_embeddings = Parameter("token_embeddings", std::move(emb));

  detail::init_affine(rng, p.q_enc_w, p.q_enc_b, "q_encoder", cfg.embed_dim, cfg.q_dim);
  detail::init_affine(rng, p.v_enc_w, p.v_enc_b, "v_encoder", cfg.v_in_dim, cfg.v_dim);
  detail::init_affine(rng, p.proj_v_w, p.proj_v_b, "fusion.proj_v", cfg.v_dim, cfg.joint_dim);
  detail::init_affine(rng, p.proj_q_w, p.proj_q_b, "fusion.proj_q", cfg.q_dim, cfg.joint_dim);
  detail::init_affine(rng, p.hidden_w, p.hidden_b, "fusion.hidden", cfg.joint_dim, cfg.hidden_dim);
  detail::init_affine(rng, p.out_w, p.out_b, "fusion.out", cfg.hidden_dim, cfg.num_answers);
  detail::init_affine(rng, p.qo1_w, p.qo1_b, "qo.layer1", cfg.q_dim, cfg.qo_hidden_dim);
  detail::init_affine(rng, p.qo2_w, p.qo2_b, "qo.layer2", cfg.qo_hidden_dim, cfg.qo_hidden_dim);
  detail::init_affine(rng, p.qo3_w, p.qo3_b, "qo.layer3", cfg.qo_hidden_dim, cfg.num_answers);
  return p;
}

// A batch of model inputs. Token spans must outlive the batch.
struct ModelBatch {
  std::vector<std::span<const TokenId>> tokens;
  Tensor features;  // B x v_in

  std::size_t size() const noexcept { return tokens.size(); }
};

// Activations kept for the backward pass.
struct ForwardCache {
  Tensor pooled;  // B x embed
  Tensor q;       // B x q_dim
  Tensor v_pre, v;
  Tensor pv, pq, joint;
  Tensor h_pre, h;
  Tensor logits_vqa;

  Tensor qo_in;  // detached q
  Tensor qo1_pre, qo1, qo2_pre, qo2;
  Tensor logits_qo;
};

namespace detail {

inline Tensor mean_pool_embeddings(const VqaModelParams& p, const ModelBatch& batch) {
  const std::size_t e = p.config.embed_dim;
  Tensor pooled = Tensor::matrix(batch.size(), e);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto toks = batch.tokens[i];
    if (toks.empty()) throw InvalidArgument("question has no tokens (row " + std::to_string(i) + ")");
    auto out = pooled.row(i);
    for (TokenId t : toks) {
      if (t >= p.config.vocab_size) {
        throw InvalidArgument("token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(p.config.vocab_size));
      }
      const auto emb = p.token_embeddings.value.row(t);
      for (std::size_t k = 0; k < e; ++k) out[k] += emb[k];
    }
    const double inv = 1.0 / static_cast<double>(toks.size());
    for (double& x : out) x *= inv;
  }
  return pooled;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("elementwise product: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

inline Tensor fusion_forward(const VqaModelParams& p, const Tensor& v, const Tensor& q,
                             ForwardCache& c) {
  c.pv = linear(v, p.proj_v_w, p.proj_v_b);
  c.pq = linear(q, p.proj_q_w, p.proj_q_b);
  c.joint = hadamard(c.pv, c.pq);
  c.h_pre = linear(c.joint, p.hidden_w, p.hidden_b);
  c.h = relu(c.h_pre);
  return linear(c.h, p.out_w, p.out_b);
}

inline Tensor qo_forward(const VqaModelParams& p, const Tensor& q_detached, ForwardCache& c) {
  c.qo_in = q_detached;
  c.qo1_pre = linear(c.qo_in, p.qo1_w, p.qo1_b);
  c.qo1 = relu(c.qo1_pre);
  c.qo2_pre = linear(c.qo1, p.qo2_w, p.qo2_b);
  c.qo2 = relu(c.qo2_pre);
  return linear(c.qo2, p.qo3_w, p.qo3_b);
}

}  // namespace detail

// Runs both branches. When `frozen_qo_input` is given, the question-only branch
// reads it instead of the live q. This is how a stop-gradient is evaluated as a
// function: finite-difference checks hold the detached value at its base point.
inline ForwardCache forward(const VqaModelParams& p, const ModelBatch& batch,
                            const Tensor* frozen_qo_input = nullptr) {
  const auto& cfg = p.config;
  if (batch.features.rank() != 2 || batch.features.rows() != batch.size() ||
      batch.features.cols() != cfg.v_in_dim) {
    throw ShapeError("visual features " + shape_str(batch.features.shape()) + " for batch of " +
                     std::to_string(batch.size()) + " with v_in_dim " + std::to_string(cfg.v_in_dim));
  }
  ForwardCache c;
  c.pooled = detail::mean_pool_embeddings(p, batch);
  c.q = linear(c.pooled, p.q_enc_w, p.q_enc_b);
  c.v_pre = linear(batch.features, p.v_enc_w, p.v_enc_b);
  c.v = relu(c.v_pre);
  c.logits_vqa = detail::fusion_forward(p, c.v, c.q, c);
  c.logits_qo = detail::qo_forward(p, frozen_qo_input ? *frozen_qo_input : detach(c.q), c);
  return c;
}

// Accumulates parameter gradients given upstream gradients on both logit sets.
// The question-only path ends at its detach node; the VQA path reaches every
// encoder parameter.
inline void backward(VqaModelParams& p, const ModelBatch& batch, const ForwardCache& c,
                     const Tensor& grad_logits_vqa, const Tensor& grad_logits_qo) {
  // question-only branch
  {
    Tensor g = linear_backward(c.qo2, p.qo3_w, p.qo3_b, grad_logits_qo);
    g = relu_backward(c.qo2_pre, g);
    g = linear_backward(c.qo1, p.qo2_w, p.qo2_b, g);
    g = relu_backward(c.qo1_pre, g);
    linear_backward(c.qo_in, p.qo1_w, p.qo1_b, g);  // stops here
  }

  Tensor g = linear_backward(c.h, p.out_w, p.out_b, grad_logits_vqa);
  g = relu_backward(c.h_pre, g);
  Tensor g_joint = linear_backward(c.joint, p.hidden_w, p.hidden_b, g);
  Tensor g_pv = detail::hadamard(g_joint, c.pq);
  Tensor g_pq = detail::hadamard(g_joint, c.pv);
  Tensor g_v = linear_backward(c.v, p.proj_v_w, p.proj_v_b, g_pv);
  Tensor g_q = linear_backward(c.q, p.proj_q_w, p.proj_q_b, g_pq);

  g_v = relu_backward(c.v_pre, g_v);
  linear_backward(batch.features, p.v_enc_w, p.v_enc_b, g_v);

  Tensor g_pooled = linear_backward(c.pooled, p.q_enc_w, p.q_enc_b, g_q);
  const std::size_t e = p.config.embed_dim;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto toks = batch.tokens[i];
    const double inv = 1.0 / static_cast<double>(toks.size());
    const auto gp = g_pooled.row(i);
    for (TokenId t : toks) {
      auto ge = p.token_embeddings.grad.row(t);
      for (std::size_t k = 0; k < e; ++k) ge[k] += gp[k] * inv;
    }
  }
}

// Main-branch logits only; the question-only branch is not evaluated.
inline Tensor vqa_logits(const VqaModelParams& p, const ModelBatch& batch) {
  if (batch.features.rank() != 2 || batch.features.rows() != batch.size() ||
      batch.features.cols() != p.config.v_in_dim) {
    throw ShapeError("visual features " + shape_str(batch.features.shape()) + " do not match the model");
  }
  ForwardCache c;
  c.pooled = detail::mean_pool_embeddings(p, batch);
  c.q = linear(c.pooled, p.q_enc_w, p.q_enc_b);
  c.v = relu(linear(batch.features, p.v_enc_w, p.v_enc_b));
  return detail::fusion_forward(p, c.v, c.q, c);
}

// Single-example views of the forward pass.

inline Tensor encode_question(std::span<const TokenId> tokens, const VqaModelParams& p) {
  ModelBatch b;
  b.tokens = {tokens};
  Tensor pooled = detail::mean_pool_embeddings(p, b);
  Tensor q = linear(pooled, p.q_enc_w, p.q_enc_b);
  return Tensor({p.config.q_dim}, q.values());
}

inline Tensor encode_visual(std::span<const double> feature, const VqaModelParams& p) {
  if (feature.size() != p.config.v_in_dim) {
    throw ShapeError("visual feature of length " + std::to_string(feature.size()) +
                     ", expected " + std::to_string(p.config.v_in_dim));
  }
  Tensor x({1, feature.size()}, std::vector<double>(feature.begin(), feature.end()));
  Tensor v = relu(linear(x, p.v_enc_w, p.v_enc_b));
  return Tensor({p.config.v_dim}, v.values());
}

namespace detail {
inline Tensor as_row(const Tensor& vec, std::size_t expected, const char* what) {
  if (vec.size() != expected) {
    throw ShapeError(std::string(what) + " has " + std::to_string(vec.size()) + " entries, expected " +
                     std::to_string(expected));
  }
  return Tensor({1, expected}, vec.values());
}
}  // namespace detail

inline Tensor predict_vqa(const Tensor& v_emb, const Tensor& q, const VqaModelParams& p) {
  ForwardCache c;
  Tensor logits = detail::fusion_forward(p, detail::as_row(v_emb, p.config.v_dim, "visual embedding"),
                                         detail::as_row(q, p.config.q_dim, "question embedding"), c);
  return Tensor({p.config.num_answers}, logits.values());
}

inline Tensor predict_qo(const Tensor& q, const VqaModelParams& p) {
  ForwardCache c;
  Tensor logits =
      detail::qo_forward(p, detach(detail::as_row(q, p.config.q_dim, "question embedding")), c);
  return Tensor({p.config.num_answers}, logits.values());
}

}  // namespace lpf
