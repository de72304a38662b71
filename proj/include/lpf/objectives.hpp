#pragma once

// Training objectives.
//
// The question-only branch's softmax probability on the ground-truth answer,
// alpha, measures how much the question alone gives the answer away. Each
// sample's cross-entropy on the main branch is scaled by beta = (1 - alpha)^gamma,
// so samples the question-only branch already gets right contribute little.
//
//   L_LPF   = -(1/B) sum_i beta_i * log softmax(logits_vqa_i)[a_i]
//   L_QO    = -(1/B) sum_i         log softmax(logits_qo_i)[a_i]
//   L_total = L_LPF + L_QO
//
// alpha is a constant in L_LPF: the question-only branch is trained by L_QO only.
// FOCAL takes alpha from the main branch itself; PRECOMPUTED takes it from the
// empirical per-question-type answer distribution of the training set.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lpf/errors.hpp"
#include "lpf/model.hpp"
#include "lpf/tensor.hpp"

namespace lpf {

enum class LossKind { CE, LPF, FOCAL, PRECOMPUTED };

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::CE: return "ce";
    case LossKind::LPF: return "lpf";
    case LossKind::FOCAL: return "focal";
    case LossKind::PRECOMPUTED: return "precomputed";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "ce") return LossKind::CE;
  if (s == "lpf") return LossKind::LPF;
  if (s == "focal") return LossKind::FOCAL;
  if (s == "precomputed") return LossKind::PRECOMPUTED;
  throw InvalidArgument("unknown loss variant '" + std::string(s) + "'");
}

struct LossVariant {
  LossKind kind = LossKind::LPF;
  double gamma = 1.0;       // ignored for CE
  double min_weight = 0.0;  // floor on the applied per-sample weight; 0 keeps beta as is

  static LossVariant ce() { return {LossKind::CE, 0.0}; }
  static LossVariant lpf(double gamma) { return {LossKind::LPF, gamma}; }
  static LossVariant focal(double gamma = 1.0) { return {LossKind::FOCAL, gamma}; }
  static LossVariant precomputed(double gamma = 1.0) { return {LossKind::PRECOMPUTED, gamma}; }

  void validate() const {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw InvalidArgument("gamma must be >= 0");
    if (!(min_weight >= 0.0 && min_weight <= 1.0)) {
      throw InvalidArgument("min_weight must lie in [0, 1]");
    }
  }

  friend bool operator==(const LossVariant&, const LossVariant&) = default;
};

// Per-question-type answer distribution. Rows are indexed by question type.
struct PriorTable {
  std::vector<std::vector<double>> rows;

  std::size_t num_qtypes() const noexcept { return rows.size(); }
  std::size_t num_answers() const noexcept { return rows.empty() ? 0 : rows.front().size(); }

  const std::vector<double>& row(QTypeId k) const {
    if (k >= rows.size()) {
      throw InvalidArgument("no prior row for question type " + std::to_string(k));
    }
    return rows[k];
  }

  void validate(double tol = 1e-9) const {
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (rows[k].size() != num_answers()) throw ShapeError("prior table rows differ in length");
      double sum = 0.0;
      for (double p : rows[k]) {
        if (!(p >= 0.0)) throw InvalidArgument("prior row " + std::to_string(k) + " has a negative entry");
        sum += p;
      }
      if (std::abs(sum - 1.0) > tol) {
        throw InvalidArgument("prior row " + std::to_string(k) + " sums to " + std::to_string(sum));
      }
    }
  }

  friend bool operator==(const PriorTable&, const PriorTable&) = default;
};

// row[k][a] = count(qtype=k, answer=a) / count(qtype=k).
// Every question type in [0, num_qtypes) must occur at least once.
inline PriorTable build_prior_table(std::span<const QTypeId> qtypes, std::span<const AnswerId> answers,
                                    std::size_t num_qtypes, std::size_t num_answers) {
  if (qtypes.empty()) throw InvalidArgument("cannot build a prior table from an empty split");
  if (qtypes.size() != answers.size()) throw ShapeError("qtype and answer sequences differ in length");
  std::vector<std::vector<std::uint64_t>> counts(num_qtypes, std::vector<std::uint64_t>(num_answers, 0));
  std::vector<std::uint64_t> totals(num_qtypes, 0);
  for (std::size_t i = 0; i < qtypes.size(); ++i) {
    if (qtypes[i] >= num_qtypes) throw InvalidArgument("question type id out of range");
    if (answers[i] >= num_answers) throw InvalidArgument("answer id out of range");
    ++counts[qtypes[i]][answers[i]];
    ++totals[qtypes[i]];
  }
  PriorTable table;
  table.rows.resize(num_qtypes);
  for (std::size_t k = 0; k < num_qtypes; ++k) {
    if (totals[k] == 0) {
      throw InvalidArgument("question type " + std::to_string(k) + " has no samples");
    }
    table.rows[k].resize(num_answers);
    for (std::size_t a = 0; a < num_answers; ++a) {
      table.rows[k][a] = static_cast<double>(counts[k][a]) / static_cast<double>(totals[k]);
    }
  }
  return table;
}

// softmax(logits[i])[targets[i]], returned as plain numbers (detached).
inline std::vector<double> alpha_from_logits(const Tensor& logits, std::span<const AnswerId> targets) {
  if (logits.rank() != 2 || logits.rows() != targets.size()) {
    throw ShapeError("alpha: logits " + shape_str(logits.shape()) + " for " +
                     std::to_string(targets.size()) + " targets");
  }
  std::vector<double> alpha(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= logits.cols()) {
      throw InvalidArgument("target " + std::to_string(targets[i]) + " out of range");
    }
    alpha[i] = std::exp(log_softmax_at(logits.row(i), targets[i]));
  }
  return alpha;
}

inline std::vector<double> alpha_from_qo(const Tensor& logits_qo, std::span<const AnswerId> targets) {
  return alpha_from_logits(logits_qo, targets);
}

inline double beta(double alpha, double gamma) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must lie in [0, 1]");
  if (!(gamma >= 0.0)) throw InvalidArgument("gamma must be >= 0");
  return std::pow(1.0 - alpha, gamma);
}

inline std::vector<double> betas(std::span<const double> alpha, double gamma) {
  std::vector<double> out(alpha.size());
  for (std::size_t i = 0; i < alpha.size(); ++i) out[i] = beta(alpha[i], gamma);
  return out;
}

// Reweighted main-branch loss and its gradient w.r.t. logits_vqa.
inline LossGrad lpf_loss_with_grad(const Tensor& logits_vqa, std::span<const AnswerId> targets,
                                   std::span<const double> alpha, double gamma) {
  return weighted_ce_with_grad(logits_vqa, targets, betas(alpha, gamma));
}

inline double lpf_loss(const Tensor& logits_vqa, std::span<const AnswerId> targets,
                       std::span<const double> alpha, double gamma) {
  return weighted_ce(logits_vqa, targets, betas(alpha, gamma));
}

inline LossGrad qo_loss_with_grad(const Tensor& logits_qo, std::span<const AnswerId> targets) {
  const std::vector<double> ones(targets.size(), 1.0);
  return weighted_ce_with_grad(logits_qo, targets, ones);
}

inline double qo_loss(const Tensor& logits_qo, std::span<const AnswerId> targets) {
  const std::vector<double> ones(targets.size(), 1.0);
  return weighted_ce(logits_qo, targets, ones);
}

inline double total_loss(double l_lpf, double l_qo) { return l_lpf + l_qo; }

// alpha for the FOCAL and PRECOMPUTED variants.
inline std::vector<double> variant_alpha(LossKind kind, const Tensor& logits_vqa, const PriorTable* priors,
                                         std::span<const QTypeId> qtypes,
                                         std::span<const AnswerId> targets) {
  switch (kind) {
    case LossKind::FOCAL:
      return alpha_from_logits(logits_vqa, targets);
    case LossKind::PRECOMPUTED: {
      if (priors == nullptr) throw InvalidArgument("precomputed variant needs a prior table");
      if (qtypes.size() != targets.size()) throw ShapeError("qtype and target sequences differ in length");
      std::vector<double> alpha(targets.size());
      for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& row = priors->row(qtypes[i]);
        if (targets[i] >= row.size()) throw InvalidArgument("target out of range for prior table");
        alpha[i] = row[targets[i]];
      }
      return alpha;
    }
    default:
      throw InvalidArgument("variant_alpha: only FOCAL and PRECOMPUTED take their alpha here");
  }
}

struct BatchLossRecord {
  std::vector<double> ce;     // unweighted per-sample main-branch CE
  std::vector<double> alpha;  // bias factor (question-only for CE and LPF)
  std::vector<double> beta;   // (1 - alpha)^gamma; 1 for CE
  double l_lpf = 0.0;
  double l_qo = 0.0;
  double l_total = 0.0;
  Tensor grad_logits_vqa;
  Tensor grad_logits_qo;
};

// Inputs that are stop-gradient constants in the objective. Supplying them
// lets finite-difference checks hold those quantities at their base values.
struct FrozenAlpha {
  std::vector<double> alpha;
};

// All loss terms for one batch given both branches' logits. For the CE variant
// alpha is still computed from the question-only branch (for logging) but
// every weight is exactly 1.
inline BatchLossRecord compute_batch_loss(const LossVariant& variant, const Tensor& logits_vqa,
                                          const Tensor& logits_qo, std::span<const AnswerId> targets,
                                          std::span<const QTypeId> qtypes, const PriorTable* priors,
                                          const FrozenAlpha* frozen = nullptr) {
  variant.validate();
  BatchLossRecord r;
  const std::size_t n = targets.size();
  if (frozen != nullptr) {
    r.alpha = frozen->alpha;
  } else if (variant.kind == LossKind::FOCAL || variant.kind == LossKind::PRECOMPUTED) {
    r.alpha = variant_alpha(variant.kind, logits_vqa, priors, qtypes, targets);
  } else {
    r.alpha = alpha_from_qo(logits_qo, targets);
  }
  if (r.alpha.size() != n) throw ShapeError("alpha length does not match batch");

  r.beta = variant.kind == LossKind::CE ? std::vector<double>(n, 1.0) : betas(r.alpha, variant.gamma);
  std::vector<double> weights = r.beta;
  if (variant.min_weight > 0.0) {
    for (double& w : weights) w = std::max(w, variant.min_weight);
  }

  LossGrad main = weighted_ce_with_grad(logits_vqa, targets, weights);
  LossGrad qo = qo_loss_with_grad(logits_qo, targets);
  r.ce.resize(n);
  for (std::size_t i = 0; i < n; ++i) r.ce[i] = -log_softmax_at(logits_vqa.row(i), targets[i]);
  r.l_lpf = main.loss;
  r.l_qo = qo.loss;
  r.l_total = total_loss(r.l_lpf, r.l_qo);
  r.grad_logits_vqa = std::move(main.grad);
  r.grad_logits_qo = std::move(qo.grad);
  return r;
}

}  // namespace lpf
