#pragma once

// Training loop, evaluation and reporting.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lpf/errors.hpp"
#include "lpf/model.hpp"
#include "lpf/objectives.hpp"
#include "lpf/rng.hpp"
#include "lpf/synthbench.hpp"
#include "lpf/tensor.hpp"
#include "lpf/textio.hpp"

namespace lpf {

// Model dimensions that depend on the data, filled in from a benchmark config.
inline ModelConfig model_config_for(const BenchmarkConfig& bench, ModelConfig dims = {}) {
  dims.vocab_size = bench.vocab_size();
  dims.v_in_dim = bench.v_in_dim;
  dims.num_answers = bench.num_answers();
  return dims;
}

struct TrainContext;

struct TrainConfig {
  LossVariant variant = LossVariant::lpf(1.0);
  double lr = 3e-4;
  std::size_t batch_size = 256;
  std::size_t epochs = 21;
  std::uint64_t seed = 0;  // shuffling; model init uses model.seed
  ModelConfig model;
  bool shuffle = true;
  std::size_t max_steps = 0;  // stop after this many optimizer steps; 0 = no limit

  // Called after backward and before the optimizer step of every batch.
  std::function<void(const TrainContext&)> on_step;

  void validate() const {
    variant.validate();
    if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("learning rate must be positive");
    if (batch_size == 0) throw InvalidArgument("batch size must be positive");
    model.validate();
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_l_lpf = 0.0;
  double mean_l_qo = 0.0;
  double mean_alpha = 0.0;
  double mean_beta = 0.0;
  double train_accuracy = 0.0;
};

struct RunLog {
  std::vector<EpochLog> epochs;
  std::size_t steps = 0;
};

struct TrainResult {
  VqaModelParams params;
  RunLog log;
};

// Gathers samples[indices] into a model batch plus targets and question types.
struct BatchData {
  ModelBatch inputs;
  std::vector<AnswerId> targets;
  std::vector<QTypeId> qtypes;
};

inline BatchData make_batch(const Split& split, std::span<const std::size_t> indices) {
  BatchData b;
  const std::size_t d = split.config.v_in_dim;
  b.inputs.features = Tensor::matrix(indices.size(), d);
  b.inputs.tokens.reserve(indices.size());
  b.targets.reserve(indices.size());
  b.qtypes.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Sample& s = split.samples.at(indices[r]);
    b.inputs.tokens.emplace_back(s.tokens);
    std::copy(s.feature.begin(), s.feature.end(), b.inputs.features.row(r).begin());
    b.targets.push_back(s.answer);
    b.qtypes.push_back(s.qtype);
  }
  return b;
}

struct TrainContext {
  const VqaModelParams& params;  // gradients populated for this batch
  const BatchData& batch;
  const BatchLossRecord& losses;
  const PriorTable* priors;
  std::size_t epoch;
  std::size_t step;
};

// Forward, loss and backward for one batch. Gradients are accumulated, not reset.
inline BatchLossRecord forward_backward(VqaModelParams& params, const BatchData& batch,
                                        const LossVariant& variant, const PriorTable* priors) {
  const ForwardCache cache = forward(params, batch.inputs);
  BatchLossRecord rec =
      compute_batch_loss(variant, cache.logits_vqa, cache.logits_qo, batch.targets, batch.qtypes, priors);
  if (!std::isfinite(rec.l_total)) throw NumericalError("non-finite loss");
  backward(params, batch.inputs, cache, rec.grad_logits_vqa, rec.grad_logits_qo);
  return rec;
}

// Order of samples for an epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, bool shuffle) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(derive_seed(seed, epoch));
    rng.shuffle(std::span<std::size_t>(order));
  }
  return order;
}

inline void check_compatible(const ModelConfig& m, const BenchmarkConfig& b) {
  if (m.num_answers != b.num_answers()) {
    throw InvalidArgument("model has " + std::to_string(m.num_answers) + " answers, split has " +
                          std::to_string(b.num_answers()));
  }
  if (m.vocab_size < b.vocab_size()) throw InvalidArgument("model vocabulary is smaller than the split's");
  if (m.v_in_dim != b.v_in_dim) throw InvalidArgument("model v_in_dim does not match split features");
}

// Joint training of both branches under L_total = L_LPF + L_QO. The question-only
// weights stay in the returned parameters but are not used by evaluate().
inline TrainResult train(const Split& split, const TrainConfig& cfg) {
  cfg.validate();
  check_compatible(cfg.model, split.config);
  if (split.samples.empty()) throw InvalidArgument("cannot train on an empty split");

  std::optional<PriorTable> priors;
  if (cfg.variant.kind == LossKind::PRECOMPUTED) priors = empirical_prior(split);
  const PriorTable* prior_ptr = priors ? &*priors : nullptr;

  TrainResult result{init_params(cfg.model), {}};
  VqaModelParams& params = result.params;
  auto all = params.all();
  const AdamConfig adam{cfg.lr};
  const std::size_t n = split.size();
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps && step >= cfg.max_steps) break;
    const auto order = epoch_order(n, cfg.seed, epoch, cfg.shuffle);
    double sum_lpf = 0.0, sum_qo = 0.0, sum_alpha = 0.0, sum_beta = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      if (cfg.max_steps && step >= cfg.max_steps) break;
      const std::size_t len = std::min(cfg.batch_size, n - start);
      const BatchData batch = make_batch(split, std::span(order).subspan(start, len));

      const ForwardCache cache = forward(params, batch.inputs);
      const BatchLossRecord rec = compute_batch_loss(cfg.variant, cache.logits_vqa, cache.logits_qo,
                                                     batch.targets, batch.qtypes, prior_ptr);
      if (!std::isfinite(rec.l_total)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step));
      }
      params.zero_grad();
      backward(params, batch.inputs, cache, rec.grad_logits_vqa, rec.grad_logits_qo);
      if (cfg.on_step) cfg.on_step(TrainContext{params, batch, rec, prior_ptr, epoch, step});
      adam_step(all, adam);
      ++step;

      sum_lpf += rec.l_lpf * static_cast<double>(len);
      sum_qo += rec.l_qo * static_cast<double>(len);
      for (std::size_t i = 0; i < len; ++i) {
        sum_alpha += rec.alpha[i];
        sum_beta += rec.beta[i];
        if (argmax(cache.logits_vqa.row(i)) == batch.targets[i]) ++correct;
      }
      seen += len;
    }
    if (seen == 0) break;
    const double inv = 1.0 / static_cast<double>(seen);
    result.log.epochs.push_back(
        {epoch, sum_lpf * inv, sum_qo * inv, sum_alpha * inv, sum_beta * inv, static_cast<double>(correct) * inv});
  }
  params.zero_grad();
  result.log.steps = step;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

// KL(p || q) with q smoothed as (q + 1e-9) / (1 + n * 1e-9); 0 * ln 0 = 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw ShapeError("kl_divergence: lengths " + std::to_string(p.size()) + " and " + std::to_string(q.size()));
  }
  constexpr double eps = 1e-9;
  const double norm = 1.0 + eps * static_cast<double>(q.size());
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    const double qs = (q[i] + eps) / norm;
    kl += p[i] * std::log(p[i] / qs);
  }
  return std::max(kl, 0.0);
}

struct QTypeReport {
  std::size_t count = 0;
  double accuracy = 0.0;
  std::vector<double> predicted;  // distribution of predicted answers
  double kl_to_split = 0.0;       // KL(predicted || split ground truth)
  std::optional<double> kl_to_train;

  friend bool operator==(const QTypeReport&, const QTypeReport&) = default;
};

struct EvalReport {
  std::string label;    // e.g. "ood"
  std::string variant;  // loss variant that produced the model, if known
  double gamma = 0.0;
  std::size_t num_samples = 0;
  double accuracy = 0.0;
  std::vector<QTypeReport> per_qtype;
  double mean_kl_to_split = 0.0;  // averaged over question types
  std::optional<double> mean_kl_to_train;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

// Argmax predictions of the main branch, lowest answer id on ties.
inline std::vector<AnswerId> predict(const VqaModelParams& params, const Split& split,
                                     std::size_t batch_size = 512) {
  check_compatible(params.config, split.config);
  std::vector<AnswerId> out;
  out.reserve(split.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t len = std::min(batch_size, split.size() - start);
    idx.resize(len);
    std::iota(idx.begin(), idx.end(), start);
    const BatchData b = make_batch(split, idx);
    const Tensor logits = vqa_logits(params, b.inputs);
    for (std::size_t i = 0; i < len; ++i) out.push_back(static_cast<AnswerId>(argmax(logits.row(i))));
  }
  return out;
}

// Builds a report from predictions. Exposed separately so any predictor
// (including test oracles) can be scored the same way.
inline EvalReport score_predictions(const Split& split, std::span<const AnswerId> predictions,
                                    const PriorTable* train_prior = nullptr) {
  if (split.samples.empty()) throw InvalidArgument("cannot evaluate on an empty split");
  if (predictions.size() != split.size()) throw ShapeError("one prediction per sample required");
  const auto& cfg = split.config;
  const std::size_t k_types = cfg.num_qtypes, n_ans = cfg.num_answers();
  if (train_prior && (train_prior->num_qtypes() != k_types || train_prior->num_answers() != n_ans)) {
    throw ShapeError("training prior does not match the split");
  }

  std::vector<std::size_t> counts(k_types, 0), correct(k_types, 0);
  std::vector<std::vector<std::size_t>> pred_counts(k_types, std::vector<std::size_t>(n_ans, 0));
  std::vector<std::vector<std::size_t>> true_counts(k_types, std::vector<std::size_t>(n_ans, 0));
  std::size_t total_correct = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& s = split.samples[i];
    if (predictions[i] >= n_ans) throw InvalidArgument("prediction out of range");
    ++counts[s.qtype];
    ++pred_counts[s.qtype][predictions[i]];
    ++true_counts[s.qtype][s.answer];
    if (predictions[i] == s.answer) {
      ++correct[s.qtype];
      ++total_correct;
    }
  }

  EvalReport r;
  r.num_samples = split.size();
  r.accuracy = static_cast<double>(total_correct) / static_cast<double>(split.size());
  r.per_qtype.resize(k_types);
  double kl_split_sum = 0.0, kl_train_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < k_types; ++k) {
    auto& q = r.per_qtype[k];
    q.count = counts[k];
    q.predicted.assign(n_ans, 0.0);
    if (counts[k] == 0) continue;
    ++present;
    const double inv = 1.0 / static_cast<double>(counts[k]);
    q.accuracy = static_cast<double>(correct[k]) * inv;
    std::vector<double> truth(n_ans);
    for (std::size_t a = 0; a < n_ans; ++a) {
      q.predicted[a] = static_cast<double>(pred_counts[k][a]) * inv;
      truth[a] = static_cast<double>(true_counts[k][a]) * inv;
    }
    q.kl_to_split = kl_divergence(q.predicted, truth);
    kl_split_sum += q.kl_to_split;
    if (train_prior) {
      q.kl_to_train = kl_divergence(q.predicted, train_prior->rows[k]);
      kl_train_sum += *q.kl_to_train;
    }
  }
  r.mean_kl_to_split = kl_split_sum / static_cast<double>(present);
  if (train_prior) r.mean_kl_to_train = kl_train_sum / static_cast<double>(present);
  return r;
}

inline EvalReport evaluate(const VqaModelParams& params, const Split& split,
                           const PriorTable* train_prior = nullptr) {
  if (split.samples.empty()) throw InvalidArgument("cannot evaluate on an empty split");
  const auto preds = predict(params, split);
  return score_predictions(split, preds, train_prior);
}

// ---------------------------------------------------------------------------
// Gamma sweep

struct SweepRow {
  double gamma = 0.0;
  EvalReport in_distribution;
  EvalReport out_of_distribution;
};

// One LPF model per gamma from the same seeds, scored on both test splits.
inline std::vector<SweepRow> sweep_gamma(std::span<const double> gammas, const TrainConfig& base,
                                         const Split& train_split, const Split& id_test,
                                         const Split& ood_test) {
  if (gammas.empty()) throw InvalidArgument("sweep needs at least one gamma");
  for (double g : gammas) {
    if (!(g >= 0.0)) throw InvalidArgument("sweep gammas must be >= 0");
  }
  const PriorTable train_prior = empirical_prior(train_split);
  std::vector<SweepRow> rows;
  for (double g : gammas) {
    TrainConfig cfg = base;
    cfg.variant = LossVariant::lpf(g);
    cfg.variant.min_weight = base.variant.min_weight;
    const TrainResult run = train(train_split, cfg);
    SweepRow row{g, evaluate(run.params, id_test, &train_prior), evaluate(run.params, ood_test, &train_prior)};
    row.in_distribution.label = "id";
    row.out_of_distribution.label = "ood";
    for (auto* rep : {&row.in_distribution, &row.out_of_distribution}) {
      rep->variant = "lpf";
      rep->gamma = g;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report files

enum class ReportFormat { Json, Csv };

// Column order of the comma-separated report. One row per (report, question
// type) plus a row with qtype "all" carrying the overall numbers.
inline constexpr const char* kReportCsvHeader = "label,variant,gamma,qtype,count,accuracy,kl_to_split,kl_to_train";

inline void to_json(nlohmann::json& j, const QTypeReport& q) {
  j = nlohmann::json{{"count", q.count},
                     {"accuracy", q.accuracy},
                     {"predicted", q.predicted},
                     {"kl_to_split", q.kl_to_split},
                     {"kl_to_train", q.kl_to_train ? nlohmann::json(*q.kl_to_train) : nlohmann::json(nullptr)}};
}

inline void from_json(const nlohmann::json& j, QTypeReport& q) {
  q.count = j.at("count").get<std::size_t>();
  q.accuracy = j.at("accuracy").get<double>();
  q.predicted = j.at("predicted").get<std::vector<double>>();
  q.kl_to_split = j.at("kl_to_split").get<double>();
  const auto& t = j.at("kl_to_train");
  q.kl_to_train = t.is_null() ? std::nullopt : std::optional<double>(t.get<double>());
}

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"label", r.label},
                     {"variant", r.variant},
                     {"gamma", r.gamma},
                     {"num_samples", r.num_samples},
                     {"accuracy", r.accuracy},
                     {"mean_kl_to_split", r.mean_kl_to_split},
                     {"mean_kl_to_train",
                      r.mean_kl_to_train ? nlohmann::json(*r.mean_kl_to_train) : nlohmann::json(nullptr)},
                     {"per_qtype", r.per_qtype}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r.label = j.at("label").get<std::string>();
  r.variant = j.at("variant").get<std::string>();
  r.gamma = j.at("gamma").get<double>();
  r.num_samples = j.at("num_samples").get<std::size_t>();
  r.accuracy = j.at("accuracy").get<double>();
  r.mean_kl_to_split = j.at("mean_kl_to_split").get<double>();
  const auto& t = j.at("mean_kl_to_train");
  r.mean_kl_to_train = t.is_null() ? std::nullopt : std::optional<double>(t.get<double>());
  r.per_qtype = j.at("per_qtype").get<std::vector<QTypeReport>>();
}

inline std::string serialize_reports(std::span<const EvalReport> reports, ReportFormat format) {
  if (format == ReportFormat::Json) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : reports) j.push_back(r);
    return j.dump(2) + "\n";
  }
  auto opt = [](const std::optional<double>& x) { return x ? format_double(*x) : std::string(); };
  std::ostringstream os;
  os << kReportCsvHeader << "\n";
  for (const auto& r : reports) {
    const std::string prefix = r.label + "," + r.variant + "," + format_double(r.gamma) + ",";
    os << prefix << "all," << r.num_samples << "," << format_double(r.accuracy) << ","
       << format_double(r.mean_kl_to_split) << "," << opt(r.mean_kl_to_train) << "\n";
    for (std::size_t k = 0; k < r.per_qtype.size(); ++k) {
      const auto& q = r.per_qtype[k];
      os << prefix << k << "," << q.count << "," << format_double(q.accuracy) << ","
         << format_double(q.kl_to_split) << "," << opt(q.kl_to_train) << "\n";
    }
  }
  return os.str();
}

inline std::vector<EvalReport> parse_reports(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.is_object()) return {j.get<EvalReport>()};
    return j.get<std::vector<EvalReport>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

inline void emit_report(std::span<const EvalReport> reports, const std::string& path, ReportFormat format) {
  write_file(path, serialize_reports(reports, format));
}

inline std::vector<EvalReport> read_reports(const std::string& path) { return parse_reports(read_file(path)); }

inline constexpr const char* kRunLogCsvHeader = "epoch,mean_l_lpf,mean_l_qo,mean_alpha,mean_beta,train_accuracy";

inline std::string serialize_run_log(const RunLog& log) {
  std::ostringstream os;
  os << kRunLogCsvHeader << "\n";
  for (const auto& e : log.epochs) {
    os << e.epoch << "," << format_double(e.mean_l_lpf) << "," << format_double(e.mean_l_qo) << ","
       << format_double(e.mean_alpha) << "," << format_double(e.mean_beta) << ","
       << format_double(e.train_accuracy) << "\n";
  }
  return os.str();
}

}  // namespace lpf
