#pragma once

// Synthetic changing-priors benchmark.
//
// K question types, each with its own block of m answers. A question is a fixed
// token template per type, so the question reveals the type and nothing else.
// The visual feature is a noisy copy of a per-(type, answer) prototype, so every
// question is answerable from the image. Training answers follow a Zipf law in
// a seeded order; the out-of-distribution test split assigns the same
// probabilities in reversed rank order, so following the training prior is
// maximally wrong there.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lpf/errors.hpp"
#include "lpf/model.hpp"
#include "lpf/objectives.hpp"
#include "lpf/rng.hpp"
#include "lpf/textio.hpp"

namespace lpf {

struct BenchmarkConfig {
  std::size_t num_qtypes = 8;
  std::size_t answers_per_qtype = 5;
  std::size_t tokens_per_question = 4;
  std::size_t v_in_dim = 16;
  double prototype_scale = 1.0;
  double noise_std = 0.1;
  double zipf_s = 1.5;
  std::size_t n_train = 8000;
  std::size_t n_test = 4000;
  std::uint64_t seed = 0;

  std::size_t num_answers() const noexcept { return num_qtypes * answers_per_qtype; }
  // tokens_per_question - 1 shared words plus one word per question type
  std::size_t vocab_size() const noexcept { return tokens_per_question - 1 + num_qtypes; }
  std::size_t num_cells() const noexcept { return num_answers(); }

  void validate() const {
    if (num_qtypes < 1) throw InvalidArgument("benchmark: need at least one question type");
    if (answers_per_qtype < 2) throw InvalidArgument("benchmark: need at least 2 answers per type");
    if (tokens_per_question < 1) throw InvalidArgument("benchmark: questions need at least one token");
    if (v_in_dim < 1) throw InvalidArgument("benchmark: v_in_dim must be positive");
    if (n_train < num_cells() || n_test < num_cells()) {
      throw InvalidArgument("benchmark: split sizes must cover every (type, answer) cell");
    }
    if (!(zipf_s > 0.0)) throw InvalidArgument("benchmark: zipf_s must be positive");
    if (!(prototype_scale > 0.0)) throw InvalidArgument("benchmark: prototype_scale must be positive");
    if (!(noise_std >= 0.0) || !(noise_std < prototype_scale / 4.0)) {
      throw InvalidArgument("benchmark: noise_std must lie in [0, prototype_scale / 4)");
    }
  }

  // Canonical text used for the fingerprint and the split header.
  std::string canonical() const {
    std::ostringstream os;
    os << "num_qtypes=" << num_qtypes << ";answers_per_qtype=" << answers_per_qtype
       << ";tokens_per_question=" << tokens_per_question << ";v_in_dim=" << v_in_dim
       << ";prototype_scale=" << format_double(prototype_scale)
       << ";noise_std=" << format_double(noise_std) << ";zipf_s=" << format_double(zipf_s)
       << ";n_train=" << n_train << ";n_test=" << n_test << ";seed=" << seed;
    return os.str();
  }

  std::string fingerprint() const { return hex64(fnv1a64(canonical())); }

  friend bool operator==(const BenchmarkConfig&, const BenchmarkConfig&) = default;
};

enum class SplitRole { Train, Test };

inline std::string_view to_string(SplitRole r) { return r == SplitRole::Train ? "train" : "test"; }

struct Sample {
  QTypeId qtype = 0;
  std::vector<TokenId> tokens;
  std::vector<double> feature;
  AnswerId answer = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Split {
  BenchmarkConfig config;
  SplitRole role = SplitRole::Train;
  PriorTable prior;  // generating distribution
  std::vector<Sample> samples;

  std::string fingerprint() const { return config.fingerprint(); }
  std::size_t size() const noexcept { return samples.size(); }

  friend bool operator==(const Split&, const Split&) = default;
};

namespace stream {
inline constexpr std::uint64_t kPriors = 1;
inline constexpr std::uint64_t kPrototypes = 2;
inline constexpr std::uint64_t kSplit = 3;
}  // namespace stream

inline std::vector<TokenId> question_template(const BenchmarkConfig& cfg, QTypeId k) {
  std::vector<TokenId> t;
  t.reserve(cfg.tokens_per_question);
  for (std::size_t i = 0; i + 1 < cfg.tokens_per_question; ++i) t.push_back(static_cast<TokenId>(i));
  t.push_back(static_cast<TokenId>(cfg.tokens_per_question - 1 + k));
  return t;
}

inline AnswerId first_answer(const BenchmarkConfig& cfg, QTypeId k) {
  return static_cast<AnswerId>(k * cfg.answers_per_qtype);
}

// Zipf probabilities for ranks 1..m.
inline std::vector<double> zipf_probabilities(std::size_t m, double s) {
  std::vector<double> w(m);
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    w[r] = std::pow(static_cast<double>(r + 1), -s);
    total += w[r];
  }
  for (double& x : w) x /= total;
  return w;
}

struct PriorPair {
  PriorTable train;
  PriorTable test;
};

inline PriorPair build_priors(const BenchmarkConfig& cfg) {
  cfg.validate();
  const std::size_t m = cfg.answers_per_qtype;
  const auto probs = zipf_probabilities(m, cfg.zipf_s);
  Rng rng(derive_seed(cfg.seed, stream::kPriors));
  PriorPair out;
  out.train.rows.assign(cfg.num_qtypes, std::vector<double>(cfg.num_answers(), 0.0));
  out.test.rows.assign(cfg.num_qtypes, std::vector<double>(cfg.num_answers(), 0.0));
  for (std::size_t k = 0; k < cfg.num_qtypes; ++k) {
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    const std::size_t base = first_answer(cfg, static_cast<QTypeId>(k));
    for (std::size_t r = 0; r < m; ++r) {
      out.train.rows[k][base + order[r]] = probs[r];
      out.test.rows[k][base + order[r]] = probs[m - 1 - r];
    }
  }
  return out;
}

// Unit prototypes, one row per (type, answer) cell in answer-id order. Within a
// question type the prototypes are orthonormal whenever m <= v_in_dim.
inline Tensor prototypes(const BenchmarkConfig& cfg) {
  const std::size_t d = cfg.v_in_dim, m = cfg.answers_per_qtype;
  Tensor protos = Tensor::matrix(cfg.num_cells(), d);
  Rng rng(derive_seed(cfg.seed, stream::kPrototypes));
  for (std::size_t k = 0; k < cfg.num_qtypes; ++k) {
    for (std::size_t j = 0; j < m; ++j) {
      auto row = protos.row(k * m + j);
      for (double& x : row) x = rng.normal();
      // Gram-Schmidt against earlier prototypes of the same type
      if (j < d) {
        for (std::size_t prev = 0; prev < j; ++prev) {
          const auto other = protos.row(k * m + prev);
          double dot = 0.0;
          for (std::size_t c = 0; c < d; ++c) dot += row[c] * other[c];
          for (std::size_t c = 0; c < d; ++c) row[c] -= dot * other[c];
        }
      }
      double norm = 0.0;
      for (double x : row) norm += x * x;
      norm = std::sqrt(norm);
      for (double& x : row) x /= norm;
    }
  }
  return protos;
}

// Largest-remainder apportionment of `n` items over `probs`. Ties in the
// fractional part go to the lowest index.
inline std::vector<std::size_t> apportion(std::size_t n, std::span<const double> probs) {
  std::vector<std::size_t> counts(probs.size());
  std::vector<double> frac(probs.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double exact = static_cast<double>(n) * probs[i];
    const double fl = std::floor(exact);
    counts[i] = static_cast<std::size_t>(fl);
    frac[i] = exact - fl;
    assigned += counts[i];
  }
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < n && i < idx.size(); ++i) {
    if (probs[idx[i]] > 0.0) {
      ++counts[idx[i]];
      ++assigned;
    }
  }
  // Rounding can leave a shortfall when fractional parts underflow; hand it to the largest cells.
  for (std::size_t i = 0; assigned < n; i = (i + 1) % idx.size()) {
    if (probs[i] > 0.0) {
      ++counts[i];
      ++assigned;
    }
  }
  return counts;
}

// Draws a split with exact stratified counts. The noise and shuffle stream is
// keyed by the config seed, the role and the prior table, so an in-distribution
// test split gets fresh noise even though it shares the training prior.
inline Split generate_split(const PriorTable& priors, std::size_t n, SplitRole role,
                            const BenchmarkConfig& cfg) {
  cfg.validate();
  if (priors.num_qtypes() != cfg.num_qtypes || priors.num_answers() != cfg.num_answers()) {
    throw ShapeError("prior table does not match the benchmark config");
  }
  priors.validate();
  if (n < cfg.num_cells()) {
    throw InvalidArgument("split of " + std::to_string(n) + " samples is smaller than the " +
                          std::to_string(cfg.num_cells()) + " (type, answer) cells");
  }

  std::string prior_text;
  for (const auto& row : priors.rows) {
    for (double p : row) prior_text += format_double(p) + ",";
  }
  Rng rng(derive_seed(cfg.seed, stream::kSplit ^ (static_cast<std::uint64_t>(role) << 8) ^
                                    (fnv1a64(prior_text) << 16)));
  const Tensor protos = prototypes(cfg);

  Split split;
  split.config = cfg;
  split.role = role;
  split.prior = priors;
  split.samples.reserve(n);
  const std::size_t per_type = n / cfg.num_qtypes, extra = n % cfg.num_qtypes;
  for (std::size_t k = 0; k < cfg.num_qtypes; ++k) {
    const std::size_t n_k = per_type + (k < extra ? 1 : 0);
    const auto counts = apportion(n_k, priors.rows[k]);
    const auto tmpl = question_template(cfg, static_cast<QTypeId>(k));
    for (std::size_t a = 0; a < counts.size(); ++a) {
      for (std::size_t c = 0; c < counts[a]; ++c) {
        Sample s;
        s.qtype = static_cast<QTypeId>(k);
        s.tokens = tmpl;
        s.answer = static_cast<AnswerId>(a);
        s.feature.resize(cfg.v_in_dim);
        const auto proto = protos.row(a);
        for (std::size_t d = 0; d < cfg.v_in_dim; ++d) {
          s.feature[d] = proto[d] * cfg.prototype_scale + rng.normal() * cfg.noise_std;
        }
        split.samples.push_back(std::move(s));
      }
    }
  }
  rng.shuffle(std::span<Sample>(split.samples));
  return split;
}

struct Benchmark {
  PriorPair priors;
  Split train;
  Split id_test;   // training priors, fresh noise
  Split ood_test;  // rank-inverted priors
};

inline Benchmark generate_benchmark(const BenchmarkConfig& cfg) {
  Benchmark b;
  b.priors = build_priors(cfg);
  b.train = generate_split(b.priors.train, cfg.n_train, SplitRole::Train, cfg);
  b.id_test = generate_split(b.priors.train, cfg.n_test, SplitRole::Test, cfg);
  b.ood_test = generate_split(b.priors.test, cfg.n_test, SplitRole::Test, cfg);
  return b;
}

inline PriorTable empirical_prior(const Split& split) {
  std::vector<QTypeId> q;
  std::vector<AnswerId> a;
  q.reserve(split.size());
  a.reserve(split.size());
  for (const auto& s : split.samples) {
    q.push_back(s.qtype);
    a.push_back(s.answer);
  }
  return build_prior_table(q, a, split.config.num_qtypes, split.config.num_answers());
}

// Classifies each sample by the nearest prototype among its question type's
// cells and returns the fraction classified correctly.
inline double nearest_prototype_accuracy(const Split& split) {
  if (split.samples.empty()) throw InvalidArgument("nearest_prototype_accuracy: empty split");
  const auto& cfg = split.config;
  const Tensor protos = prototypes(cfg);
  std::size_t correct = 0;
  for (const auto& s : split.samples) {
    const std::size_t base = first_answer(cfg, s.qtype);
    std::size_t best = base;
    double best_d = INFINITY;
    for (std::size_t a = base; a < base + cfg.answers_per_qtype; ++a) {
      const auto p = protos.row(a);
      double dist = 0.0;
      for (std::size_t d = 0; d < cfg.v_in_dim; ++d) {
        const double diff = s.feature[d] - p[d] * cfg.prototype_scale;
        dist += diff * diff;
      }
      if (dist < best_d) {
        best_d = dist;
        best = a;
      }
    }
    if (best == s.answer) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

// Index of the largest entry, lowest index on ties.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// Accuracy of the question-only predictor that always answers the training
// prior's mode, scored under `test_prior`: mean over types of
// test_prior[k][argmax train_prior[k]].
inline double prior_trap_accuracy(const PriorTable& train_prior, const PriorTable& test_prior) {
  if (train_prior.num_qtypes() != test_prior.num_qtypes() ||
      train_prior.num_answers() != test_prior.num_answers()) {
    throw ShapeError("prior tables differ in shape");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < train_prior.num_qtypes(); ++k) {
    total += test_prior.rows[k][argmax(train_prior.rows[k])];
  }
  return total / static_cast<double>(train_prior.num_qtypes());
}

// Bayes-optimal question-only accuracy on a split drawn from `prior`.
inline double question_only_ceiling(const PriorTable& prior) { return prior_trap_accuracy(prior, prior); }

// ---------------------------------------------------------------------------
// Split files.
//
// Line 1 is a JSON header:
//   {"format":"lpf-split","version":1,"role":...,"fingerprint":...,
//    "config":{...},"num_samples":N,"prior":[[...],...]}
// followed by one JSON object per sample:
//   {"q":<qtype>,"t":[<token ids>],"a":<answer>,"v":[<feature>]}
// Reals are written with 17 significant digits.

inline constexpr int kSplitFormatVersion = 1;

namespace detail {

inline void append_reals(std::string& out, std::span<const double> xs) {
  out += '[';
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += format_double(xs[i]);
  }
  out += ']';
}

inline std::string config_json(const BenchmarkConfig& c) {
  std::ostringstream os;
  os << "{\"num_qtypes\":" << c.num_qtypes << ",\"answers_per_qtype\":" << c.answers_per_qtype
     << ",\"tokens_per_question\":" << c.tokens_per_question << ",\"v_in_dim\":" << c.v_in_dim
     << ",\"prototype_scale\":" << format_double(c.prototype_scale)
     << ",\"noise_std\":" << format_double(c.noise_std) << ",\"zipf_s\":" << format_double(c.zipf_s)
     << ",\"n_train\":" << c.n_train << ",\"n_test\":" << c.n_test << ",\"seed\":" << c.seed << "}";
  return os.str();
}

inline BenchmarkConfig config_from_json(const nlohmann::json& j) {
  BenchmarkConfig c;
  c.num_qtypes = j.at("num_qtypes").get<std::size_t>();
  c.answers_per_qtype = j.at("answers_per_qtype").get<std::size_t>();
  c.tokens_per_question = j.at("tokens_per_question").get<std::size_t>();
  c.v_in_dim = j.at("v_in_dim").get<std::size_t>();
  c.prototype_scale = j.at("prototype_scale").get<double>();
  c.noise_std = j.at("noise_std").get<double>();
  c.zipf_s = j.at("zipf_s").get<double>();
  c.n_train = j.at("n_train").get<std::size_t>();
  c.n_test = j.at("n_test").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace detail

inline std::string serialize_split(const Split& split) {
  std::string out;
  out += "{\"format\":\"lpf-split\",\"version\":" + std::to_string(kSplitFormatVersion);
  out += ",\"role\":\"" + std::string(to_string(split.role)) + "\"";
  out += ",\"fingerprint\":\"" + split.fingerprint() + "\"";
  out += ",\"config\":" + detail::config_json(split.config);
  out += ",\"num_samples\":" + std::to_string(split.size());
  out += ",\"prior\":[";
  for (std::size_t k = 0; k < split.prior.rows.size(); ++k) {
    if (k) out += ',';
    detail::append_reals(out, split.prior.rows[k]);
  }
  out += "]}\n";
  for (const auto& s : split.samples) {
    out += "{\"q\":" + std::to_string(s.qtype) + ",\"t\":[";
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(s.tokens[i]);
    }
    out += "],\"a\":" + std::to_string(s.answer) + ",\"v\":";
    detail::append_reals(out, s.feature);
    out += "}\n";
  }
  return out;
}

inline Split parse_split(std::string_view text) {
  Split split;
  std::size_t line_no = 0;
  std::size_t expected = 0;
  bool have_header = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    const bool terminated = end != std::string_view::npos;
    if (!terminated) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!terminated) throw FormatError("unterminated record (file truncated?)", line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed record: ") + e.what(), line_no);
    }
    try {
      if (!have_header) {
        if (j.at("format").get<std::string>() != "lpf-split") throw FormatError("not a split file", line_no);
        const int version = j.at("version").get<int>();
        if (version != kSplitFormatVersion) {
          throw FormatError("unsupported split format version " + std::to_string(version), line_no);
        }
        const auto role = j.at("role").get<std::string>();
        if (role == "train") {
          split.role = SplitRole::Train;
        } else if (role == "test") {
          split.role = SplitRole::Test;
        } else {
          throw FormatError("unknown role '" + role + "'", line_no);
        }
        split.config = detail::config_from_json(j.at("config"));
        if (j.at("fingerprint").get<std::string>() != split.fingerprint()) {
          throw FormatError("config fingerprint does not match header config", line_no);
        }
        split.prior.rows = j.at("prior").get<std::vector<std::vector<double>>>();
        if (split.prior.num_qtypes() != split.config.num_qtypes ||
            split.prior.num_answers() != split.config.num_answers()) {
          throw FormatError("prior table shape does not match config", line_no);
        }
        expected = j.at("num_samples").get<std::size_t>();
        split.samples.reserve(expected);
        have_header = true;
        continue;
      }
      Sample s;
      s.qtype = j.at("q").get<QTypeId>();
      s.tokens = j.at("t").get<std::vector<TokenId>>();
      s.answer = j.at("a").get<AnswerId>();
      s.feature = j.at("v").get<std::vector<double>>();
      const auto& cfg = split.config;
      if (s.qtype >= cfg.num_qtypes) throw FormatError("question type out of range", line_no);
      if (s.answer < first_answer(cfg, s.qtype) ||
          s.answer >= first_answer(cfg, s.qtype) + cfg.answers_per_qtype) {
        throw FormatError("answer does not belong to its question type", line_no);
      }
      if (s.feature.size() != cfg.v_in_dim) throw FormatError("visual feature has wrong length", line_no);
      if (s.tokens.empty()) throw FormatError("question has no tokens", line_no);
      for (TokenId t : s.tokens) {
        if (t >= cfg.vocab_size()) throw FormatError("token id out of vocabulary", line_no);
      }
      if (split.samples.size() == expected) throw FormatError("more samples than the header declares", line_no);
      split.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad field: ") + e.what(), line_no);
    }
  }
  if (!have_header) throw FormatError("missing header", 1);
  if (split.samples.size() != expected) {
    throw FormatError("expected " + std::to_string(expected) + " samples, found " +
                          std::to_string(split.samples.size()) + " (file truncated?)",
                      line_no + 1);
  }
  return split;
}

inline void write_split(const Split& split, const std::string& path) { write_file(path, serialize_split(split)); }

inline Split read_split(const std::string& path) { return parse_split(read_file(path)); }

}  // namespace lpf
