#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "lpf/synthbench.hpp"

namespace lpf {
namespace {

BenchmarkConfig small_config(std::uint64_t seed = 3) {
  BenchmarkConfig c;
  c.num_qtypes = 3;
  c.answers_per_qtype = 4;
  c.v_in_dim = 8;
  c.n_train = 600;
  c.n_test = 300;
  c.seed = seed;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("lpf_synth_" + name)).string();
}

TEST(BuildPriors, ZipfRowOnChosenOrder) {
  BenchmarkConfig c = small_config();
  c.num_qtypes = 1;
  c.answers_per_qtype = 3;
  c.zipf_s = 1.0;
  const PriorPair p = build_priors(c);
  std::vector<double> sorted = p.train.rows[0];
  std::sort(sorted.rbegin(), sorted.rend());
  EXPECT_NEAR(sorted[0], 6.0 / 11.0, 1e-15);
  EXPECT_NEAR(sorted[1], 3.0 / 11.0, 1e-15);
  EXPECT_NEAR(sorted[2], 2.0 / 11.0, 1e-15);
}

TEST(BuildPriors, TestRowIsReversedRanking) {
  const BenchmarkConfig c = small_config();
  const PriorPair p = build_priors(c);
  const std::size_t m = c.answers_per_qtype;
  for (std::size_t k = 0; k < c.num_qtypes; ++k) {
    std::vector<std::size_t> order(m);
    for (std::size_t i = 0; i < m; ++i) order[i] = k * m + i;
    // rank answers by train probability
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return p.train.rows[k][a] > p.train.rows[k][b]; });
    for (std::size_t r = 0; r < m; ++r) {
      EXPECT_EQ(p.test.rows[k][order[r]], p.train.rows[k][order[m - 1 - r]]);
    }
    // outside its own block every entry is zero
    for (std::size_t a = 0; a < c.num_answers(); ++a) {
      if (a / m != k) {
        EXPECT_EQ(p.train.rows[k][a], 0.0);
        EXPECT_EQ(p.test.rows[k][a], 0.0);
      }
    }
  }
}

TEST(BuildPriors, RowsSumToOne) {
  const PriorPair p = build_priors(BenchmarkConfig{});
  for (const auto* t : {&p.train, &p.test}) {
    for (const auto& row : t->rows) {
      double s = 0.0;
      for (double x : row) s += x;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Config, Validation) {
  BenchmarkConfig c = small_config();
  c.noise_std = 0.25;  // must be < prototype_scale / 4
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = small_config();
  c.n_train = 5;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = small_config();
  c.answers_per_qtype = 1;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(GenerateSplit, ExactStratification) {
  BenchmarkConfig c = small_config();
  c.num_qtypes = 1;
  c.answers_per_qtype = 2;
  PriorTable prior{{{0.8, 0.2}}};
  const Split s = generate_split(prior, 10, SplitRole::Train, c);
  std::size_t zeros = 0;
  for (const auto& smp : s.samples) zeros += smp.answer == 0;
  EXPECT_EQ(zeros, 8u);
  EXPECT_EQ(s.size() - zeros, 2u);
  EXPECT_EQ(empirical_prior(s), prior);
}

TEST(GenerateSplit, NoiselessCellsShareFeature) {
  BenchmarkConfig c = small_config();
  c.noise_std = 0.0;
  const PriorPair p = build_priors(c);
  const Split s = generate_split(p.train, 200, SplitRole::Train, c);
  std::map<AnswerId, std::vector<double>> seen;
  for (const auto& smp : s.samples) {
    auto [it, inserted] = seen.emplace(smp.answer, smp.feature);
    if (!inserted) EXPECT_EQ(it->second, smp.feature);
  }
}

TEST(GenerateSplit, DeterministicPerSeed) {
  const BenchmarkConfig c = small_config(9);
  const Benchmark a = generate_benchmark(c), b = generate_benchmark(c);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(serialize_split(a.ood_test), serialize_split(b.ood_test));
  const Benchmark other = generate_benchmark(small_config(10));
  EXPECT_NE(serialize_split(a.train), serialize_split(other.train));
}

TEST(GenerateSplit, IdTestGetsFreshNoise) {
  const Benchmark b = generate_benchmark(small_config());
  EXPECT_EQ(b.id_test.prior, b.train.prior);
  EXPECT_NE(b.id_test.samples[0].feature, b.train.samples[0].feature);
}

TEST(GenerateSplit, TooSmallRejected) {
  const BenchmarkConfig c = small_config();
  const PriorPair p = build_priors(c);
  EXPECT_THROW(generate_split(p.train, c.num_cells() - 1, SplitRole::Train, c), InvalidArgument);
}

TEST(GenerateSplit, SampleInvariants) {
  const BenchmarkConfig c = small_config();
  const Benchmark b = generate_benchmark(c);
  std::map<QTypeId, std::vector<TokenId>> templates;
  std::vector<std::size_t> per_type(c.num_qtypes, 0);
  for (const auto& s : b.train.samples) {
    EXPECT_GE(s.answer, first_answer(c, s.qtype));
    EXPECT_LT(s.answer, first_answer(c, s.qtype) + c.answers_per_qtype);
    auto [it, inserted] = templates.emplace(s.qtype, s.tokens);
    if (!inserted) EXPECT_EQ(it->second, s.tokens);
    ++per_type[s.qtype];
  }
  // 600 / 3 types
  for (auto n : per_type) EXPECT_EQ(n, 200u);
  EXPECT_EQ(templates.size(), c.num_qtypes);
}

TEST(GenerateSplit, StratificationWithinRoundingBounds) {
  const BenchmarkConfig c = BenchmarkConfig{};
  const Benchmark b = generate_benchmark(c);
  for (const Split* s : {&b.train, &b.ood_test}) {
    const PriorTable emp = empirical_prior(*s);
    const std::size_t n_k = s->size() / c.num_qtypes;
    for (std::size_t k = 0; k < c.num_qtypes; ++k) {
      for (std::size_t a = 0; a < c.num_answers(); ++a) {
        const double count = emp.rows[k][a] * static_cast<double>(n_k);
        EXPECT_LT(std::abs(count - static_cast<double>(n_k) * s->prior.rows[k][a]), 1.0);
      }
    }
  }
}

TEST(Apportion, LargestRemainder) {
  const std::vector<double> p{0.5, 0.3, 0.2};
  EXPECT_EQ(apportion(10, p), (std::vector<std::size_t>{5, 3, 2}));
  // 7 * p = 3.5, 2.1, 1.4 -> floors 3,2,1 then remainder to the largest fraction (index 0)
  EXPECT_EQ(apportion(7, p), (std::vector<std::size_t>{4, 2, 1}));
  const std::vector<double> third{1.0 / 3, 1.0 / 3, 1.0 / 3};
  EXPECT_EQ(apportion(4, third), (std::vector<std::size_t>{2, 1, 1}));
}

TEST(EmpiricalPrior, OneSampleSplitIsOneHot) {
  BenchmarkConfig c = small_config();
  c.num_qtypes = 1;
  Split s;
  s.config = c;
  s.samples.push_back(Sample{0, question_template(c, 0), std::vector<double>(c.v_in_dim), 2});
  EXPECT_EQ(empirical_prior(s).rows[0], (std::vector<double>{0, 0, 1, 0}));
}

TEST(EmpiricalPrior, EmptySplitRejected) {
  Split s;
  s.config = small_config();
  EXPECT_THROW(empirical_prior(s), InvalidArgument);
}

// Union of two splits recovers the size-weighted mixture, checked by direct counting.
TEST(EmpiricalPrior, UnionRecoversMixture) {
  const Benchmark b = generate_benchmark(small_config());
  Split u = b.train;
  u.samples.insert(u.samples.end(), b.ood_test.samples.begin(), b.ood_test.samples.end());
  const PriorTable emp = empirical_prior(u);
  const PriorTable pt = empirical_prior(b.train), po = empirical_prior(b.ood_test);
  const auto& c = b.train.config;
  for (std::size_t k = 0; k < c.num_qtypes; ++k) {
    std::size_t nt = 0, no = 0;
    for (const auto& s : b.train.samples) nt += s.qtype == k;
    for (const auto& s : b.ood_test.samples) no += s.qtype == k;
    for (std::size_t a = 0; a < c.num_answers(); ++a) {
      std::size_t count = 0;
      for (const auto& s : u.samples) count += (s.qtype == k && s.answer == a);
      const double direct = static_cast<double>(count) / static_cast<double>(nt + no);
      const double mixture =
          (pt.rows[k][a] * static_cast<double>(nt) + po.rows[k][a] * static_cast<double>(no)) /
          static_cast<double>(nt + no);
      EXPECT_NEAR(emp.rows[k][a], direct, 1e-15);
      EXPECT_NEAR(emp.rows[k][a], mixture, 1e-12);
    }
  }
}

TEST(Oracles, NearestPrototypeSolvesDefaultBenchmark) {
  const Benchmark b = generate_benchmark(BenchmarkConfig{});
  EXPECT_GE(nearest_prototype_accuracy(b.train), 0.99);
  EXPECT_GE(nearest_prototype_accuracy(b.ood_test), 0.99);
}

TEST(Oracles, PrototypesAreUnitAndOrthogonalWithinType) {
  const BenchmarkConfig c = BenchmarkConfig{};
  const Tensor p = prototypes(c);
  const std::size_t m = c.answers_per_qtype;
  for (std::size_t k = 0; k < c.num_qtypes; ++k) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < c.v_in_dim; ++d) dot += p(k * m + i, d) * p(k * m + j, d);
        EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-12);
      }
    }
  }
}

TEST(Oracles, TrapAndCeiling) {
  const PriorPair p = build_priors(BenchmarkConfig{});
  const auto probs = zipf_probabilities(5, 1.5);
  EXPECT_NEAR(question_only_ceiling(p.train), probs[0], 1e-15);
  EXPECT_NEAR(prior_trap_accuracy(p.train, p.test), probs[4], 1e-15);
}

TEST(SplitFile, RoundTripIsExact) {
  const Benchmark b = generate_benchmark(small_config());
  const std::string path = temp_path("roundtrip.split");
  write_split(b.train, path);
  const Split back = read_split(path);
  EXPECT_EQ(back, b.train);
  for (std::size_t i = 0; i < back.size(); ++i) {
    for (std::size_t d = 0; d < back.samples[i].feature.size(); ++d) {
      EXPECT_EQ(std::bit_cast<std::uint64_t>(back.samples[i].feature[d]),
                std::bit_cast<std::uint64_t>(b.train.samples[i].feature[d]));
    }
  }
  std::filesystem::remove(path);
}

TEST(SplitFile, EmptySampleListRoundTrips) {
  Split s = generate_benchmark(small_config()).train;
  s.samples.clear();
  const std::string text = serialize_split(s);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
  EXPECT_EQ(parse_split(text), s);
}

TEST(SplitFile, TruncationNamesTheLine) {
  const Split s = generate_benchmark(small_config()).train;
  const std::string text = serialize_split(s);
  // cut in the middle of the third record (line 4)
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) pos = text.find('\n', pos) + 1;
  const std::string cut = text.substr(0, pos + 20);
  try {
    parse_split(cut);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.line(), 4u);
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos);
  }
  // cut on a record boundary: the missing samples are reported
  const std::string whole_lines = text.substr(0, pos);
  EXPECT_THROW(parse_split(whole_lines), FormatError);
}

TEST(SplitFile, MalformedRecordsRejected) {
  const Split s = generate_benchmark(small_config()).train;
  std::string text = serialize_split(s);
  const std::size_t line2 = text.find('\n') + 1;

  std::string bad = text;
  bad.insert(line2, "{not json}\n");
  try {
    parse_split(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.line(), 2u);
  }

  std::string version = text;
  version.replace(version.find("\"version\":1"), 11, "\"version\":7");
  EXPECT_THROW(parse_split(version), FormatError);

  std::string answer = text;
  const std::size_t a = answer.find("\"a\":", line2);
  answer.insert(a + 4, "99");  // pushes the id past every answer block
  EXPECT_THROW(parse_split(answer), FormatError);
}

}  // namespace
}  // namespace lpf
