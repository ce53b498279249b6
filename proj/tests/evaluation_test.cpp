#include "agm/evaluation.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "agm/errors.hpp"
#include "test_corpus.hpp"

namespace agm {
namespace {

TEST(MacroF1, HandCountedConfusions) {
  const std::vector<int> labels{0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(macro_f1(labels, labels), 1.0);
  const std::vector<int> all_one{1, 1, 1, 1};
  EXPECT_DOUBLE_EQ(macro_f1(all_one, labels), 1.0 / 3.0);
  const std::vector<int> inverted{1, 0, 1, 0};
  EXPECT_EQ(macro_f1(inverted, labels), 0.0);
}

TEST(MacroF1, AbsentClassWarns) {
  const std::vector<int> ones{1, 1, 1};
  std::vector<std::string> warnings;
  EXPECT_DOUBLE_EQ(macro_f1(ones, ones, &warnings), 0.5);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("class 0"), std::string::npos);
}

TEST(MacroF1, RejectsBadInput) {
  const std::vector<int> empty;
  const std::vector<int> two{0, 1};
  const std::vector<int> three{0, 1, 1};
  EXPECT_THROW(macro_f1(empty, empty), ArgumentError);
  EXPECT_THROW(macro_f1(two, three), ArgumentError);
}

TEST(MacroF1, MatchesConfusionMatrixOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<int> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<int>(rng() % 2);
      y[i] = static_cast<int>(rng() % 2);
    }
    double cm[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < n; ++i) cm[y[i]][p[i]] += 1;
    double f = 0.0;
    for (int c = 0; c < 2; ++c) {
      const double tp = cm[c][c];
      const double precision_den = cm[0][c] + cm[1][c];
      const double recall_den = cm[c][0] + cm[c][1];
      if (precision_den == 0 && recall_den == 0) continue;
      const double prec = precision_den > 0 ? tp / precision_den : 0.0;
      const double rec = recall_den > 0 ? tp / recall_den : 0.0;
      f += prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    }
    EXPECT_NEAR(macro_f1(p, y), f / 2.0, 1e-12);
  }
}

TEST(GeneralizationGap, PublishedRows) {
  EXPECT_NEAR(generalization_gap(0.950, 0.706), 0.244, 1e-12);
  EXPECT_NEAR(transfer_efficiency(0.950, 0.706), 0.743, 5e-4);
  EXPECT_NEAR(generalization_gap(0.914, 0.935), 0.021, 1e-12);
  EXPECT_NEAR(transfer_efficiency(0.914, 0.935), 1.023, 5e-4);
  EXPECT_GT(transfer_efficiency(0.914, 0.935), 1.0);
  EXPECT_EQ(generalization_gap(0.8, 0.8), 0.0);
}

TEST(GeneralizationGap, Symmetric) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const double a = u(rng), b = u(rng);
    EXPECT_EQ(generalization_gap(a, b), generalization_gap(b, a));
  }
  EXPECT_THROW(transfer_efficiency(0.0, 0.5), UndefinedError);
}

TEST(BootstrapCi, ConstantInputCollapses) {
  const std::vector<double> c(8, 0.25);
  const auto [lo, hi] = bootstrap_ci(c, 10000, 0.95, 3);
  EXPECT_EQ(lo, 0.25);
  EXPECT_EQ(hi, 0.25);
}

TEST(BootstrapCi, BracketsMeanAndIsDeterministic) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.2, 0.05);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(8);
    for (auto& x : v) x = n(rng);
    const auto a = bootstrap_ci(v, 2000, 0.95, 11);
    const auto b = bootstrap_ci(v, 2000, 0.95, 11);
    EXPECT_EQ(a, b);
    const double m = mean(v);
    EXPECT_LE(a.first, m);
    EXPECT_GE(a.second, m);
    EXPECT_GE(a.first, *std::min_element(v.begin(), v.end()));
    EXPECT_LE(a.second, *std::max_element(v.begin(), v.end()));
  }
}

TEST(BootstrapCi, NarrowsWithLevel) {
  const std::vector<double> v{0, 1, 0, 1, 0, 1, 0, 1};
  double previous = 2.0;
  for (double level : {0.95, 0.9, 0.8, 0.65, 0.5}) {
    const auto [lo, hi] = bootstrap_ci(v, 10000, level, 5);
    EXPECT_LE(hi - lo, previous) << level;
    previous = hi - lo;
  }
  EXPECT_LT(previous, bootstrap_ci(v, 10000, 0.95, 5).second -
                          bootstrap_ci(v, 10000, 0.95, 5).first);
  const std::vector<double> empty;
  EXPECT_THROW(bootstrap_ci(empty), ArgumentError);
}

TEST(Pearson, ClosedForms) {
  const std::vector<double> x{1, 2, 3};
  EXPECT_NEAR(pearson(x, std::vector<double>{5, 7, 9}), 1.0, 1e-15);
  EXPECT_NEAR(pearson(x, std::vector<double>{-1, -2, -3}), -1.0, 1e-15);
  EXPECT_NEAR(pearson(x, std::vector<double>{1, 3, 2}), 0.5, 1e-15);
  EXPECT_THROW(pearson(x, std::vector<double>{2, 2, 2}), UndefinedError);
  EXPECT_THROW(pearson(x, std::vector<double>{1, 2}), ArgumentError);
  EXPECT_THROW(pearson(std::vector<double>{1}, std::vector<double>{1}), ArgumentError);
}

TEST(Summary, MeanAndSampleDeviation) {
  const std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
  EXPECT_DOUBLE_EQ(mean(v), 5.0);
  EXPECT_NEAR(stddev(v), std::sqrt(32.0 / 7.0), 1e-15);
  EXPECT_EQ(stddev(std::vector<double>{3.0}), 0.0);
}

CellResult cell(std::uint64_t seed, double s, double t) {
  return {"erm", "tweets", "", seed, s, t, generalization_gap(s, t), t / s, 0};
}

TEST(MakeReport, OrdersBySeedAndChecksConsistency) {
  const std::vector<CellResult> cells{cell(44, 0.9, 0.7), cell(42, 0.95, 0.8),
                                      cell(43, 0.92, 0.75)};
  const auto r = make_report(cells, 1);
  EXPECT_EQ(r.seeds, (std::vector<std::uint64_t>{42, 43, 44}));
  ASSERT_EQ(r.delta.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(r.delta[i], std::abs(r.source_f1[i] - r.target_f1[i]));
    EXPECT_DOUBLE_EQ(r.te[i], r.target_f1[i] / r.source_f1[i]);
  }
  EXPECT_LE(r.delta_ci.first, mean(r.delta));
  EXPECT_GE(r.delta_ci.second, mean(r.delta));
  auto mixed = cells;
  mixed[1].method = "dann";
  EXPECT_THROW(make_report(mixed), ArgumentError);
}

TEST(CellResult, JsonRoundTrip) {
  const CellResult c = cell(45, 0.91, 0.66);
  const nlohmann::json j = c;
  const auto back = j.get<CellResult>();
  EXPECT_EQ(back.method, c.method);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.delta, c.delta);
  EXPECT_THROW(nlohmann::json({{"method", "erm"}}).get<CellResult>(), SchemaError);
}

TEST(Hygiene, CountsSharedIds) {
  const std::vector<std::string> test{"t:1", "t:2", "t:3"};
  const std::vector<std::string> train{"a:1", "t:2"};
  const std::vector<std::string> val{"t:3", "b:9"};
  EXPECT_EQ(count_overlap(test, train, val), 2);
  EXPECT_EQ(count_overlap(test, std::vector<std::string>{}, std::vector<std::string>{}), 0);
}

TEST(RunCell, ZeroShotCellIsCleanAndReproducible) {
  const auto s = testing::small_suite();
  TrainConfig c = s.config;
  c.max_epochs = 2;
  const auto& domains = s.suite.domains;
  const auto a = run_cell(Method::erm, c, domains, "tweets", 42);
  const auto b = run_cell(Method::erm, c, domains, "tweets", 42);
  EXPECT_EQ(a.hygiene_violations, 0);
  EXPECT_EQ(a.source_f1, b.source_f1);
  EXPECT_EQ(a.target_f1, b.target_f1);
  EXPECT_DOUBLE_EQ(a.delta, std::abs(a.source_f1 - a.target_f1));
  EXPECT_EQ(a.target, "tweets");
  EXPECT_THROW(run_cell(Method::erm, c, domains, "nowhere", 42), ArgumentError);
}

// Leaking a target test example into a source's training split trips the
// hygiene check.
TEST(RunCell, LeakedTargetExampleIsRejected) {
  auto s = testing::small_suite();
  TrainConfig c = s.config;
  c.max_epochs = 1;
  auto domains = s.suite.domains;
  domains[0].splits.train.push_back(domains[3].splits.test[0]);
  EXPECT_THROW(run_cell(Method::erm, c, domains, "tweets", 42), ContractError);
}

TEST(LeaveOneOut, OneReportPerTarget) {
  auto s = testing::small_suite(3, 16);
  TrainConfig c = s.config;
  c.max_epochs = 1;
  c.mlm_warmup_epochs = 0;
  const std::vector<std::uint64_t> seeds{42, 43};
  int seen = 0;
  const auto reports = leave_one_out(Method::erm, s.suite.domains, seeds, c,
                                     [&](const CellResult&) { ++seen; });
  ASSERT_EQ(reports.size(), 4u);
  EXPECT_EQ(seen, 8);
  for (const auto& r : reports) EXPECT_EQ(r.delta.size(), 2u);
  EXPECT_EQ(kDefaultSeeds.size(), 8u);
  EXPECT_EQ(kDefaultSeeds.front(), 42u);
  EXPECT_EQ(kDefaultSeeds.back(), 49u);
}

}  // namespace
}  // namespace agm
