#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "agm/agm.hpp"
#include "agm/errors.hpp"
#include "test_corpus.hpp"

namespace agm {
namespace {

TEST(TrainAgm, SameSeedSameRun) {
  const auto s = testing::small_suite();
  TrainConfig c = s.config;
  c.max_epochs = 2;
  const auto a = train_agm(c, s.sources, AGMVariant::full, 42);
  const auto b = train_agm(c, s.sources, AGMVariant::full, 42);
  EXPECT_EQ(a.log.best_validation_f1, b.log.best_validation_f1);
  ASSERT_EQ(a.log.steps.size(), b.log.steps.size());
  for (std::size_t i = 0; i < a.log.steps.size(); ++i) {
    EXPECT_EQ(a.log.steps[i].total, b.log.steps[i].total) << i;
    EXPECT_EQ(a.log.steps[i].n_flagged, b.log.steps[i].n_flagged) << i;
  }
  const auto sa = a.model.state(), sb = b.model.state();
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(std::memcmp(sa[i].data(), sb[i].data(), sizeof(double) * sa[i].size()), 0);
  }
}

// Attributions start near zero (small classifier head) and shrink again once
// the sources are fit, so the penalty rises and then decays. Trained to
// convergence, the last steps sit below the first ones.
TEST(TrainAgm, MaskLossTrendsDownOnPlantedCorpus) {
  const auto s = testing::small_suite(3, 48);
  TrainConfig c = s.config;
  c.max_epochs = 10;
  c.patience = 10;
  const auto r = train_agm(c, s.sources, AGMVariant::mask_only, 42);
  const auto& steps = r.log.steps;
  ASSERT_GE(steps.size(), 20u);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += steps[i].mask;
    last += steps[steps.size() - 1 - i].mask;
  }
  EXPECT_LT(last / 10.0, first / 10.0);
  for (const auto& step : steps) {
    EXPECT_NEAR(step.total, step.ce + 0.1 * step.mask, 1e-6);
    EXPECT_EQ(step.ccl, 0.0);
  }
}

TEST(TrainAgm, StopsAfterThreeStaleValidations) {
  const auto s = testing::small_suite(3, 16);
  TrainConfig c = s.config;
  c.max_epochs = 20;
  c.patience = 3;
  c.lr = 1e-12;  // validation F1 never moves after the first epoch
  c.mlm_warmup_epochs = 0;
  const auto r = train_agm(c, s.sources, AGMVariant::mask_only, 42);
  ASSERT_EQ(r.log.epochs.size(), 4u);
  EXPECT_TRUE(r.log.epochs[0].improved);
  for (std::size_t e = 1; e < 4; ++e) EXPECT_FALSE(r.log.epochs[e].improved);
  EXPECT_TRUE(r.log.stopped_early);
  EXPECT_EQ(r.log.best_epoch, 0);
}

TEST(TrainAgm, PlantedTokenFlaggedOnlyInSomeContexts) {
  const auto s = testing::small_suite(3, 48);
  TrainConfig c = s.config;
  c.max_epochs = 3;
  const auto r = train_agm(c, s.sources, AGMVariant::mask_only, 42);
  const auto& vocab = s.suite.tokenizer.vocabulary();
  int mixed = 0, seen = 0;
  for (const auto& spec : default_suite(0.9)) {
    for (const auto& t : spec.spurious_tokens) {
      const auto it = r.final_epoch_flags.find(vocab.id(t.word));
      if (it == r.final_epoch_flags.end()) continue;
      ++seen;
      mixed += it->second.flagged > 0 && it->second.unflagged > 0;
    }
  }
  EXPECT_GT(seen, 0);
  EXPECT_GT(mixed, 0);
  for (const auto& [token, counts] : r.final_epoch_flags) {
    EXPECT_FALSE(special::is_special(token));
  }
}

TEST(TrainAgm, EmptyCorpusRejected) {
  const auto s = testing::small_suite();
  EXPECT_THROW(train_agm(s.config, std::span<const DomainCorpus>{}, AGMVariant::full, 42),
               ArgumentError);
  std::vector<DomainCorpus> hollow{{"movies", {}, {}}};
  EXPECT_THROW(train_agm(s.config, hollow, AGMVariant::full, 42), ArgumentError);
}

}  // namespace
}  // namespace agm
