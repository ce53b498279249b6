#include "agm/attribution.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "agm/errors.hpp"
#include "test_util.hpp"

namespace agm {
namespace {

using testing::numeric_gradient;
using testing::random_matrix;
using testing::tiny_config;

// Tiny model with parameters pushed away from the small init so gradients
// are well above finite-difference noise.
Model perturbed_model(std::uint64_t seed, double scale = 0.3) {
  Model m(tiny_config(), seed);
  std::mt19937_64 rng(seed + 1000);
  for (auto& p : m.parameters()) {
    p.var.mutable_value() += random_matrix(p.var.rows(), p.var.cols(), rng, scale);
  }
  return m;
}

std::vector<int> random_tokens(std::mt19937_64& rng, int len, int vocab) {
  std::uniform_int_distribution<int> tok(special::kCount, vocab - 1);
  std::vector<int> t{special::kCls};
  for (int i = 1; i < len; ++i) t.push_back(tok(rng));
  return t;
}

TEST(GradXInput, ElementwiseProductSummedOverHidden) {
  ad::Var h = ad::parameter(ad::Matrix{{1.0, 2.0}});
  const ad::Var loss = ad::sum(ad::mul(ad::constant(ad::Matrix{{0.5, -1.0}}), h));
  const AttributionMap map = grad_x_input(loss, h, false);
  ASSERT_EQ(map.scores.size(), 1u);
  EXPECT_DOUBLE_EQ(map.scores[0], -1.5);
  EXPECT_FALSE(map.differentiable());
  EXPECT_EQ(map.method, AttributionMethod::grad_x_input);
}

TEST(GradXInput, UnreachedRowsScoreZero) {
  ad::Var h = ad::parameter(ad::Matrix{{1.0, 2.0}, {3.0, 4.0}});
  const ad::Var loss = ad::sum(ad::slice_rows(h, 0, 1));
  const AttributionMap map = grad_x_input(loss, h, true);
  EXPECT_DOUBLE_EQ(map.scores[0], 3.0);
  EXPECT_EQ(map.scores[1], 0.0);
}

// Mean-pooled linear classifier over free hidden states: the gradient has a
// closed form, dL/dh[i] = (softmax(z) - onehot(y)) W^T / L.
TEST(GradXInput, MatchesLinearClassifierClosedForm) {
  std::mt19937_64 rng(3);
  const int len = 5, d = 4;
  ad::Var h = ad::parameter(random_matrix(len, d, rng));
  const ad::Matrix w = random_matrix(d, 2, rng);
  const ad::Matrix b = random_matrix(1, 2, rng);
  const ad::Var pool =
      ad::constant(ad::Matrix::Constant(1, len, 1.0 / len));
  const ad::Var logits =
      ad::linear(ad::matmul(pool, h), ad::constant(w), ad::constant(b));
  const int y[] = {1};
  const AttributionMap map =
      grad_x_input(ad::cross_entropy(logits, y), h, false);

  const ad::Matrix z = (h.value().colwise().mean()) * w + b;
  const double m = z.maxCoeff();
  ad::Matrix p = (z.array() - m).exp().matrix();
  p /= p.sum();
  p(0, 1) -= 1.0;
  const ad::Matrix row_grad = p * w.transpose() / len;
  for (int i = 0; i < len; ++i) {
    const double expected = row_grad.row(0).dot(h.value().row(i));
    EXPECT_NEAR(map.scores[static_cast<std::size_t>(i)], expected, 1e-6);
  }
}

TEST(GradXInput, DifferentiableScoresMatchPlainScores) {
  const Model m = perturbed_model(5);
  std::mt19937_64 rng(1);
  const auto tokens = random_tokens(rng, 5, tiny_config().vocab_size);
  const auto mask = full_mask(tokens.size());
  const auto plain = grad_x_input(m, tokens, mask, 1, false);
  const auto diff = grad_x_input(m, tokens, mask, 1, true);
  ASSERT_TRUE(diff.differentiable());
  ASSERT_EQ(diff.graph.rows(), 5);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    EXPECT_NEAR(plain.scores[i], diff.scores[i], 1e-12);
    EXPECT_TRUE(std::isfinite(plain.scores[i]));
  }
  EXPECT_EQ(diff.target, "ce:label=1");
}

// d/dtheta sum_i score_i^2 through the retained graph, against central
// differences of the same quantity recomputed from scratch.
TEST(GradXInput, SecondOrderGradientMatchesFiniteDifferences) {
  Model m = perturbed_model(11);
  std::mt19937_64 rng(2);
  const auto tokens = random_tokens(rng, 5, tiny_config().vocab_size);
  const auto mask = full_mask(tokens.size());
  auto objective = [&]() {
    const auto map = grad_x_input(m, tokens, mask, 0, false);
    double s = 0.0;
    for (double v : map.scores) s += v * v;
    return s;
  };
  for (const char* name :
       {"layers.0.attention.query.weight", "layers.1.ffn.in.weight",
        "embeddings.token", "classifier.weight"}) {
    const auto map = grad_x_input(m, tokens, mask, 0, true);
    const ad::Var total = ad::sum(ad::square(map.graph));
    const ad::Var param = m.parameter(name);
    const ad::Var inputs[] = {param};
    const ad::Matrix analytic = ad::grad(total, inputs)[0].value();
    ad::Matrix& value = const_cast<ad::Var&>(param).mutable_value();
    const ad::Matrix numeric = numeric_gradient(objective, value, 1e-5);
    EXPECT_LT(testing::relative_error(analytic, numeric, 1e-13), 1e-3) << name;
    EXPECT_GT(analytic.norm(), 0.0) << name;
  }
}

TEST(GradXInput, PaddingLeavesContentScoresUnchanged) {
  const Model m = perturbed_model(7);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const auto tokens = random_tokens(rng, 3, tiny_config().vocab_size);
    const auto base = grad_x_input(m, tokens, full_mask(3), 0, false);
    for (int pads = 1; pads <= 3; ++pads) {
      auto padded = tokens;
      padded.insert(padded.end(), static_cast<std::size_t>(pads), special::kPad);
      const auto mask = mask_from_tokens(padded);
      const auto map = grad_x_input(m, padded, mask, 0, false);
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        EXPECT_NEAR(map.scores[i], base.scores[i], 1e-6);
      }
      for (std::size_t i = tokens.size(); i < padded.size(); ++i) {
        EXPECT_EQ(map.scores[i], 0.0);
      }
    }
  }
}

TEST(GradXInput, PredictedLabelTarget) {
  const Model m = perturbed_model(4);
  std::mt19937_64 rng(4);
  Example e;
  e.tokens = random_tokens(rng, 4, tiny_config().vocab_size);
  const int pred = m.predict(e.tokens, full_mask(4));
  e.label = 1 - pred;
  const auto by_pred = grad_x_input(m, e, false, AttributionLabel::predicted);
  const auto by_true = grad_x_input(m, e, false, AttributionLabel::true_label);
  EXPECT_EQ(by_pred.target, "ce:label=" + std::to_string(pred));
  EXPECT_EQ(by_true.target, "ce:label=" + std::to_string(e.label));
}

TEST(GradXInput, NonFiniteLossRaisesWithDiagnostics) {
  Model m(tiny_config(), 1);
  m.parameters().back().var.mutable_value().setConstant(0.0);
  const_cast<ad::Var&>(m.parameter("classifier.bias"))
      .mutable_value()(0, 0) = std::numeric_limits<double>::infinity();
  const std::vector<int> tokens{special::kCls, 5, 6};
  try {
    grad_x_input(m, tokens, full_mask(3), 1, false);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(e.diagnostics().find("loss"), std::string::npos);
  }
}

TEST(IntegratedGradients, LinearFunctionIsExactForAnyStepCount) {
  std::mt19937_64 rng(1);
  const ad::Matrix a = random_matrix(4, 3, rng);
  const ad::Matrix x = random_matrix(4, 3, rng);
  const ad::Matrix b = random_matrix(4, 3, rng);
  auto f = [&](const ad::Var& e) { return ad::sum(ad::mul(e, ad::constant(a))); };
  const ad::Matrix expected = ((x - b).cwiseProduct(a)).rowwise().sum();
  for (int steps : {1, 2, 7, 64}) {
    const auto s = integrated_gradients(f, x, b, steps);
    double total = 0.0;
    for (int i = 0; i < 4; ++i) {
      EXPECT_NEAR(s[static_cast<std::size_t>(i)], expected(i, 0), 1e-12);
      total += s[static_cast<std::size_t>(i)];
    }
    const double fx = (x.cwiseProduct(a)).sum();
    const double fb = (b.cwiseProduct(a)).sum();
    EXPECT_NEAR(total, fx - fb, 1e-8);
  }
}

TEST(IntegratedGradients, BaselineEqualToInputGivesZero) {
  const Model m = perturbed_model(2);
  const std::vector<int> tokens{special::kCls, 5, 7};
  const auto mask = full_mask(3);
  const ad::Matrix emb = m.token_embeddings(tokens).value();
  const auto s = integrated_gradients(predicted_logit_function(m, mask, 0), emb,
                                      emb, 16);
  for (double v : s) EXPECT_EQ(v, 0.0);
}

TEST(IntegratedGradients, ZeroStepsRejected) {
  const Model m(tiny_config(), 1);
  const std::vector<int> tokens{special::kCls, 5};
  EXPECT_THROW(integrated_gradients(m, tokens, full_mask(2),
                                    IGBaseline::pad_embedding, 0),
               ArgumentError);
  auto f = [](const ad::Var& e) { return ad::sum(e); };
  EXPECT_THROW(integrated_gradients(f, ad::Matrix::Ones(2, 2),
                                    ad::Matrix::Zero(2, 2), 0),
               ArgumentError);
}

struct Endpoints {
  double fx;
  double fb;
};

Endpoints endpoints(const Model& m, std::span<const int> tokens, int label) {
  const auto mask = full_mask(tokens.size());
  const auto f = predicted_logit_function(m, mask, label);
  ad::NoGradGuard guard;
  const ad::Matrix emb = m.token_embeddings(tokens).value();
  const ad::Matrix base =
      ig_baseline(m, static_cast<Eigen::Index>(tokens.size()),
                  IGBaseline::pad_embedding);
  return {f(ad::constant(emb)).scalar(), f(ad::constant(base)).scalar()};
}

double total(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

TEST(IntegratedGradients, CompletenessOnTinyModel) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Model m = perturbed_model(100 + static_cast<std::uint64_t>(trial));
    const auto tokens = random_tokens(rng, 5, tiny_config().vocab_size);
    const auto mask = full_mask(tokens.size());
    const auto map = integrated_gradients(m, tokens, mask,
                                          IGBaseline::pad_embedding, 256);
    const int label = map.target == "logit:1" ? 1 : 0;
    EXPECT_EQ(label, m.predict(tokens, mask));
    const auto ends = endpoints(m, tokens, label);
    const double diff = ends.fx - ends.fb;
    if (trial < 3) {
      const auto oracle = integrated_gradients(
          m, tokens, mask, IGBaseline::pad_embedding, 4096);
      EXPECT_NEAR(total(oracle.scores), diff,
                  1e-4 * std::max(1.0, std::abs(diff)));
    }
    EXPECT_LE(std::abs(total(map.scores) - diff), 0.01 * std::abs(diff))
        << "trial " << trial;
  }
}

TEST(IntegratedGradients, RefinementDoesNotIncreaseGap) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    const Model m = perturbed_model(200 + static_cast<std::uint64_t>(trial));
    const auto tokens = random_tokens(rng, 4, tiny_config().vocab_size);
    const auto mask = full_mask(tokens.size());
    const int label = m.predict(tokens, mask);
    const auto ends = endpoints(m, tokens, label);
    const ad::Matrix emb = m.token_embeddings(tokens).value();
    const ad::Matrix base = ig_baseline(m, 4, IGBaseline::pad_embedding);
    const auto f = predicted_logit_function(m, mask, label);
    double previous = std::numeric_limits<double>::infinity();
    for (int k = 16; k <= 256; k *= 2) {
      const double gap =
          std::abs(total(integrated_gradients(f, emb, base, k)) -
                   (ends.fx - ends.fb));
      EXPECT_LE(gap, previous + 1e-8) << "trial " << trial << " steps " << k;
      previous = gap;
    }
  }
}

TEST(IntegratedGradients, PaddedPositionsScoreZero) {
  const Model m = perturbed_model(8);
  const std::vector<int> tokens{special::kCls, 6, 9, special::kPad, special::kPad};
  const auto mask = mask_from_tokens(tokens);
  for (auto kind : {IGBaseline::pad_embedding, IGBaseline::zero}) {
    const auto map = integrated_gradients(m, tokens, mask, kind, 32);
    EXPECT_EQ(map.scores[3], 0.0);
    EXPECT_EQ(map.scores[4], 0.0);
    EXPECT_EQ(map.method, AttributionMethod::integrated_gradients);
  }
}

TEST(MeanAttribution, SingleExampleReproducesScores) {
  const std::vector<std::vector<int>> tokens{{special::kCls, 5, 6, 7}};
  const std::vector<std::vector<double>> scores{{9.0, 0.5, -1.0, 2.0}};
  const auto v = accumulate_mean_attribution(tokens, scores, 10);
  EXPECT_EQ(v.values[5], 0.5);
  EXPECT_EQ(v.values[6], -1.0);
  EXPECT_EQ(v.values[7], 2.0);
  EXPECT_EQ(v.values[special::kCls], 0.0);
  EXPECT_EQ(v.support[special::kCls], 0);
  EXPECT_EQ(v.support_size(), 3);
  EXPECT_EQ(v.support[8], 0);

  const auto with_special = accumulate_mean_attribution(tokens, scores, 10, true);
  EXPECT_EQ(with_special.values[special::kCls], 9.0);
}

TEST(MeanAttribution, RepeatedTokenAverages) {
  const std::vector<std::vector<int>> tokens{{special::kCls, 5, 5}};
  const std::vector<std::vector<double>> scores{{0.0, 1.0, 4.0}};
  const auto v = accumulate_mean_attribution(tokens, scores, 8);
  EXPECT_DOUBLE_EQ(v.values[5], 2.5);
  EXPECT_EQ(v.counts[5], 2);
}

TEST(MeanAttribution, MergedCorporaAreOccurrenceWeighted) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> tok(4, 11);
  std::normal_distribution<double> score(0.0, 1.0);
  std::vector<std::vector<int>> ta, tb;
  std::vector<std::vector<double>> sa, sb;
  for (int e = 0; e < 30; ++e) {
    auto& t = e % 2 ? ta : tb;
    auto& s = e % 2 ? sa : sb;
    std::vector<int> seq{special::kCls};
    std::vector<double> sc{score(rng)};
    for (int i = 0; i < 6; ++i) {
      seq.push_back(tok(rng));
      sc.push_back(score(rng));
    }
    t.push_back(seq);
    s.push_back(sc);
  }
  const auto va = accumulate_mean_attribution(ta, sa, 12);
  const auto vb = accumulate_mean_attribution(tb, sb, 12);
  auto tall = ta;
  tall.insert(tall.end(), tb.begin(), tb.end());
  auto sall = sa;
  sall.insert(sall.end(), sb.begin(), sb.end());
  const auto merged = accumulate_mean_attribution(tall, sall, 12);
  for (int t = 4; t < 12; ++t) {
    const auto n = va.counts[t] + vb.counts[t];
    if (n == 0) continue;
    const double expected =
        (va.values[t] * va.counts[t] + vb.values[t] * vb.counts[t]) / n;
    EXPECT_NEAR(merged.values[t], expected, 1e-12);
  }
}

TEST(MeanAttribution, ModelCorpus) {
  const Model m = perturbed_model(3);
  std::vector<Example> corpus(3);
  corpus[0].tokens = {special::kCls, 5, 6};
  corpus[1].tokens = {special::kCls, 6, 7, 8};
  corpus[2].tokens = {special::kCls, 5};
  const auto v = mean_attribution_vector(m, corpus, 12, 16);
  const auto s0 = integrated_gradients(m, corpus[0], IGBaseline::pad_embedding, 16);
  const auto s1 = integrated_gradients(m, corpus[1], IGBaseline::pad_embedding, 16);
  EXPECT_NEAR(v.values[6], (s0.scores[2] + s1.scores[1]) / 2.0, 1e-12);
  EXPECT_EQ(v.support_size(), 4);
  EXPECT_THROW(mean_attribution_vector(m, std::span<const Example>{}, 12),
               ArgumentError);
}

}  // namespace
}  // namespace agm
