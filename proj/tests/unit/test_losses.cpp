#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "macl/losses.hpp"

using namespace macl;
using namespace macl::losses;

namespace {

ad::Matrix row(std::initializer_list<double> xs) {
  ad::Matrix m(1, static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) m(0, i++) = x;
  return m;
}

ad::Matrix random_distributions(std::mt19937& rng, Eigen::Index rows, Eigen::Index cols) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  ad::Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = u(rng);
    m.row(r) /= m.row(r).sum();
  }
  return m;
}

// Gradient of the token loss at one step with respect to the target logit.
double autodiff_gt_logit_gradient(const ad::Matrix& logits, TokenId target, TokenId knowledge, double alpha) {
  ad::Tape t(true);
  auto z = t.parameter(logits, 0);
  auto probs = ad::softmax_rows(z, false);
  const std::vector<TokenId> k{knowledge};
  TokenLossConfig cfg;
  cfg.alpha = alpha;
  auto r = token_contrastive_loss(probs, {target}, k, cfg);
  t.backward(r.loss);
  ad::Matrix g;
  t.for_each_parameter_grad([&](std::size_t, const ad::Matrix& m) { g = m; });
  return g(0, target);
}

}  // namespace

TEST(Mle, PerfectPredictionIsZero) {
  ad::Tape t(false);
  auto p = t.constant(ad::Matrix::Identity(3, 3));
  EXPECT_EQ(mle_loss(p, {0, 1, 2}).scalar(), 0.0);
}

TEST(Mle, UniformClosedForm) {
  ad::Tape t(false);
  auto p = t.constant(ad::Matrix::Constant(4, 7, 1.0 / 7.0));
  EXPECT_NEAR(mle_loss(p, {1, 2, 3, 4}).scalar(), 4.0 * std::log(7.0), 1e-12);
}

TEST(Mle, MatchesDirectResummation) {
  std::mt19937 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const auto P = random_distributions(rng, 5, 6);
    IdSeq target;
    double expected = 0.0;
    for (int s = 0; s < 5; ++s) {
      target.push_back(static_cast<TokenId>(rng() % 6));
      expected -= std::log(P(s, target.back()));
    }
    ad::Tape t(false);
    EXPECT_NEAR(mle_loss(t.constant(P), target).scalar(), expected, 1e-12);
  }
}

TEST(Mle, ZeroProbabilityTargetIsNumericError) {
  ad::Tape t(false);
  EXPECT_THROW(mle_loss(t.constant(row({1.0, 0.0})), {1}), NumericError);
}

TEST(Mle, LengthMismatchRejected) {
  ad::Tape t(false);
  EXPECT_THROW(mle_loss(t.constant(row({0.5, 0.5})), {0, 1}), ShapeError);
}

TEST(Unlikelihood, AlphaZeroEqualsMle) {
  std::mt19937 rng(2);
  ad::Tape t(false);
  auto p = t.constant(random_distributions(rng, 3, 8));
  const IdSeq target{5, 6, 7};
  EXPECT_EQ(ul_loss_baseline(p, target, {5, 7}, 0.0).loss.scalar(), mle_loss(p, target).scalar());
}

TEST(Unlikelihood, ZeroCandidateMassGivesZeroPenalty) {
  ad::Tape t(false);
  // Source holds only id 5, which never receives probability.
  ad::Matrix P = ad::Matrix::Zero(2, 7);
  P(0, 6) = 1.0;
  P(1, 6) = 1.0;
  auto r = ul_loss_baseline(t.constant(P), {6, 6}, {5}, 4.0);
  EXPECT_EQ(r.penalty.scalar(), 0.0);
}

// Two steps over V = 8 with ids 5..7 as words. Source {5}; target (6, 7).
// Step 0 candidates: {5}. Step 1: {5, 6}.
TEST(Unlikelihood, HandEvaluatedTwoStepCase) {
  ad::Matrix P = ad::Matrix::Zero(2, 8);
  P.row(0) << 0.05, 0.05, 0.05, 0.05, 0.05, 0.3, 0.4, 0.05;
  P.row(1) << 0.0, 0.0, 0.1, 0.0, 0.0, 0.2, 0.1, 0.6;
  const double mle = -std::log(0.4) - std::log(0.6);
  const double penalty = -std::log(1 - 0.3) - std::log(1 - 0.2) - std::log(1 - 0.1);
  ad::Tape t(false);
  auto r = ul_loss_baseline(t.constant(P), {6, 7}, {Vocabulary::kBos, 5, Vocabulary::kEos}, 4.0);
  EXPECT_NEAR(r.mle.scalar(), mle, 1e-12);
  EXPECT_NEAR(r.penalty.scalar(), penalty, 1e-12);
  EXPECT_NEAR(r.loss.scalar(), mle + 4.0 * penalty, 1e-12);
}

TEST(Unlikelihood, CandidatesExcludeTargetAndReservedIds) {
  const auto c = unlikelihood_candidates({6, 5, Vocabulary::kEos}, {Vocabulary::kBos, 5, Vocabulary::kSep, Vocabulary::kUnk});
  EXPECT_EQ(c[0], (std::set<TokenId>{Vocabulary::kUnk, 5}));
  EXPECT_EQ(c[1], (std::set<TokenId>{Vocabulary::kUnk, 6}));
  EXPECT_EQ(c[2], (std::set<TokenId>{Vocabulary::kUnk, 5, 6}));
}

TEST(SelectNegative, OnlyTargetInKnowledgeGivesNone) {
  const std::vector<double> p{0.2, 0.8};
  const std::vector<TokenId> k{1};
  EXPECT_FALSE(select_negative_token(p, k, 1).has_value());
}

TEST(SelectNegative, ArgmaxOverKnowledge) {
  std::vector<double> p(10, 0.05);
  p[3] = 0.1;
  p[7] = 0.3;
  p[9] = 0.4;  // not knowledge
  const std::vector<TokenId> k{3, 7};
  EXPECT_EQ(select_negative_token(p, k, 1), 7);
}

TEST(SelectNegative, TieGoesToSmallerId) {
  std::vector<double> p(10, 0.1);
  const std::vector<TokenId> k{7, 3};
  EXPECT_EQ(select_negative_token(p, k, 1), 3);
}

TEST(SelectNegative, SamplingRulesStayInEligibleSet) {
  std::vector<double> p(10, 0.1);
  const std::vector<TokenId> k{2, 4, 6};
  macl::detail::Rng rng(3);
  for (auto rule : {CandidateRule::kSampleByProb, CandidateRule::kRandomKnowledge})
    for (int i = 0; i < 100; ++i) {
      const auto c = select_negative_token(p, k, 4, rule, &rng);
      ASSERT_TRUE(c.has_value());
      EXPECT_TRUE(*c == 2 || *c == 6);
    }
  EXPECT_THROW(select_negative_token(p, k, 4, CandidateRule::kRandomKnowledge, nullptr), ParameterError);
}

TEST(Beta, EndpointsAndMidpoint) {
  EXPECT_NEAR(beta_weight(0.0), 0.0, 1e-12);
  EXPECT_NEAR(beta_weight(0.5), 1.0, 1e-12);
  EXPECT_NEAR(beta_weight(1.0), 2.0, 1e-12);
  EXPECT_NEAR(beta_weight(0.25), 1.0 - std::sqrt(0.5), 1e-12);
}

TEST(Beta, NonDecreasingOnGrid) {
  double prev = beta_weight(0.0);
  for (int i = 1; i <= 10000; ++i) {
    const double b = beta_weight(i / 10000.0);
    ASSERT_GE(b, prev) << i;
    prev = b;
  }
}

TEST(Beta, OutOfRangeRejected) {
  EXPECT_THROW(beta_weight(-0.01), ParameterError);
  EXPECT_THROW(beta_weight(1.01), ParameterError);
  EXPECT_THROW(beta_weight(std::nan("")), ParameterError);
}

TEST(TokenLoss, SingleStepFixture) {
  ad::Tape t(false);
  const std::vector<TokenId> k{1};
  auto r = token_contrastive_loss(t.constant(row({0.5, 0.25, 0.25})), {0}, k, TokenLossConfig{});
  const double expected = -std::log(0.5) + 4.0 * (std::cos(0.75 * std::numbers::pi) + 1.0) * -std::log(0.75);
  EXPECT_NEAR(r.loss.scalar(), expected, 1e-12);
  EXPECT_NEAR(r.loss.scalar(), 1.0302, 5e-5);
  ASSERT_EQ(r.candidates.size(), 1u);
  EXPECT_EQ(r.candidates[0].token, 1);
  EXPECT_EQ(r.candidates[0].p_c, 0.25);
}

TEST(TokenLoss, AlphaZeroEqualsMle) {
  std::mt19937 rng(4);
  ad::Tape t(false);
  auto p = t.constant(random_distributions(rng, 4, 9));
  const std::vector<TokenId> k{5, 6, 7};
  TokenLossConfig cfg;
  cfg.alpha = 0.0;
  EXPECT_EQ(token_contrastive_loss(p, {5, 6, 7, 8}, k, cfg).loss.scalar(), mle_loss(p, {5, 6, 7, 8}).scalar());
}

TEST(TokenLoss, VanishingCandidateProbabilityVanishesPenalty) {
  ad::Tape t(false);
  const std::vector<TokenId> k{1};
  auto r = token_contrastive_loss(t.constant(row({1.0 - 1e-9, 1e-9, 0.0})), {0}, k, TokenLossConfig{});
  EXPECT_LT(r.candidates[0].beta, 1e-15);
  EXPECT_LT(r.penalty.scalar(), 1e-20);
}

TEST(TokenLoss, StepsWithoutCandidateAreSkipped) {
  ad::Tape t(false);
  const std::vector<TokenId> k{5};
  ad::Matrix P = ad::Matrix::Constant(2, 6, 1.0 / 6.0);
  auto r = token_contrastive_loss(t.constant(P), {5, 1}, k, TokenLossConfig{});
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_FALSE(r.candidates[0].token.has_value());
  EXPECT_EQ(r.candidates[1].token, 5);
}

TEST(TokenLoss, SaturatedCandidateIsClamped) {
  ad::Tape t(false);
  const std::vector<TokenId> k{1};
  ad::Matrix P = row({1e-300, 1.0, 0.0});
  auto r = token_contrastive_loss(t.constant(P), {0}, k, TokenLossConfig{});
  EXPECT_TRUE(std::isfinite(r.loss.scalar()));
  EXPECT_NEAR(r.penalty.scalar(), 2.0 * -std::log(1e-7), 1e-6);
}

TEST(AnalyticGradient, Fixtures) {
  EXPECT_NEAR(analytic_gradient_gt_logit(0.3, 0.2, 0.0), 0.7, 1e-15);
  const double b = std::cos(0.75 * std::numbers::pi) + 1.0;
  EXPECT_NEAR(analytic_gradient_gt_logit(0.5, 0.25, 4.0), 1.0 - 0.5 * (1.0 - 4.0 * b / 3.0), 1e-12);
  EXPECT_NEAR(analytic_gradient_gt_logit(0.5, 0.25, 4.0), 0.6953, 5e-5);
  EXPECT_THROW(analytic_gradient_gt_logit(0.5, 1.0, 4.0), ParameterError);
}

TEST(AnalyticGradient, UnweightedVariantExceedsOneWhenCandidateAboveThreshold) {
  // Evaluated directly: alpha 4, p_i 0.9, p_c 0.09 stays below 1.
  EXPECT_NEAR(analytic_gradient_gt_logit_unweighted(0.9, 0.09, 4.0), 1.0 - 0.9 * (1.0 - 0.36 / 0.91), 1e-12);
  EXPECT_LT(analytic_gradient_gt_logit_unweighted(0.9, 0.09, 4.0), 1.0);
  EXPECT_NEAR(analytic_gradient_gt_logit_unweighted(0.5, 0.25, 4.0), 1.0 + 1.0 / 6.0, 1e-12);
}

TEST(AnalyticGradient, MatchesFiniteDifferenceFixture) {
  // Logits giving p = (0.5, 0.25, 0.25).
  ad::Matrix z = row({std::log(2.0), 0.0, 0.0});
  auto loss_at = [](const ad::Matrix& logits) {
    ad::Matrix e = logits.array().exp();
    e /= e.sum();
    const double b = std::cos((1.0 - 0.25) * std::numbers::pi) + 1.0;  // detached at the base point
    return -std::log(e(0, 0)) - 4.0 * b * std::log(1.0 - e(0, 1));
  };
  const double h = 1e-6;
  ad::Matrix up = z, down = z;
  up(0, 0) += h;
  down(0, 0) -= h;
  const double fd = (loss_at(up) - loss_at(down)) / (2 * h);
  EXPECT_NEAR(-fd, analytic_gradient_gt_logit(0.5, 0.25, 4.0), 1e-7);
  EXPECT_NEAR(autodiff_gt_logit_gradient(z, 0, 1, 4.0), fd, 1e-9);
}

TEST(AnalyticGradient, AutodiffAgreesOnRandomSoftmaxes) {
  std::mt19937 rng(17);
  std::uniform_int_distribution<int> width(3, 8);
  std::normal_distribution<double> logit(0.0, 1.5);
  for (int trial = 0; trial < 1000; ++trial) {
    const int v = width(rng);
    ad::Matrix z(1, v);
    for (int i = 0; i < v; ++i) z(0, i) = logit(rng);
    const TokenId target = static_cast<TokenId>(rng() % static_cast<unsigned>(v));
    TokenId k = static_cast<TokenId>(rng() % static_cast<unsigned>(v - 1));
    if (k >= target) ++k;
    ad::Matrix p = z.array().exp();
    p /= p.sum();
    const double expected = -analytic_gradient_gt_logit(p(0, target), p(0, k), 4.0);
    ASSERT_NEAR(autodiff_gt_logit_gradient(z, target, k, 4.0), expected, 1e-4) << trial;
  }
}

TEST(AnalyticGradient, ReweightingKeepsGradientBelowUnweighted) {
  for (int i = 1; i < 1000; ++i) {
    const double p_i = i / 1000.0;
    const double p_c = (1.0 - p_i) / 2.0;
    if (p_c <= 0.2) {
      EXPECT_LT(analytic_gradient_gt_logit(p_i, p_c, 4.0), 1.0) << p_i;
    }
    EXPECT_LE(analytic_gradient_gt_logit(p_i, p_c, 4.0), analytic_gradient_gt_logit_unweighted(p_i, p_c, 4.0));
    // Unweighted exceeds 1 exactly when p_c > 1/(1+alpha).
    EXPECT_EQ(analytic_gradient_gt_logit_unweighted(p_i, p_c, 4.0) > 1.0, 4.0 * p_c / (1.0 - p_c) > 1.0) << p_i;
  }
}

namespace {
ad::Var vec(ad::Tape& t, std::initializer_list<double> xs) { return t.constant(row(xs)); }
}  // namespace

TEST(InfoNce, NoNegativesIsZero) {
  ad::Tape t(false);
  EXPECT_NEAR(infonce_seq_loss(vec(t, {1, 2}), vec(t, {2, 1}), {}, {}, SeqLossConfig{}).scalar(), 0.0, 1e-12);
}

TEST(InfoNce, EqualBatchNegativeGivesLogTwo) {
  ad::Tape t(false);
  auto x = vec(t, {1, 2, 3});
  auto y = vec(t, {3, 1, 2});
  for (double mu : {0.0, 2.0, 7.0}) {
    SeqLossConfig cfg{1.0, mu};
    EXPECT_NEAR(infonce_seq_loss(x, y, {vec(t, {6, 2, 4})}, {}, cfg).scalar(), std::log(2.0), 1e-9);
  }
}

TEST(InfoNce, EqualHardNegativeGivesLogThree) {
  ad::Tape t(false);
  auto x = vec(t, {1, 2, 3});
  auto y = vec(t, {3, 1, 2});
  EXPECT_NEAR(infonce_seq_loss(x, y, {}, {y}, SeqLossConfig{1.0, 2.0}).scalar(), std::log(3.0), 1e-9);
}

TEST(InfoNce, MatchesScalarForm) {
  std::mt19937 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    ad::Tape t(false);
    auto rnd = [&] {
      ad::Matrix m(1, 6);
      for (int i = 0; i < 6; ++i) m(0, i) = n(rng);
      return t.constant(m);
    };
    auto x = rnd(), y = rnd();
    std::vector<ad::Var> b{rnd(), rnd()}, h{rnd(), rnd(), rnd()};
    std::vector<double> cb, ch;
    for (auto& v : b) cb.push_back(ad::cosine(x, v).scalar());
    for (auto& v : h) ch.push_back(ad::cosine(x, v).scalar());
    const double scalar = infonce_from_cosines(ad::cosine(x, y).scalar(), cb, ch, 2.0);
    const double loss = infonce_seq_loss(x, y, b, h, SeqLossConfig{1.0, 2.0}).scalar();
    EXPECT_NEAR(loss, scalar, 1e-12);
    EXPECT_GE(loss, 0.0);
  }
}

TEST(InfoNce, StrictlyMonotoneInNegativeCosinesAndMu) {
  const double h = 1e-4;
  const std::vector<double> b{0.1, -0.3}, hard{0.4, 0.2};
  const double base = infonce_from_cosines(0.5, b, hard, 2.0);
  for (std::size_t i = 0; i < b.size(); ++i) {
    auto bb = b;
    bb[i] += h;
    EXPECT_GT(infonce_from_cosines(0.5, bb, hard, 2.0), base);
  }
  for (std::size_t i = 0; i < hard.size(); ++i) {
    auto hh = hard;
    hh[i] += h;
    EXPECT_GT(infonce_from_cosines(0.5, b, hh, 2.0), base);
  }
  EXPECT_GT(infonce_from_cosines(0.5, b, hard, 2.0 + h), base);
}

TEST(InfoNce, ZeroNormIsNumericError) {
  ad::Tape t(false);
  EXPECT_THROW(infonce_seq_loss(vec(t, {0, 0}), vec(t, {1, 0}), {}, {}, SeqLossConfig{}), NumericError);
}

TEST(FinalLoss, CombinesLinearly) {
  EXPECT_EQ(final_loss(1.5, 9.0, 0.0), 1.5);
  EXPECT_EQ(final_loss(1.0, 1.0, 1.0), 2.0);
  EXPECT_DOUBLE_EQ(final_loss(1.2, 0.7, 1.0) - final_loss(1.2, 0.7, 0.5), 0.5 * 0.7);
  EXPECT_THROW(final_loss(std::nan(""), 1.0, 1.0), NumericError);
  ad::Tape t(false);
  EXPECT_DOUBLE_EQ(final_loss(t.scalar_constant(1.0), t.scalar_constant(3.0), 0.5).scalar(), 2.5);
}

TEST(Config, Validation) {
  TokenLossConfig tc;
  tc.epsilon = 0.0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc.epsilon = 1e-7;
  tc.alpha = -1.0;
  EXPECT_THROW(tc.validate(), ConfigError);
  SeqLossConfig sc;
  sc.mu = std::numeric_limits<double>::infinity();
  EXPECT_THROW(sc.validate(), ConfigError);
  EXPECT_EQ(candidate_rule_from_string("sample_by_prob"), CandidateRule::kSampleByProb);
  EXPECT_THROW(candidate_rule_from_string("nope"), ConfigError);
}
