#include <gtest/gtest.h>

#include <bitset>
#include <random>

#include "lcs_oracle.hpp"
#include "macl/metrics.hpp"

using namespace macl;
using namespace macl::metrics;

namespace {
TokenSeq T(std::initializer_list<const char*> xs) { return TokenSeq(xs.begin(), xs.end()); }
}  // namespace

TEST(Lcs, EmptySequence) {
  EXPECT_EQ(lcs_length(TokenSeq{}, T({"a", "b"})), 0u);
  EXPECT_EQ(lcs_length(T({"a"}), TokenSeq{}), 0u);
}

TEST(Lcs, Fixture) { EXPECT_EQ(lcs_length(T({"a", "b", "c", "d"}), T({"a", "x", "c", "d"})), 3u); }

TEST(Lcs, Identity) {
  const auto s = T({"q", "w", "q", "e", "r"});
  EXPECT_EQ(lcs_length(s, s), s.size());
}

TEST(Lcs, Symmetric) {
  std::mt19937 rng(3);
  for (int i = 0; i < 500; ++i) {
    auto a = lcs_oracle::random_seq(rng, 12), b = lcs_oracle::random_seq(rng, 12);
    EXPECT_EQ(lcs_length(a, b), lcs_length(b, a));
  }
}

// Every pair of sequences of length <= 7 over {0,1,2} against subsequence
// enumeration (10.7M pairs).
TEST(Lcs, ExhaustiveShortSequencesMatchEnumeration) {
  const auto table = lcs_oracle::SubsequenceTable(7);
  std::size_t mismatches = table.compare_all([](const std::vector<int>& a, const std::vector<int>& b) {
    return lcs_length(a, b);
  });
  EXPECT_EQ(mismatches, 0u);
  EXPECT_EQ(table.pairs_checked(), 3280u * 3280u);
}

TEST(Lcs, LongerRandomPairsMatchEnumeration) {
  std::mt19937 rng(11);
  for (int i = 0; i < 20000; ++i) {
    const auto a = lcs_oracle::random_ints(rng, 10), b = lcs_oracle::random_ints(rng, 10);
    ASSERT_EQ(lcs_length(a, b), lcs_oracle::brute_force(a, b));
  }
}

TEST(Plcs, Identity) { EXPECT_DOUBLE_EQ(plcs({T({"a", "b"}), T({"a", "b"})}), 1.0); }
TEST(Plcs, Fixture) { EXPECT_DOUBLE_EQ(plcs({T({"the", "cat", "sat"}), T({"the", "dog", "sat"})}), 2.0 / 3.0); }
TEST(Plcs, Disjoint) { EXPECT_EQ(plcs({T({"a", "b"}), T({"c", "d"})}), 0.0); }
TEST(Plcs, EmptyResponseUndefined) { EXPECT_THROW(plcs({T({"a"}), TokenSeq{}}), UndefinedMetricError); }

TEST(DupN, BigramShared) {
  const std::vector<KnowledgeResponsePair> p{{T({"a", "b", "c", "d"}), T({"x", "a", "b", "y"})}};
  EXPECT_EQ(dup_n(p, 2), 1.0);
  EXPECT_EQ(dup_n(p, 3), 0.0);
}

TEST(DupN, IdenticalPairs) {
  const auto k = T({"a", "b", "c", "d", "e"});
  const std::vector<KnowledgeResponsePair> p(4, {k, k});
  for (std::size_t n = 1; n <= k.size(); ++n) EXPECT_EQ(dup_n(p, n), 1.0);
}

TEST(DupN, ShortPairsContributeZeroAndEmptyUndefined) {
  const std::vector<KnowledgeResponsePair> p{{T({"a", "b"}), T({"a", "b"})}, {T({"a"}), T({"a"})}};
  EXPECT_EQ(dup_n(p, 2), 0.5);
  EXPECT_THROW(dup_n(std::vector<KnowledgeResponsePair>{}, 2), UndefinedMetricError);
}

TEST(KpN, Fixture) { EXPECT_DOUBLE_EQ(kp_n({T({"the", "cat", "sat"}), T({"the", "dog", "sat"})}, 1), 2.0 / 3.0); }
TEST(KpN, Identity) { EXPECT_EQ(kp_n({T({"a", "b", "c"}), T({"a", "b", "c"})}, 1), 1.0); }
TEST(KpN, Disjoint) { EXPECT_EQ(kp_n({T({"a", "b"}), T({"c", "d"})}, 1), 0.0); }
TEST(KpN, CountsRepeatsWithMultiplicity) { EXPECT_DOUBLE_EQ(kp_n({T({"a"}), T({"a", "a", "b"})}, 1), 2.0 / 3.0); }
TEST(KpN, ShortResponseUndefined) { EXPECT_THROW(kp_n({T({"a", "b"}), T({"a"})}, 2), UndefinedMetricError); }

TEST(MkpN, SinglePairEqualsKp) {
  const KnowledgeResponsePair p{T({"the", "cat", "sat"}), T({"the", "dog", "sat"})};
  EXPECT_DOUBLE_EQ(mkp_n(std::vector{p}, 1), kp_n(p, 1));
}

TEST(MkpN, MeanOfZeroAndOne) {
  const std::vector<KnowledgeResponsePair> p{{T({"a"}), T({"b"})}, {T({"a"}), T({"a"})}};
  EXPECT_EQ(mkp_n(p, 1), 0.5);
}

TEST(MkpN, NoEligiblePairUndefined) {
  EXPECT_THROW(mkp_n(std::vector<KnowledgeResponsePair>{{T({"a"}), T({"a"})}}, 2), UndefinedMetricError);
}

TEST(Pod, AllIdentical) {
  const std::vector<KnowledgeResponsePair> p(3, {T({"a", "b"}), T({"a", "b"})});
  EXPECT_EQ(pod(p), 1.0);
}

TEST(Pod, AllDisjoint) {
  const std::vector<KnowledgeResponsePair> p(3, {T({"a", "b"}), T({"c", "d"})});
  EXPECT_EQ(pod(p), 0.0);
}

TEST(Pod, StrictThreshold) {
  const std::vector<double> v{0.6, 0.71, 0.9};
  EXPECT_DOUBLE_EQ(pod_from_plcs(v), 2.0 / 3.0);
  const std::vector<double> at{0.7};
  EXPECT_EQ(pod_from_plcs(at), 0.0);
  EXPECT_THROW(pod(std::vector<KnowledgeResponsePair>{}), UndefinedMetricError);
}

TEST(KpHistogram, AllOnesInLastBin) {
  const std::vector<double> v(5, 1.0);
  const auto h = histogram_from_values(v, 1);
  ASSERT_EQ(h.masses.size(), 10u);
  EXPECT_EQ(h.masses.back(), 1.0);
}

TEST(KpHistogram, TwoExtremes) {
  const std::vector<double> v{0.05, 0.95};
  const auto h = histogram_from_values(v, 1);
  EXPECT_EQ(h.masses.front(), 0.5);
  EXPECT_EQ(h.masses.back(), 0.5);
}

TEST(KpHistogram, ExactTenthsOpenBins) {
  for (int j = 0; j < 10; ++j) {
    const std::vector<double> v{static_cast<double>(j) / 10.0};
    EXPECT_EQ(histogram_from_values(v, 1).masses[static_cast<std::size_t>(j)], 1.0) << j;
  }
}

TEST(KpHistogram, MassesSumToOne) {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(1 + t);
    for (auto& x : v) x = u(rng);
    double s = 0.0;
    for (double m : histogram_from_values(v, 1).masses) {
      EXPECT_GE(m, 0.0);
      s += m;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Kud, IdenticalIsZeroAndSymmetric) {
  const std::vector<double> a{0.1, 0.5, 0.9}, b{0.95, 0.95, 0.2};
  const auto ha = histogram_from_values(a, 1), hb = histogram_from_values(b, 1);
  EXPECT_EQ(kud(ha, ha), 0.0);
  EXPECT_EQ(kud(ha, hb), kud(hb, ha));
}

TEST(Kud, OppositeCorners) {
  const std::vector<double> a{0.0}, b{1.0};
  EXPECT_DOUBLE_EQ(kud(histogram_from_values(a, 1), histogram_from_values(b, 1)), 20.0);
}

TEST(Kud, MismatchedBinsRejected) {
  const std::vector<double> a{0.0};
  auto h = histogram_from_values(a, 1);
  auto g = h;
  g.masses.pop_back();
  EXPECT_THROW(kud(h, g), ShapeError);
}

namespace {
Corpus small_corpus() {
  Corpus c;
  c.examples.push_back({"e1", {{"hi"}}, {T({"the", "cat", "sat"}), T({"x"})}, 0, T({"the", "dog", "sat"})});
  c.examples.push_back({"e2", {{"yo"}}, {T({"a", "b", "c", "d"})}, 0, T({"a", "b", "c", "d"})});
  c.examples.push_back({"e3", {{"so"}}, {T({"p", "q"})}, 0, T({"r", "s", "t"})});
  return c;
}

std::vector<GenerationRecord> as_generations(const Corpus& c, bool use_knowledge) {
  std::vector<GenerationRecord> g;
  for (auto it = c.examples.rbegin(); it != c.examples.rend(); ++it)
    g.push_back({it->example_id, use_knowledge ? it->gold_knowledge() : it->response, {"ref", {}}, 0.0, false});
  return g;
}
}  // namespace

TEST(BuildReport, ReferencesAgainstThemselves) {
  const auto c = small_corpus();
  const auto r = build_report(c, as_generations(c, false));
  EXPECT_EQ(r.kud, 0.0);
  EXPECT_EQ(r.generated.pod, r.reference.pod);
  EXPECT_DOUBLE_EQ(r.reference.pod, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.reference.mkp1, (2.0 / 3.0 + 1.0 + 0.0) / 3.0);
}

TEST(BuildReport, VerbatimKnowledge) {
  const auto c = small_corpus();
  const auto r = build_report(c, as_generations(c, true));
  EXPECT_EQ(r.generated.plcs_mean, 1.0);
  EXPECT_EQ(r.generated.pod, 1.0);
}

TEST(BuildReport, AlignmentErrors) {
  const auto c = small_corpus();
  auto g = as_generations(c, false);
  g.pop_back();
  EXPECT_THROW(build_report(c, g), AlignmentError);
  g = as_generations(c, false);
  g[0].example_id = "nope";
  EXPECT_THROW(build_report(c, g), AlignmentError);
}

TEST(BuildReport, EmptyGenerationScoresZero) {
  const auto c = small_corpus();
  auto g = as_generations(c, true);
  g[0].generated_response.clear();
  const auto r = build_report(c, g);
  EXPECT_DOUBLE_EQ(r.generated.pod, 2.0 / 3.0);
}

TEST(BuildReport, JsonSchemaFields) {
  const auto c = small_corpus();
  const auto j = to_json(build_report(c, as_generations(c, false)));
  for (const char* side : {"generated", "reference"})
    for (const char* k : {"dup_16", "dup_32", "plcs_mean", "mkp_1", "mkp_2", "pod", "kp1_histogram", "kp2_histogram"})
      EXPECT_TRUE(j.at(side).contains(k)) << side << "." << k;
  EXPECT_TRUE(j.contains("kud"));
  const auto csv = per_example_csv(build_report(c, as_generations(c, false)));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}
