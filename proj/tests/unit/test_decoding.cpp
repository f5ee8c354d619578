#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "macl/decoding.hpp"
#include "toy_model.hpp"

using namespace macl;
using namespace macl::decoding;

namespace {

std::vector<toy::Scored> sorted_enumeration(const toy::PrefixModel& m) {
  auto all = toy::enumerate(m);
  std::sort(all.begin(), all.end(), [](const toy::Scored& a, const toy::Scored& b) { return a.log_score > b.log_score; });
  return all;
}

}  // namespace

TEST(Beam, WidthOneEqualsGreedy) {
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    const auto m = toy::make(seed, {Vocabulary::kEos, 5, 6, 7}, 6);
    const auto beams = beam_search(m, 1);
    ASSERT_EQ(beams.size(), 1u);
    const auto g = greedy_search(m);
    EXPECT_EQ(beams[0].tokens, g.tokens) << seed;
    EXPECT_NEAR(beams[0].log_score, g.log_score, 1e-12);
    EXPECT_EQ(beams[0].reached_eos, g.reached_eos);

    DecodeConfig b1;
    b1.beam_size = 1;
    DecodeConfig gr;
    gr.strategy = Strategy::kGreedy;
    EXPECT_EQ(decode(m, b1).best.tokens, decode(m, gr).best.tokens);
  }
}

// A beam wide enough to hold every prefix is exhaustive search.
TEST(Beam, WideBeamMatchesExhaustiveEnumeration) {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const auto m = toy::make(seed);
    const auto all = sorted_enumeration(m);
    const auto beams = beam_search(m, all.size());
    ASSERT_EQ(beams.size(), all.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
      EXPECT_EQ(beams[i].tokens, all[i].tokens) << seed << " rank " << i;
      EXPECT_NEAR(beams[i].log_score, all[i].log_score, 1e-12);
      EXPECT_EQ(beams[i].reached_eos, all[i].reached_eos);
    }
  }
}

// Three tokens (EOS and two words), lengths up to 3.
TEST(Beam, BeamThreeOnThreeTokenToyMatchesExhaustive) {
  auto m = toy::make(7, {Vocabulary::kEos, 5, 6}, 3);
  m.markov = true;
  const auto all = sorted_enumeration(m);
  const auto best_complete = std::find_if(all.begin(), all.end(), [](const toy::Scored& s) { return s.reached_eos; });
  ASSERT_NE(best_complete, all.end());
  DecodeConfig cfg;
  cfg.beam_size = 3;
  const auto r = decode(m, cfg);
  EXPECT_EQ(r.best.tokens, best_complete->tokens);
  EXPECT_NEAR(r.best.log_score, best_complete->log_score, 1e-12);
  EXPECT_FALSE(r.truncated);
}

TEST(Beam, ScoresAreSortedAndTrueLogProbabilities) {
  const auto m = toy::make(3, {Vocabulary::kEos, 5, 6, 7}, 5);
  const auto beams = beam_search(m, 4);
  for (std::size_t i = 1; i < beams.size(); ++i) EXPECT_GE(beams[i - 1].log_score, beams[i].log_score);
  for (const auto& h : beams) {
    IdSeq s;
    double lp = std::log(m.step(s, Vocabulary::kBos)[static_cast<std::size_t>(h.tokens[0])]);
    for (std::size_t i = 1; i < h.tokens.size(); ++i) lp += std::log(m.step(s, h.tokens[i - 1])[static_cast<std::size_t>(h.tokens[i])]);
    EXPECT_NEAR(lp, h.log_score, 1e-12);
  }
}

TEST(Beam, ExhaustiveWidthNeverBelowGreedy) {
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    const auto m = toy::make(seed, {Vocabulary::kEos, 5, 6, 7, 8}, 5);
    const auto all = toy::enumerate(m);
    EXPECT_GE(beam_search(m, all.size()).front().log_score + 1e-12, greedy_search(m).log_score) << seed;
  }
}

// Narrow beams can prune the greedy prefix: here greedy opens with 6, every
// beam-3 survivor opens with 8, and greedy ends up with the better score.
TEST(Beam, NarrowBeamCanFallBelowGreedy) {
  const auto m = toy::make(7, {Vocabulary::kEos, 5, 6, 7, 8}, 5);
  const auto g = greedy_search(m);
  const auto beams = beam_search(m, 3);
  ASSERT_EQ(g.tokens.front(), 6);
  for (const auto& h : beams) EXPECT_EQ(h.tokens.front(), 8);
  EXPECT_LT(beams.front().log_score, g.log_score);
}

TEST(Beam, NoEosWithinLimitIsTruncated) {
  auto m = toy::make(2, {5, 6}, 3);
  DecodeConfig cfg;
  cfg.beam_size = 2;
  const auto r = decode(m, cfg);
  EXPECT_TRUE(r.truncated);
  EXPECT_EQ(r.best.tokens.size(), 3u);
  EXPECT_EQ(r.best.log_score, beam_search(m, 2).front().log_score);
}

TEST(Beam, MaxLenOverrideCapsLength) {
  const auto m = toy::make(4, {Vocabulary::kEos, 5, 6}, 10);
  for (const auto& h : beam_search(m, 3, 2)) EXPECT_LE(h.tokens.size(), 2u);
  EXPECT_LE(greedy_search(m, 2).tokens.size(), 2u);
}

TEST(Nucleus, FullMassEqualsAncestral) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto m = toy::make(seed + 11, {Vocabulary::kEos, 5, 6, 7}, 6);
    const auto a = ancestral_sample(m, seed);
    const auto n = nucleus_sample(m, 1.0, seed);
    EXPECT_EQ(a, n) << seed;
  }
}

TEST(Nucleus, NeverLeavesTopPSet) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto m = toy::make(seed + 3, {Vocabulary::kEos, 5, 6, 7, 8, 9}, 6);
    const auto h = nucleus_sample(m, 0.5, seed);
    IdSeq s;
    auto next = m.step(s, Vocabulary::kBos);
    for (TokenId tok : h.tokens) {
      // Independent check: sorted descending, mass before tok must be < p.
      double before = 0.0;
      for (double q : next)
        if (q > next[static_cast<std::size_t>(tok)]) before += q;
      EXPECT_LT(before, 0.5);
      next = m.step(s, tok);
    }
  }
}

TEST(Nucleus, SupportIsSmallestPrefixReachingP) {
  const std::vector<double> p{0.0, 0.1, 0.4, 0.2, 0.3};
  EXPECT_EQ(nucleus_support(p, 0.4), (std::vector<TokenId>{2}));
  EXPECT_EQ(nucleus_support(p, 0.6), (std::vector<TokenId>{2, 4}));
  EXPECT_EQ(nucleus_support(p, 0.75), (std::vector<TokenId>{2, 3, 4}));
  EXPECT_EQ(nucleus_support(p, 1.0), (std::vector<TokenId>{1, 2, 3, 4}));
}

TEST(Nucleus, SeededDeterminism) {
  const auto m = toy::make(5, {Vocabulary::kEos, 5, 6, 7, 8}, 8);
  DecodeConfig cfg;
  cfg.strategy = Strategy::kNucleus;
  cfg.seed = 42;
  EXPECT_EQ(decode(m, cfg, 3).best, decode(m, cfg, 3).best);
  std::set<IdSeq> seen;
  for (std::uint64_t stream = 0; stream < 20; ++stream) seen.insert(decode(m, cfg, stream).best.tokens);
  EXPECT_GT(seen.size(), 1u);
}

TEST(DecodeConfig, ValidationNamesAndParsing) {
  DecodeConfig c;
  c.beam_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.beam_size = 3;
  c.nucleus_p = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.nucleus_p = 0.9;
  EXPECT_EQ(c.name(), "beam-3");
  c.strategy = Strategy::kNucleus;
  EXPECT_EQ(c.name(), "nucleus-0.9");
  EXPECT_EQ(strategy_from_string("greedy"), Strategy::kGreedy);
  EXPECT_THROW(strategy_from_string("topk"), ConfigError);
}

TEST(DecodeCorpus, RealModelRecords) {
  const auto corpus = generate_synthetic(SynthConfig{2, 4, 80, 0.5});
  const auto vocab = build_vocabulary(corpus);
  model::ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.embedding_dim = 8;
  mc.hidden_dim = 8;
  mc.attention_heads = 2;
  mc.encoder_layers = 1;
  mc.decoder_layers = 1;
  mc.max_target_len = 6;
  const model::Seq2SeqModel m(mc);
  DecodeConfig cfg;
  const auto recs = decode_corpus(m, vocab, corpus, cfg);
  ASSERT_EQ(recs.size(), corpus.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(recs[i].example_id, corpus.examples[i].example_id);
    EXPECT_LE(recs[i].generated_response.size(), 6u);
    EXPECT_EQ(recs[i].decode_config.name, "beam-3");
  }
  EXPECT_EQ(decode_corpus(m, vocab, corpus, cfg)[0].generated_response, recs[0].generated_response);
}
