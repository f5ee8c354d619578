#pragma once

// Training objectives over the autodiff tape: MLE, the unlikelihood
// baseline, the token-level contrastive loss with knowledge-token negatives
// and cosine reweighting, the sequence-level InfoNCE loss with weighted hard
// negatives, and closed-form ground-truth-logit gradients used to verify them.

#include <cmath>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "macl/autodiff.hpp"
#include "macl/corpus.hpp"
#include "macl/error.hpp"

namespace macl::losses {

enum class CandidateRule { kArgmaxKnowledge, kSampleByProb, kRandomKnowledge };

inline std::string to_string(CandidateRule r) {
  switch (r) {
    case CandidateRule::kArgmaxKnowledge: return "argmax_knowledge";
    case CandidateRule::kSampleByProb: return "sample_by_prob";
    case CandidateRule::kRandomKnowledge: return "random_knowledge";
  }
  return "argmax_knowledge";
}

inline CandidateRule candidate_rule_from_string(const std::string& s) {
  if (s == "argmax_knowledge") return CandidateRule::kArgmaxKnowledge;
  if (s == "sample_by_prob") return CandidateRule::kSampleByProb;
  if (s == "random_knowledge") return CandidateRule::kRandomKnowledge;
  throw ConfigError("unknown candidate_rule: " + s);
}

struct TokenLossConfig {
  double alpha = 4.0;
  CandidateRule candidate_rule = CandidateRule::kArgmaxKnowledge;
  double epsilon = 1e-7;

  void validate() const {
    if (!std::isfinite(alpha) || alpha < 0.0) throw ConfigError("alpha must be finite and >= 0");
    if (!(epsilon > 0.0 && epsilon < 1e-3)) throw ConfigError("epsilon must lie in (0, 1e-3)");
  }
};

struct SeqLossConfig {
  double lambda = 1.0;
  double mu = 2.0;

  void validate() const {
    if (!std::isfinite(lambda) || lambda < 0.0) throw ConfigError("lambda must be finite and >= 0");
    if (!std::isfinite(mu) || mu < 0.0) throw ConfigError("mu must be finite and >= 0");
  }
};

struct NegativeCandidate {
  std::optional<TokenId> token;
  double p_c = 0.0;   // detached
  double beta = 0.0;  // beta_weight(p_c)
};

using NegativeCandidateSet = std::vector<NegativeCandidate>;

// cos((1 - p_c) * pi) + 1
inline double beta_weight(double p_c) {
  if (!(p_c >= 0.0 && p_c <= 1.0)) throw ParameterError("beta_weight: probability outside [0,1]");
  return std::cos((1.0 - p_c) * std::numbers::pi) + 1.0;
}

namespace detail {
inline void check_target(const ad::Var& probs, const IdSeq& target) {
  if (static_cast<std::size_t>(probs.rows()) != target.size())
    throw ShapeError("target length " + std::to_string(target.size()) + " != distribution rows " +
                     std::to_string(probs.rows()));
  for (TokenId t : target)
    if (t < 0 || t >= probs.cols()) throw VocabularyError("target id outside distribution support");
}

// -sum log(1 - min(p, 1 - eps)) over the picked entries, each weighted.
inline ad::Var unlikelihood_sum(ad::Var probs, std::vector<std::pair<Eigen::Index, Eigen::Index>> entries,
                                const ad::Matrix& weights, double epsilon) {
  auto picked = ad::pick(probs, std::move(entries));
  auto terms = ad::log(ad::one_minus(ad::clamp_max(picked, 1.0 - epsilon)));
  return ad::scale(ad::sum(ad::mul_const(terms, weights)), -1.0);
}
}  // namespace detail

// sum_t -log p(y_t)
inline ad::Var mle_loss(ad::Var probs, const IdSeq& target) {
  detail::check_target(probs, target);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> entries;
  entries.reserve(target.size());
  for (std::size_t t = 0; t < target.size(); ++t) entries.emplace_back(static_cast<Eigen::Index>(t), target[t]);
  auto picked = ad::pick(probs, std::move(entries));
  for (Eigen::Index i = 0; i < picked.rows(); ++i)
    if (!(picked.value()(i, 0) > 0.0)) throw NumericError("target token has zero probability at step " + std::to_string(i));
  return ad::scale(ad::sum(ad::log(picked)), -1.0);
}

// Candidates at step t: every non-reserved id of the source and of y_<t,
// minus y_t.
inline std::vector<std::set<TokenId>> unlikelihood_candidates(const IdSeq& target, const IdSeq& source) {
  std::set<TokenId> base;
  for (TokenId s : source)
    if (s >= Vocabulary::kNumReserved || s == Vocabulary::kUnk) base.insert(s);
  std::vector<std::set<TokenId>> out;
  out.reserve(target.size());
  std::set<TokenId> running = base;
  for (TokenId y : target) {
    auto c = running;
    c.erase(y);
    out.push_back(std::move(c));
    if (y >= Vocabulary::kNumReserved || y == Vocabulary::kUnk) running.insert(y);
  }
  return out;
}

struct UnlikelihoodResult {
  ad::Var loss;     // mle + alpha * penalty
  ad::Var mle;
  ad::Var penalty;  // unweighted sum of -log(1 - p)
};

inline UnlikelihoodResult ul_loss_baseline(ad::Var probs, const IdSeq& target, const IdSeq& source, double alpha,
                                           double epsilon = 1e-7) {
  if (!std::isfinite(alpha) || alpha < 0.0) throw ParameterError("alpha must be finite and >= 0");
  UnlikelihoodResult r;
  r.mle = mle_loss(probs, target);
  ad::Tape& tape = *probs.tape();
  const auto cands = unlikelihood_candidates(target, source);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> entries;
  for (std::size_t t = 0; t < cands.size(); ++t)
    for (TokenId c : cands[t]) {
      if (c >= probs.cols()) throw VocabularyError("candidate id outside distribution support");
      entries.emplace_back(static_cast<Eigen::Index>(t), c);
    }
  if (entries.empty()) {
    r.penalty = tape.scalar_constant(0.0);
    r.loss = r.mle;
    return r;
  }
  const auto n = static_cast<Eigen::Index>(entries.size());
  r.penalty = detail::unlikelihood_sum(probs, std::move(entries), ad::Matrix::Ones(n, 1), epsilon);
  r.loss = alpha == 0.0 ? r.mle : ad::add(r.mle, ad::scale(r.penalty, alpha));
  return r;
}

// The knowledge id other than the target with the highest probability;
// ties go to the smaller id. Other rules draw from the same eligible set.
inline std::optional<TokenId> select_negative_token(std::span<const double> prob_row,
                                                    std::span<const TokenId> knowledge_ids, TokenId target_id,
                                                    CandidateRule rule = CandidateRule::kArgmaxKnowledge,
                                                    macl::detail::Rng* rng = nullptr) {
  std::vector<TokenId> eligible;
  for (TokenId k : knowledge_ids) {
    if (k == target_id) continue;
    if (k < 0 || static_cast<std::size_t>(k) >= prob_row.size()) throw VocabularyError("knowledge id outside support");
    eligible.push_back(k);
  }
  std::sort(eligible.begin(), eligible.end());
  eligible.erase(std::unique(eligible.begin(), eligible.end()), eligible.end());
  if (eligible.empty()) return std::nullopt;
  switch (rule) {
    case CandidateRule::kArgmaxKnowledge: {
      TokenId best = eligible.front();
      for (TokenId k : eligible)
        if (prob_row[static_cast<std::size_t>(k)] > prob_row[static_cast<std::size_t>(best)]) best = k;
      return best;
    }
    case CandidateRule::kSampleByProb: {
      if (!rng) throw ParameterError("sample_by_prob needs a random source");
      double total = 0.0;
      for (TokenId k : eligible) total += prob_row[static_cast<std::size_t>(k)];
      if (!(total > 0.0)) return eligible[rng->uniform(0, eligible.size() - 1)];
      double u = rng->unit() * total;
      for (TokenId k : eligible) {
        u -= prob_row[static_cast<std::size_t>(k)];
        if (u < 0.0) return k;
      }
      return eligible.back();
    }
    case CandidateRule::kRandomKnowledge: {
      if (!rng) throw ParameterError("random_knowledge needs a random source");
      return eligible[rng->uniform(0, eligible.size() - 1)];
    }
  }
  return std::nullopt;
}

struct TokenLossResult {
  ad::Var loss;     // mle + alpha * penalty
  ad::Var mle;
  ad::Var penalty;  // sum_t beta_t * -log(1 - p_c,t), before alpha
  NegativeCandidateSet candidates;
  std::size_t skipped = 0;  // steps with no eligible knowledge token
};

inline TokenLossResult token_contrastive_loss(ad::Var probs, const IdSeq& target, std::span<const TokenId> knowledge_ids,
                                              const TokenLossConfig& cfg, macl::detail::Rng* rng = nullptr) {
  cfg.validate();
  TokenLossResult r;
  r.mle = mle_loss(probs, target);
  const ad::Matrix& P = probs.value();
  std::vector<std::pair<Eigen::Index, Eigen::Index>> entries;
  std::vector<double> betas;
  r.candidates.reserve(target.size());
  for (std::size_t t = 0; t < target.size(); ++t) {
    const auto row = static_cast<Eigen::Index>(t);
    std::span<const double> prow(P.data() + row * P.cols(), static_cast<std::size_t>(P.cols()));
    NegativeCandidate c;
    c.token = select_negative_token(prow, knowledge_ids, target[t], cfg.candidate_rule, rng);
    if (c.token) {
      c.p_c = prow[static_cast<std::size_t>(*c.token)];
      c.beta = beta_weight(c.p_c);
      entries.emplace_back(row, *c.token);
      betas.push_back(c.beta);
    } else {
      ++r.skipped;
    }
    r.candidates.push_back(c);
  }
  if (entries.empty()) {
    r.penalty = probs.tape()->scalar_constant(0.0);
    r.loss = r.mle;
    return r;
  }
  ad::Matrix w(static_cast<Eigen::Index>(betas.size()), 1);
  for (std::size_t i = 0; i < betas.size(); ++i) w(static_cast<Eigen::Index>(i), 0) = betas[i];
  r.penalty = detail::unlikelihood_sum(probs, std::move(entries), w, cfg.epsilon);
  r.loss = cfg.alpha == 0.0 ? r.mle : ad::add(r.mle, ad::scale(r.penalty, cfg.alpha));
  return r;
}

// Magnitude of the descent gradient on the ground-truth logit under the
// token loss with one candidate: 1 - p_i (1 - alpha * beta(p_c) * p_c / (1 - p_c)).
// The loss gradient itself is the negative of this value.
inline double analytic_gradient_gt_logit(double p_i, double p_c, double alpha) {
  if (p_c == 1.0) throw ParameterError("analytic gradient is singular at p_c = 1");
  if (!(p_i > 0.0 && p_i < 1.0) || !(p_c >= 0.0 && p_c < 1.0)) throw ParameterError("probabilities outside (0,1)");
  return 1.0 - p_i * (1.0 - alpha * beta_weight(p_c) * p_c / (1.0 - p_c));
}

// Same with beta fixed at 1 (plain negative training).
inline double analytic_gradient_gt_logit_unweighted(double p_i, double p_c, double alpha) {
  if (p_c == 1.0) throw ParameterError("analytic gradient is singular at p_c = 1");
  if (!(p_i > 0.0 && p_i < 1.0) || !(p_c >= 0.0 && p_c < 1.0)) throw ParameterError("probabilities outside (0,1)");
  return 1.0 - p_i * (1.0 - alpha * p_c / (1.0 - p_c));
}

// -log( e^{c+} / (e^{c+} + sum_B e^{c_b} + mu * sum_H e^{c_h}) ), c = cosine
// with the source representation.
inline ad::Var infonce_seq_loss(ad::Var z_x, ad::Var z_positive, const std::vector<ad::Var>& batch_negatives,
                                const std::vector<ad::Var>& hard_negatives, const SeqLossConfig& cfg) {
  cfg.validate();
  ad::Tape& tape = *z_x.tape();
  std::vector<ad::Var> cosines;
  cosines.reserve(1 + batch_negatives.size() + hard_negatives.size());
  cosines.push_back(ad::cosine(z_x, z_positive));
  for (const auto& z : batch_negatives) cosines.push_back(ad::cosine(z_x, z));
  for (const auto& z : hard_negatives) cosines.push_back(ad::cosine(z_x, z));
  const auto n = static_cast<Eigen::Index>(cosines.size());
  ad::Matrix weights = ad::Matrix::Ones(n, 1);
  for (Eigen::Index i = 1 + static_cast<Eigen::Index>(batch_negatives.size()); i < n; ++i) weights(i, 0) = cfg.mu;
  auto stacked = ad::concat_rows(tape, cosines);
  auto denom = ad::sum(ad::mul_const(ad::exp(stacked), std::move(weights)));
  return ad::sub(ad::log(denom), cosines.front());
}

// Scalar form on plain cosines, for closed-form checks.
inline double infonce_from_cosines(double positive, std::span<const double> batch, std::span<const double> hard,
                                   double mu) {
  double denom = std::exp(positive);
  for (double c : batch) denom += std::exp(c);
  for (double c : hard) denom += mu * std::exp(c);
  return std::log(denom) - positive;
}

inline ad::Var final_loss(ad::Var token_loss, ad::Var seq_loss, double lambda) {
  if (lambda == 0.0) return token_loss;
  return ad::add(token_loss, ad::scale(seq_loss, lambda));
}

inline double final_loss(double token_loss, double seq_loss, double lambda) {
  if (!std::isfinite(token_loss) || !std::isfinite(seq_loss)) throw NumericError("non-finite loss component");
  return token_loss + lambda * seq_loss;
}

}  // namespace macl::losses
