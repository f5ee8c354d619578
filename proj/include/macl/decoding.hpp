#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "macl/corpus.hpp"
#include "macl/error.hpp"
#include "macl/model.hpp"

namespace macl::decoding {

// Anything that turns a decoder input token into the next-token distribution.
template <class M>
concept StepModel = requires(const M& m, typename M::State& s, TokenId t) {
  { m.initial_state() } -> std::same_as<typename M::State>;
  { m.step(s, t) } -> std::convertible_to<std::vector<double>>;
  { m.max_length() } -> std::convertible_to<std::size_t>;
};

// Seq2SeqModel bound to one encoded source.
class ModelDecoder {
 public:
  using State = model::DecoderState;

  ModelDecoder(const model::Seq2SeqModel& m, const model::SourceEncoding& enc) : model_(&m), enc_(&enc) {}
  State initial_state() const { return model_->start_state(); }
  std::vector<double> step(State& s, TokenId t) const {
    const auto row = model_->step(*enc_, s, t);
    return {row.data(), row.data() + row.size()};
  }
  std::size_t max_length() const { return model_->config().max_target_len; }

 private:
  const model::Seq2SeqModel* model_;
  const model::SourceEncoding* enc_;
};

struct Hypothesis {
  IdSeq tokens;  // generated ids, EOS included when reached
  double log_score = 0.0;
  bool reached_eos = false;

  bool operator==(const Hypothesis&) const = default;
};

enum class Strategy { kBeam, kGreedy, kNucleus };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kBeam: return "beam";
    case Strategy::kGreedy: return "greedy";
    case Strategy::kNucleus: return "nucleus";
  }
  return "beam";
}

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "beam") return Strategy::kBeam;
  if (s == "greedy") return Strategy::kGreedy;
  if (s == "nucleus") return Strategy::kNucleus;
  throw ConfigError("unknown decoding strategy: " + s);
}

struct DecodeConfig {
  Strategy strategy = Strategy::kBeam;
  std::size_t beam_size = 3;
  double nucleus_p = 0.9;
  std::size_t max_target_len = 0;  // 0: the model's limit
  std::uint64_t seed = 0;
  bool length_normalize = false;

  void validate() const {
    if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
    if (!(nucleus_p > 0.0 && nucleus_p <= 1.0)) throw ConfigError("nucleus_p must lie in (0,1]");
  }

  std::string name() const {
    switch (strategy) {
      case Strategy::kBeam: return "beam-" + std::to_string(beam_size);
      case Strategy::kGreedy: return "greedy";
      case Strategy::kNucleus: {
        char buf[32];
        std::snprintf(buf, sizeof buf, "nucleus-%g", nucleus_p);
        return buf;
      }
    }
    return "beam";
  }

  nlohmann::json params() const {
    nlohmann::json j{{"strategy", to_string(strategy)}};
    if (strategy == Strategy::kBeam) j["beam_size"] = beam_size;
    if (strategy == Strategy::kNucleus) {
      j["nucleus_p"] = nucleus_p;
      j["seed"] = seed;
    }
    if (max_target_len) j["max_target_len"] = max_target_len;
    if (length_normalize) j["length_normalize"] = true;
    return j;
  }
};

namespace detail {

inline double safe_log(double p) { return p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity(); }

struct Candidate {
  double score;
  std::size_t parent;
  TokenId token;
};

// Higher score first; ties by parent, then token id.
inline bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.parent != b.parent) return a.parent < b.parent;
  return a.token < b.token;
}

inline double rank_key(const Hypothesis& h, bool length_normalize) {
  if (!length_normalize || h.tokens.empty()) return h.log_score;
  return h.log_score / static_cast<double>(h.tokens.size());
}

inline void sort_hypotheses(std::vector<Hypothesis>& hs, bool length_normalize) {
  std::stable_sort(hs.begin(), hs.end(), [&](const Hypothesis& a, const Hypothesis& b) {
    return rank_key(a, length_normalize) > rank_key(b, length_normalize);
  });
}

inline std::size_t effective_max(std::size_t model_max, std::size_t requested) {
  return requested == 0 ? model_max : std::min(model_max, requested);
}

}  // namespace detail

// Standard beam search without length normalisation. Returns up to
// beam_size hypotheses, best first. Hypotheses that hit the length limit
// are returned with reached_eos = false.
template <StepModel M>
std::vector<Hypothesis> beam_search(const M& model, std::size_t beam_size, std::size_t max_len = 0) {
  if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
  max_len = detail::effective_max(model.max_length(), max_len);
  struct Live {
    IdSeq tokens;
    typename M::State state;
    double score;
    std::vector<double> next;
  };
  std::vector<Live> live;
  {
    auto s = model.initial_state();
    auto next = model.step(s, Vocabulary::kBos);
    live.push_back({{}, std::move(s), 0.0, std::move(next)});
  }
  std::vector<Hypothesis> finished;
  for (std::size_t t = 0; t < max_len && !live.empty(); ++t) {
    std::vector<detail::Candidate> cands;
    for (std::size_t i = 0; i < live.size(); ++i)
      for (std::size_t v = 0; v < live[i].next.size(); ++v)
        if (live[i].next[v] > 0.0) cands.push_back({live[i].score + std::log(live[i].next[v]), i, static_cast<TokenId>(v)});
    const std::size_t keep = std::min(cands.size(), 2 * beam_size);
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), detail::better);
    std::vector<detail::Candidate> next_live;
    for (std::size_t r = 0; r < keep && next_live.size() < beam_size; ++r) {
      const auto& c = cands[r];
      if (c.token == Vocabulary::kEos) {
        if (r < beam_size) {
          Hypothesis h{live[c.parent].tokens, c.score, true};
          h.tokens.push_back(Vocabulary::kEos);
          finished.push_back(std::move(h));
        }
      } else {
        next_live.push_back(c);
      }
    }
    detail::sort_hypotheses(finished, false);
    if (finished.size() > beam_size) finished.resize(beam_size);
    const bool saturated = finished.size() >= beam_size &&
                           (next_live.empty() || next_live.front().score <= finished.back().log_score);
    if (saturated) {
      live.clear();
      break;
    }
    std::vector<Live> grown;
    grown.reserve(next_live.size());
    for (const auto& c : next_live) {
      Live l{live[c.parent].tokens, live[c.parent].state, c.score, {}};
      l.tokens.push_back(c.token);
      if (t + 1 < max_len) l.next = model.step(l.state, c.token);
      grown.push_back(std::move(l));
    }
    if (t + 1 == max_len) {
      for (auto& l : grown) finished.push_back({std::move(l.tokens), l.score, false});
      grown.clear();
    }
    live = std::move(grown);
  }
  detail::sort_hypotheses(finished, false);
  if (finished.size() > beam_size) finished.resize(beam_size);
  return finished;
}

// Argmax at every step, ties to the smaller id.
template <StepModel M>
Hypothesis greedy_search(const M& model, std::size_t max_len = 0) {
  max_len = detail::effective_max(model.max_length(), max_len);
  auto s = model.initial_state();
  auto next = model.step(s, Vocabulary::kBos);
  Hypothesis h;
  for (std::size_t t = 0; t < max_len; ++t) {
    const auto best = static_cast<TokenId>(std::max_element(next.begin(), next.end()) - next.begin());
    h.log_score += detail::safe_log(next[static_cast<std::size_t>(best)]);
    h.tokens.push_back(best);
    if (best == Vocabulary::kEos) {
      h.reached_eos = true;
      break;
    }
    if (t + 1 < max_len) next = model.step(s, best);
  }
  return h;
}

// Tokens kept by nucleus filtering: the smallest set of most probable ids
// whose mass reaches p (ties by id), returned in ascending id order.
inline std::vector<TokenId> nucleus_support(const std::vector<double>& probs, double p) {
  std::vector<TokenId> order;
  for (std::size_t v = 0; v < probs.size(); ++v)
    if (probs[v] > 0.0) order.push_back(static_cast<TokenId>(v));
  if (p < 1.0) {
    std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
      return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
    });
    double mass = 0.0;
    std::size_t n = 0;
    while (n < order.size() && mass < p) mass += probs[static_cast<std::size_t>(order[n++])];
    order.resize(n);
    std::sort(order.begin(), order.end());
  }
  return order;
}

// Inverse-CDF draw over `support` (ascending ids), renormalised.
inline TokenId sample_from(const std::vector<double>& probs, const std::vector<TokenId>& support, double u) {
  double total = 0.0;
  for (TokenId v : support) total += probs[static_cast<std::size_t>(v)];
  double target = u * total;
  for (TokenId v : support) {
    target -= probs[static_cast<std::size_t>(v)];
    if (target < 0.0) return v;
  }
  return support.back();
}

// Plain ancestral sampling over the whole distribution.
template <StepModel M>
Hypothesis ancestral_sample(const M& model, std::uint64_t seed, std::size_t max_len = 0) {
  max_len = detail::effective_max(model.max_length(), max_len);
  macl::detail::Rng rng(seed);
  auto s = model.initial_state();
  auto next = model.step(s, Vocabulary::kBos);
  Hypothesis h;
  for (std::size_t t = 0; t < max_len; ++t) {
    std::vector<TokenId> all(next.size());
    for (std::size_t v = 0; v < next.size(); ++v) all[v] = static_cast<TokenId>(v);
    const TokenId tok = sample_from(next, all, rng.unit());
    h.log_score += detail::safe_log(next[static_cast<std::size_t>(tok)]);
    h.tokens.push_back(tok);
    if (tok == Vocabulary::kEos) {
      h.reached_eos = true;
      break;
    }
    if (t + 1 < max_len) next = model.step(s, tok);
  }
  return h;
}

// Log score is under the unfiltered model distribution.
template <StepModel M>
Hypothesis nucleus_sample(const M& model, double p, std::uint64_t seed, std::size_t max_len = 0) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("nucleus_p must lie in (0,1]");
  max_len = detail::effective_max(model.max_length(), max_len);
  macl::detail::Rng rng(seed);
  auto s = model.initial_state();
  auto next = model.step(s, Vocabulary::kBos);
  Hypothesis h;
  for (std::size_t t = 0; t < max_len; ++t) {
    const auto support = nucleus_support(next, p);
    const TokenId tok = sample_from(next, support, rng.unit());
    h.log_score += detail::safe_log(next[static_cast<std::size_t>(tok)]);
    h.tokens.push_back(tok);
    if (tok == Vocabulary::kEos) {
      h.reached_eos = true;
      break;
    }
    if (t + 1 < max_len) next = model.step(s, tok);
  }
  return h;
}

struct DecodeResult {
  Hypothesis best;
  bool truncated = false;
};

// Beam picks the best hypothesis that reached EOS, else the best partial.
template <StepModel M>
DecodeResult decode(const M& model, const DecodeConfig& cfg, std::uint64_t stream = 0) {
  cfg.validate();
  DecodeResult r;
  switch (cfg.strategy) {
    case Strategy::kGreedy:
      r.best = greedy_search(model, cfg.max_target_len);
      break;
    case Strategy::kBeam: {
      auto hs = beam_search(model, cfg.beam_size, cfg.max_target_len);
      if (hs.empty()) throw NumericError("beam search produced no hypothesis");
      detail::sort_hypotheses(hs, cfg.length_normalize);
      auto it = std::find_if(hs.begin(), hs.end(), [](const Hypothesis& h) { return h.reached_eos; });
      r.best = it == hs.end() ? hs.front() : *it;
      break;
    }
    case Strategy::kNucleus:
      r.best = nucleus_sample(model, cfg.nucleus_p, macl::detail::splitmix64(cfg.seed ^ macl::detail::splitmix64(stream)),
                              cfg.max_target_len);
      break;
  }
  r.truncated = !r.best.reached_eos;
  return r;
}

inline GenerationRecord to_record(const std::string& example_id, const DecodeResult& r, const DecodeConfig& cfg,
                                  const Vocabulary& vocab) {
  GenerationRecord rec;
  rec.example_id = example_id;
  rec.generated_response = vocab.decode(r.best.tokens);
  rec.decode_config = {cfg.name(), cfg.params()};
  rec.log_score = r.best.log_score;
  rec.truncated = r.truncated;
  return rec;
}

// Decodes every example of a corpus with a trained model.
inline std::vector<GenerationRecord> decode_corpus(const model::Seq2SeqModel& m, const Vocabulary& vocab,
                                                   const Corpus& corpus, const DecodeConfig& cfg) {
  std::vector<GenerationRecord> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.examples.size(); ++i) {
    const auto& ex = corpus.examples[i];
    const auto src = model::build_source(ex, vocab, m.config().max_source_len);
    const auto enc = m.encode(src);
    ModelDecoder dec(m, enc);
    out.push_back(to_record(ex.example_id, decode(dec, cfg, i), cfg, vocab));
  }
  return out;
}

}  // namespace macl::decoding
