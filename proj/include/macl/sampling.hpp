#pragma once

// Hard-negative mining: diverse (group) beam search over a frozen
// degenerator, LCS-against-knowledge oracle scoring, top-m retention.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "macl/corpus.hpp"
#include "macl/decoding.hpp"
#include "macl/error.hpp"
#include "macl/io.hpp"
#include "macl/metrics.hpp"

namespace macl::sampling {

using decoding::Hypothesis;

struct GroupBeamConfig {
  std::size_t beam_size = 32;
  std::size_t num_groups = 8;
  double diversity_penalty = 0.5;
  std::size_t max_target_len = 0;  // 0: the model's limit

  void validate() const {
    if (beam_size < 1 || num_groups < 1) throw ConfigError("beam_size and num_groups must be >= 1");
    if (num_groups > beam_size) throw ConfigError("num_groups must not exceed beam_size");
    if (beam_size % num_groups != 0) throw ConfigError("num_groups must divide beam_size");
    if (!(diversity_penalty >= 0.0)) throw ConfigError("diversity_penalty must be >= 0");
  }
};

// Beams are split into groups that advance one after another at every step.
// A later group's candidate scores drop by diversity_penalty times the number
// of earlier groups that picked the same token at this step (Hamming
// diversity). Returned scores are unpenalised log-probabilities; the result
// lists each group's hypotheses best-first, groups in order.
template <decoding::StepModel M>
std::vector<Hypothesis> group_beam_search(const M& model, const GroupBeamConfig& cfg) {
  cfg.validate();
  const std::size_t max_len = decoding::detail::effective_max(model.max_length(), cfg.max_target_len);
  const std::size_t group_size = cfg.beam_size / cfg.num_groups;

  struct Live {
    IdSeq tokens;
    typename M::State state;
    double score;
    std::vector<double> next;
  };
  struct Group {
    std::vector<Live> live;
    std::vector<Hypothesis> finished;
    bool done = false;
  };
  struct Cand {
    double key;    // penalised
    double score;  // true log-probability
    std::size_t parent;
    TokenId token;
  };

  std::vector<Group> groups(cfg.num_groups);
  {
    auto s = model.initial_state();
    auto next = model.step(s, Vocabulary::kBos);
    for (auto& g : groups) g.live.push_back({{}, s, 0.0, next});
  }

  for (std::size_t t = 0; t < max_len; ++t) {
    std::unordered_map<TokenId, std::size_t> chosen;
    bool any_active = false;
    for (auto& g : groups) {
      if (g.done || g.live.empty()) {
        g.done = true;
        continue;
      }
      any_active = true;
      std::vector<Cand> cands;
      for (std::size_t i = 0; i < g.live.size(); ++i) {
        const auto& next = g.live[i].next;
        for (std::size_t v = 0; v < next.size(); ++v) {
          if (!(next[v] > 0.0)) continue;
          const double score = g.live[i].score + std::log(next[v]);
          auto it = chosen.find(static_cast<TokenId>(v));
          const double penalty = it == chosen.end() ? 0.0 : cfg.diversity_penalty * static_cast<double>(it->second);
          cands.push_back({score - penalty, score, i, static_cast<TokenId>(v)});
        }
      }
      const std::size_t keep = std::min(cands.size(), 2 * group_size);
      std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                        [](const Cand& a, const Cand& b) {
                          if (a.key != b.key) return a.key > b.key;
                          if (a.parent != b.parent) return a.parent < b.parent;
                          return a.token < b.token;
                        });
      std::vector<Cand> next_live;
      for (std::size_t r = 0; r < keep && next_live.size() < group_size; ++r) {
        const auto& c = cands[r];
        if (c.token == Vocabulary::kEos) {
          if (r < group_size) {
            Hypothesis h{g.live[c.parent].tokens, c.score, true};
            h.tokens.push_back(Vocabulary::kEos);
            g.finished.push_back(std::move(h));
            chosen[c.token] += 1;
          }
        } else {
          next_live.push_back(c);
          chosen[c.token] += 1;
        }
      }
      decoding::detail::sort_hypotheses(g.finished, false);
      if (g.finished.size() > group_size) g.finished.resize(group_size);
      double best_live = -std::numeric_limits<double>::infinity();
      for (const auto& c : next_live) best_live = std::max(best_live, c.score);
      if (g.finished.size() >= group_size && (next_live.empty() || best_live <= g.finished.back().log_score)) {
        g.live.clear();
        g.done = true;
        continue;
      }
      std::vector<Live> grown;
      grown.reserve(next_live.size());
      for (const auto& c : next_live) {
        Live l{g.live[c.parent].tokens, g.live[c.parent].state, c.score, {}};
        l.tokens.push_back(c.token);
        if (t + 1 < max_len) l.next = model.step(l.state, c.token);
        grown.push_back(std::move(l));
      }
      if (t + 1 == max_len) {
        for (auto& l : grown) g.finished.push_back({std::move(l.tokens), l.score, false});
        grown.clear();
      }
      g.live = std::move(grown);
    }
    if (!any_active) break;
  }

  std::vector<Hypothesis> out;
  for (auto& g : groups) {
    decoding::detail::sort_hypotheses(g.finished, false);
    if (g.finished.size() > group_size) g.finished.resize(group_size);
    for (auto& h : g.finished) out.push_back(std::move(h));
  }
  return out;
}

// Raw LCS length between a candidate and the gold knowledge.
template <class T>
std::size_t oracle_score(const std::vector<T>& candidate, const std::vector<T>& knowledge) {
  return metrics::lcs_length(candidate, knowledge);
}

struct ScoredNegative {
  IdSeq tokens;  // without EOS
  std::size_t oracle = 0;
  double log_score = 0.0;

  bool operator==(const ScoredNegative&) const = default;
};

struct HardNegativePool {
  std::string example_id;
  std::vector<ScoredNegative> candidates;  // unique, in search order
  std::vector<ScoredNegative> retained;    // top m, oracle descending
  std::size_t shortfall = 0;               // m minus retained size
};

// Oracle descending, then log score descending, then token order.
inline bool ranks_before(const ScoredNegative& a, const ScoredNegative& b) {
  if (a.oracle != b.oracle) return a.oracle > b.oracle;
  if (a.log_score != b.log_score) return a.log_score > b.log_score;
  return a.tokens < b.tokens;
}

inline HardNegativePool select_top_m(std::string example_id, const std::vector<Hypothesis>& hyps,
                                     const IdSeq& knowledge, std::size_t m) {
  HardNegativePool pool;
  pool.example_id = std::move(example_id);
  std::map<IdSeq, std::size_t> index;
  for (const auto& h : hyps) {
    IdSeq toks = h.tokens;
    if (!toks.empty() && toks.back() == Vocabulary::kEos) toks.pop_back();
    if (toks.empty()) continue;
    auto it = index.find(toks);
    if (it != index.end()) {
      auto& existing = pool.candidates[it->second];
      existing.log_score = std::max(existing.log_score, h.log_score);
      continue;
    }
    index.emplace(toks, pool.candidates.size());
    ScoredNegative s;
    s.oracle = oracle_score(toks, knowledge);
    s.tokens = std::move(toks);
    s.log_score = h.log_score;
    pool.candidates.push_back(std::move(s));
  }
  pool.retained = pool.candidates;
  std::sort(pool.retained.begin(), pool.retained.end(), ranks_before);
  if (pool.retained.size() > m) pool.retained.resize(m);
  pool.shortfall = m - pool.retained.size();
  return pool;
}

template <decoding::StepModel M>
HardNegativePool mine_hard_negatives(const M& degenerator, const std::string& example_id, const IdSeq& knowledge,
                                     const GroupBeamConfig& cfg, std::size_t m) {
  if (m > cfg.beam_size) throw ConfigError("m must not exceed beam_size");
  return select_top_m(example_id, group_beam_search(degenerator, cfg), knowledge, m);
}

inline HardNegativePool mine_hard_negatives(const model::Seq2SeqModel& degenerator, const Vocabulary& vocab,
                                            const DialogueExample& ex, const GroupBeamConfig& cfg, std::size_t m) {
  const auto src = model::build_source(ex, vocab, degenerator.config().max_source_len);
  const auto enc = degenerator.encode(src);
  decoding::ModelDecoder dec(degenerator, enc);
  return mine_hard_negatives(dec, ex.example_id, vocab.encode(ex.gold_knowledge()), cfg, m);
}

// Retained negatives per example, tied to the degenerator that produced them.
class NegativeCache {
 public:
  explicit NegativeCache(std::string degenerator_hash = {}) : hash_(std::move(degenerator_hash)) {}

  const std::string& degenerator_hash() const { return hash_; }
  const std::vector<ScoredNegative>* find(const std::string& id) const {
    auto it = entries_.find(id);
    return it == entries_.end() ? nullptr : &it->second;
  }
  void put(const std::string& id, std::vector<ScoredNegative> negatives) { entries_[id] = std::move(negatives); }
  std::size_t size() const { return entries_.size(); }

  std::string serialize(const Vocabulary& vocab) const {
    std::string out;
    for (const auto& [id, negs] : entries_) {
      nlohmann::json j;
      j["id"] = id;
      j["negatives"] = nlohmann::json::array();
      for (const auto& n : negs) {
        nlohmann::json e;
        e["tokens"] = vocab.decode(n.tokens);
        e["oracle"] = n.oracle;
        e["log_score"] = n.log_score;
        j["negatives"].push_back(std::move(e));
      }
      j["degenerator_hash"] = hash_;
      out += j.dump();
      out += '\n';
    }
    return out;
  }

  void save(const std::filesystem::path& path, const Vocabulary& vocab) const {
    io::write_file_atomic(path, serialize(vocab));
  }

  // Every line must carry `expected_hash`; anything else is stale.
  static NegativeCache parse(std::istream& in, const Vocabulary& vocab, const std::string& expected_hash) {
    NegativeCache cache(expected_hash);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(e.what(), lineno);
      }
      const auto hash = j.value("degenerator_hash", std::string());
      if (hash != expected_hash)
        throw StaleCacheError("negative cache built by degenerator " + hash + ", expected " + expected_hash);
      std::vector<ScoredNegative> negs;
      for (const auto& e : j.at("negatives")) {
        ScoredNegative n;
        n.tokens = vocab.encode(e.at("tokens").get<TokenSeq>());
        n.oracle = e.at("oracle").get<std::size_t>();
        n.log_score = e.at("log_score").get<double>();
        negs.push_back(std::move(n));
      }
      cache.put(j.at("id").get<std::string>(), std::move(negs));
    }
    return cache;
  }

  static NegativeCache load(const std::filesystem::path& path, const Vocabulary& vocab, const std::string& expected_hash) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open negative cache " + path.string());
    return parse(in, vocab, expected_hash);
  }

 private:
  std::string hash_;
  std::map<std::string, std::vector<ScoredNegative>> entries_;
};

}  // namespace macl::sampling
