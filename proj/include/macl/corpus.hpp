#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "macl/error.hpp"
#include "macl/io.hpp"

namespace macl {

using TokenSeq = std::vector<std::string>;
using TokenId = std::int32_t;
using IdSeq = std::vector<TokenId>;

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

namespace detail {
inline bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }
inline bool is_closing_punct(std::string_view tok) {
  return tok.size() == 1 && std::string_view(".,!?;:)]}").find(tok[0]) != std::string_view::npos;
}
}  // namespace detail

// Lowercases (ASCII), splits on whitespace and peels leading and trailing
// punctuation characters off each word as single-character tokens.
inline TokenSeq tokenize(std::string_view text) {
  TokenSeq out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    std::string word(text.substr(i, j - i));
    for (auto& c : word) {
      if (static_cast<unsigned char>(c) < 0x80) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    std::size_t lo = 0, hi = word.size();
    while (lo < hi && detail::is_punct(static_cast<unsigned char>(word[lo]))) ++lo;
    while (hi > lo && detail::is_punct(static_cast<unsigned char>(word[hi - 1]))) --hi;
    for (std::size_t k = 0; k < lo; ++k) out.emplace_back(1, word[k]);
    if (hi > lo) out.push_back(word.substr(lo, hi - lo));
    for (std::size_t k = hi; k < word.size(); ++k) out.emplace_back(1, word[k]);
    i = j;
  }
  return out;
}

// Joins with single spaces; closing punctuation attaches to the previous token.
inline std::string detokenize(const TokenSeq& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty() && !detail::is_closing_punct(t)) out += ' ';
    out += t;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kUnk = 4;
  static constexpr TokenId kNumReserved = 5;

  Vocabulary() {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"}) add(s);
  }

  TokenId add(const std::string& surface) {
    if (surface.empty()) throw VocabularyError("empty surface");
    auto it = index_.find(surface);
    if (it != index_.end()) return it->second;
    const auto id = static_cast<TokenId>(surfaces_.size());
    surfaces_.push_back(surface);
    index_.emplace(surface, id);
    return id;
  }

  // Unknown surfaces map to UNK.
  TokenId id(const std::string& surface) const {
    auto it = index_.find(surface);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& surface) const { return index_.count(surface) != 0; }

  const std::string& surface(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= surfaces_.size())
      throw VocabularyError("token id out of range: " + std::to_string(id));
    return surfaces_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return surfaces_.size(); }
  const std::vector<std::string>& surfaces() const { return surfaces_; }

  IdSeq encode(const TokenSeq& seq) const {
    IdSeq ids;
    ids.reserve(seq.size());
    for (const auto& s : seq) ids.push_back(id(s));
    return ids;
  }

  // Drops reserved ids (BOS/EOS/PAD/SEP); UNK is kept as its surface.
  TokenSeq decode(const IdSeq& ids) const {
    TokenSeq out;
    for (TokenId i : ids) {
      if (i < kNumReserved && i != kUnk) continue;
      out.push_back(surface(i));
    }
    return out;
  }

  std::string hash() const {
    io::Fnv1a h;
    for (const auto& s : surfaces_) {
      h.update(s);
      h.update(std::string_view("\0", 1));
    }
    return h.hex();
  }

  static Vocabulary from_surfaces(const std::vector<std::string>& surfaces) {
    Vocabulary v;
    if (surfaces.size() < static_cast<std::size_t>(kNumReserved))
      throw VocabularyError("vocabulary lacks reserved tokens");
    for (std::size_t i = 0; i < static_cast<std::size_t>(kNumReserved); ++i) {
      if (surfaces[i] != v.surfaces_[i]) throw VocabularyError("reserved token mismatch at " + std::to_string(i));
    }
    for (std::size_t i = kNumReserved; i < surfaces.size(); ++i) {
      if (v.contains(surfaces[i])) throw VocabularyError("duplicate surface: " + surfaces[i]);
      v.add(surfaces[i]);
    }
    return v;
  }

 private:
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// Data model
// ---------------------------------------------------------------------------

enum class Split { kTrain, kValid, kTestSeen, kTestUnseen };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTestSeen: return "test_seen";
    case Split::kTestUnseen: return "test_unseen";
  }
  return "train";
}

inline Split split_from_string(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test_seen" || s == "test") return Split::kTestSeen;
  if (s == "test_unseen") return Split::kTestUnseen;
  throw ValidationError("unknown split: " + std::string(s));
}

struct DialogueExample {
  std::string example_id;
  std::vector<TokenSeq> context_turns;  // oldest first
  std::vector<TokenSeq> knowledge_pool;
  std::size_t gold_knowledge_index = 0;
  TokenSeq response;

  const TokenSeq& gold_knowledge() const { return knowledge_pool.at(gold_knowledge_index); }
  bool operator==(const DialogueExample&) const = default;
};

inline void validate(const DialogueExample& ex) {
  if (ex.example_id.empty()) throw ValidationError("example with empty id");
  if (ex.gold_knowledge_index >= ex.knowledge_pool.size())
    throw ValidationError("example " + ex.example_id + ": gold_knowledge_index " +
                          std::to_string(ex.gold_knowledge_index) + " out of range for pool of size " +
                          std::to_string(ex.knowledge_pool.size()));
  if (ex.response.empty()) throw ValidationError("example " + ex.example_id + ": empty response");
}

struct Corpus {
  Split split = Split::kTrain;
  std::vector<DialogueExample> examples;

  std::size_t size() const { return examples.size(); }
  bool operator==(const Corpus&) const = default;

  const DialogueExample* find(const std::string& id) const {
    for (const auto& ex : examples)
      if (ex.example_id == id) return &ex;
    return nullptr;
  }
};

inline void validate(const Corpus& corpus) {
  std::unordered_set<std::string> seen;
  for (const auto& ex : corpus.examples) {
    validate(ex);
    if (!seen.insert(ex.example_id).second) throw ValidationError("duplicate example id: " + ex.example_id);
  }
}

// Every surface of every example in file order, after the reserved block.
inline Vocabulary build_vocabulary(const Corpus& corpus) {
  Vocabulary v;
  auto add_all = [&](const TokenSeq& s) {
    for (const auto& t : s) v.add(t);
  };
  for (const auto& ex : corpus.examples) {
    for (const auto& u : ex.context_turns) add_all(u);
    for (const auto& k : ex.knowledge_pool) add_all(k);
    add_all(ex.response);
  }
  return v;
}

struct DecodeParams {
  std::string name;
  nlohmann::json params = nlohmann::json::object();
};

struct GenerationRecord {
  std::string example_id;
  TokenSeq generated_response;
  DecodeParams decode_config;
  double log_score = 0.0;
  bool truncated = false;
};

// ---------------------------------------------------------------------------
// JSONL serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const DialogueExample& ex) {
  nlohmann::json j;
  j["id"] = ex.example_id;
  j["context"] = nlohmann::json::array();
  for (const auto& u : ex.context_turns) j["context"].push_back(detokenize(u));
  j["knowledge_pool"] = nlohmann::json::array();
  for (const auto& k : ex.knowledge_pool) j["knowledge_pool"].push_back(detokenize(k));
  j["gold_knowledge_index"] = ex.gold_knowledge_index;
  j["response"] = detokenize(ex.response);
  return j;
}

inline DialogueExample example_from_json(const nlohmann::json& j, std::size_t line) {
  for (const char* key : {"id", "context", "knowledge_pool", "gold_knowledge_index", "response"}) {
    if (!j.contains(key)) throw ParseError(std::string("missing field \"") + key + "\"", line);
  }
  DialogueExample ex;
  try {
    ex.example_id = j.at("id").get<std::string>();
    for (const auto& u : j.at("context")) ex.context_turns.push_back(tokenize(u.get<std::string>()));
    for (const auto& k : j.at("knowledge_pool")) ex.knowledge_pool.push_back(tokenize(k.get<std::string>()));
    const auto gold = j.at("gold_knowledge_index").get<long long>();
    if (gold < 0)
      throw ValidationError("example " + ex.example_id + ": negative gold_knowledge_index");
    ex.gold_knowledge_index = static_cast<std::size_t>(gold);
    ex.response = tokenize(j.at("response").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what(), line);
  }
  return ex;
}

inline Corpus parse_corpus(std::istream& in, Split split = Split::kTrain) {
  Corpus corpus;
  corpus.split = split;
  std::string line;
  std::size_t lineno = 0;
  std::unordered_set<std::string> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    if (!j.is_object()) throw ParseError("expected a JSON object", lineno);
    auto ex = example_from_json(j, lineno);
    validate(ex);
    if (!ids.insert(ex.example_id).second) throw ValidationError("duplicate example id: " + ex.example_id);
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

inline Corpus load_corpus(const std::filesystem::path& path, Split split = Split::kTrain) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open corpus " + path.string());
  return parse_corpus(in, split);
}

inline std::string serialize_corpus(const Corpus& corpus) {
  std::string out;
  for (const auto& ex : corpus.examples) {
    out += to_json(ex).dump();
    out += '\n';
  }
  return out;
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_corpus(corpus));
}

inline nlohmann::json to_json(const GenerationRecord& r) {
  nlohmann::json j;
  j["id"] = r.example_id;
  j["generated"] = detokenize(r.generated_response);
  j["decoder"] = r.decode_config.name;
  j["params"] = r.decode_config.params;
  j["log_score"] = r.log_score;
  if (r.truncated) j["truncated"] = true;
  return j;
}

inline std::vector<GenerationRecord> parse_generations(std::istream& in) {
  std::vector<GenerationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      GenerationRecord r;
      r.example_id = j.at("id").get<std::string>();
      r.generated_response = tokenize(j.at("generated").get<std::string>());
      r.decode_config.name = j.at("decoder").get<std::string>();
      r.decode_config.params = j.value("params", nlohmann::json::object());
      r.log_score = j.at("log_score").get<double>();
      r.truncated = j.value("truncated", false);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return out;
}

inline std::vector<GenerationRecord> load_generations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open generations " + path.string());
  return parse_generations(in);
}

inline std::string serialize_generations(const std::vector<GenerationRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t n_examples = 100;
  std::size_t vocab_size = 300;
  double shortcut_rate = 0.9;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Portable draws: std::mt19937_64 is fully specified, the std distributions
// are not, so byte-identical corpora need hand-rolled mappings.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  std::size_t uniform(std::size_t lo, std::size_t hi) {  // inclusive
    return lo + static_cast<std::size_t>(engine_() % (hi - lo + 1));
  }
  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Box-Muller on unit(); one value per call.
  double normal() {
    double u1 = unit();
    while (u1 <= 0.0) u1 = unit();
    const double u2 = unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }
  std::uint64_t next() { return engine_(); }
  template <class T>
  const T& pick(const std::vector<T>& v) { return v[uniform(0, v.size() - 1)]; }
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform(0, i - 1)]);
  }

 private:
  std::mt19937_64 engine_;
};

inline const std::vector<std::string>& function_words() {
  static const std::vector<std::string> w{"the", "of", "a", "in", "is", "was", "and", "by"};
  return w;
}

inline const std::vector<std::string>& chat_words() {
  static const std::vector<std::string> w{"i",    "you",  "think", "love", "like",  "know",  "really", "yes",
                                          "oh",   "that", "so",    "cool", "do",    "have",  "ever",   "heard",
                                          "it",   "my",   "what",  "well", "wow",   "we",    "great",  "sure"};
  return w;
}

inline std::vector<std::string> content_words(std::size_t count) {
  static const char* kSyl[] = {"ba", "ko", "ri", "mu", "te", "sa", "lo", "ne", "vi", "du",
                               "pa", "ge", "zo", "fi", "hu", "ta", "ki", "mo", "re", "lu"};
  constexpr std::size_t kN = 20;
  std::set<std::string> reserved(function_words().begin(), function_words().end());
  reserved.insert(chat_words().begin(), chat_words().end());
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (std::size_t i = 0; out.size() < count; ++i) {
    std::string w = std::string(kSyl[i % kN]) + kSyl[(i / kN) % kN];
    if (i >= kN * kN) w += kSyl[(i / (kN * kN)) % kN];
    if (i >= kN * kN * kN) w += std::to_string(i);
    if (reserved.count(w) || !seen.insert(w).second) continue;
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace detail

// Builds one split of a knowledge-grounded dialogue corpus whose references
// copy a contiguous span of the gold knowledge with probability
// shortcut_rate and otherwise mix about half of the gold tokens, shuffled,
// with chat words. Each example draws the copy/paraphrase decision from its
// own stream, so raising shortcut_rate only converts paraphrases into copies.
inline Corpus generate_synthetic(const SynthConfig& cfg, Split split = Split::kTrain) {
  if (!(cfg.shortcut_rate >= 0.0 && cfg.shortcut_rate <= 1.0))
    throw ParameterError("shortcut_rate must lie in [0,1]");
  if (cfg.vocab_size < 50) throw ParameterError("vocab_size must be >= 50");
  if (cfg.n_examples < 1) throw ParameterError("n_examples must be >= 1");

  const auto& fn = detail::function_words();
  const auto& chat = detail::chat_words();
  const std::size_t n_content = cfg.vocab_size - Vocabulary::kNumReserved - fn.size() - chat.size();
  const auto all_content = detail::content_words(n_content);

  // Unseen-topic words are held out of every other split.
  std::vector<std::string> content;
  const std::size_t held_out = n_content >= 40 ? n_content / 5 : 0;
  if (split == Split::kTestUnseen && held_out > 0)
    content.assign(all_content.end() - static_cast<std::ptrdiff_t>(held_out), all_content.end());
  else
    content.assign(all_content.begin(), all_content.end() - static_cast<std::ptrdiff_t>(held_out));

  const std::uint64_t split_seed = detail::splitmix64(cfg.seed * 4 + static_cast<std::uint64_t>(split));
  const std::string prefix = to_string(split) + "-";

  Corpus corpus;
  corpus.split = split;
  corpus.examples.reserve(cfg.n_examples);
  for (std::size_t i = 0; i < cfg.n_examples; ++i) {
    const std::uint64_t ex_seed = detail::splitmix64(split_seed ^ detail::splitmix64(i));
    detail::Rng rng(ex_seed);
    detail::Rng decision(detail::splitmix64(ex_seed ^ 0x5851f42d4c957f2dULL));
    detail::Rng copy_rng(detail::splitmix64(ex_seed ^ 0x14057b7ef767814fULL));
    detail::Rng para_rng(detail::splitmix64(ex_seed ^ 0x2545f4914f6cdd1dULL));

    DialogueExample ex;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "%06zu", i);
    ex.example_id = prefix + idbuf;

    std::vector<std::string> topic(content);
    rng.shuffle(topic);
    topic.resize(std::min<std::size_t>(12, topic.size()));

    for (int s = 0; s < 4; ++s) {
      const std::size_t len = rng.uniform(8, 12);
      TokenSeq sent;
      std::size_t n_content_tokens = 0;
      for (std::size_t p = 0; p < len; ++p) {
        const bool want_content = rng.unit() < 0.65 || (len - p) <= (3 - std::min<std::size_t>(3, n_content_tokens));
        if (want_content) {
          sent.push_back(rng.pick(topic));
          ++n_content_tokens;
        } else {
          sent.push_back(rng.pick(fn));
        }
      }
      ex.knowledge_pool.push_back(std::move(sent));
    }
    ex.gold_knowledge_index = rng.uniform(0, 3);
    const TokenSeq& gold = ex.knowledge_pool[ex.gold_knowledge_index];

    for (int t = 0; t < 2; ++t) {
      const std::size_t len = rng.uniform(4, 7);
      TokenSeq turn;
      for (std::size_t p = 0; p < len; ++p) turn.push_back(rng.pick(chat));
      turn[rng.uniform(0, len - 1)] = t == 0 ? rng.pick(topic) : gold[rng.uniform(0, gold.size() - 1)];
      ex.context_turns.push_back(std::move(turn));
    }

    if (decision.unit() < cfg.shortcut_rate) {
      const std::size_t len = gold.size();
      const std::size_t min_span = (3 * len + 4) / 5;  // ceil(0.6 * len)
      const std::size_t span = copy_rng.uniform(min_span, len);
      const std::size_t start = copy_rng.uniform(0, len - span);
      // span / (span + wrap) >= 0.6  <=>  wrap <= 2 * span / 3
      const std::size_t max_wrap = std::min<std::size_t>(2 * span / 3, 5);
      const std::size_t wrap = copy_rng.uniform(std::min<std::size_t>(2, max_wrap), max_wrap);
      const std::size_t lead = wrap == 0 ? 0 : copy_rng.uniform(1, wrap);
      for (std::size_t p = 0; p < lead; ++p) ex.response.push_back(copy_rng.pick(chat));
      for (std::size_t p = 0; p < span; ++p) ex.response.push_back(gold[start + p]);
      for (std::size_t p = lead; p < wrap; ++p) ex.response.push_back(copy_rng.pick(chat));
    } else {
      const std::size_t len = para_rng.uniform(8, 12);
      const double frac = 0.4 + 0.2 * para_rng.unit();
      const std::size_t n_know = std::min(gold.size(), static_cast<std::size_t>(std::lround(frac * static_cast<double>(len))));
      std::vector<std::size_t> positions(gold.size());
      for (std::size_t p = 0; p < positions.size(); ++p) positions[p] = p;
      para_rng.shuffle(positions);
      positions.resize(n_know);
      std::vector<bool> is_know(len, false);
      std::vector<std::size_t> slots(len);
      for (std::size_t p = 0; p < len; ++p) slots[p] = p;
      para_rng.shuffle(slots);
      for (std::size_t p = 0; p < n_know; ++p) is_know[slots[p]] = true;
      std::size_t k = 0;
      for (std::size_t p = 0; p < len; ++p)
        ex.response.push_back(is_know[p] ? gold[positions[k++]] : para_rng.pick(chat));
    }
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

}  // namespace macl
