#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "macl/corpus.hpp"
#include "macl/error.hpp"

namespace macl::metrics {

struct KnowledgeResponsePair {
  TokenSeq knowledge;
  TokenSeq response;
};

// Exact LCS length with a rolling single row, O(|a||b|) time, O(|b|) space.
template <class T>
std::size_t lcs_length(std::span<const T> a, std::span<const T> b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> row(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = 0;  // row[j-1] from the previous i
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = a[i - 1] == b[j - 1] ? diag + 1 : std::max(up, row[j - 1]);
      diag = up;
    }
  }
  return row[b.size()];
}

template <class T>
std::size_t lcs_length(const std::vector<T>& a, const std::vector<T>& b) {
  return lcs_length(std::span<const T>(a), std::span<const T>(b));
}

inline double plcs(const KnowledgeResponsePair& p) {
  if (p.response.empty()) throw UndefinedMetricError("PLCS undefined for an empty response");
  return static_cast<double>(lcs_length(p.knowledge, p.response)) / static_cast<double>(p.response.size());
}

namespace detail {
inline std::set<std::vector<std::string>> ngram_set(const TokenSeq& s, std::size_t n) {
  std::set<std::vector<std::string>> out;
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) out.emplace(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + n));
  return out;
}
}  // namespace detail

// 1 if any n-gram of the response also occurs in the knowledge.
inline bool shares_ngram(const KnowledgeResponsePair& p, std::size_t n) {
  if (p.response.size() < n || p.knowledge.size() < n) return false;
  const auto k = detail::ngram_set(p.knowledge, n);
  for (std::size_t i = 0; i + n <= p.response.size(); ++i) {
    std::vector<std::string> g(p.response.begin() + static_cast<std::ptrdiff_t>(i), p.response.begin() + static_cast<std::ptrdiff_t>(i + n));
    if (k.count(g)) return true;
  }
  return false;
}

// Pairs shorter than n on either side contribute 0.
inline double dup_n(std::span<const KnowledgeResponsePair> pairs, std::size_t n) {
  if (n < 1) throw ParameterError("dup_n requires n >= 1");
  if (pairs.empty()) throw UndefinedMetricError("Dup-n undefined on an empty corpus");
  std::size_t hits = 0;
  for (const auto& p : pairs) hits += shares_ngram(p, n) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

// Response n-grams counted with multiplicity against the knowledge n-gram set.
inline double kp_n(const KnowledgeResponsePair& p, std::size_t n) {
  if (n < 1) throw ParameterError("kp_n requires n >= 1");
  if (p.response.size() < n) throw UndefinedMetricError("KP-n undefined: response shorter than n");
  const auto k = detail::ngram_set(p.knowledge, n);
  const std::size_t total = p.response.size() - n + 1;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < total; ++i) {
    std::vector<std::string> g(p.response.begin() + static_cast<std::ptrdiff_t>(i), p.response.begin() + static_cast<std::ptrdiff_t>(i + n));
    hits += k.count(g);
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

inline std::vector<double> eligible_kp(std::span<const KnowledgeResponsePair> pairs, std::size_t n) {
  std::vector<double> out;
  for (const auto& p : pairs)
    if (p.response.size() >= n) out.push_back(kp_n(p, n));
  return out;
}

inline double mkp_n(std::span<const KnowledgeResponsePair> pairs, std::size_t n) {
  const auto v = eligible_kp(pairs, n);
  if (v.empty()) throw UndefinedMetricError("mKP-n undefined: no response of length >= n");
  double sum = 0.0;
  for (double x : v) sum += x;
  return sum / static_cast<double>(v.size());
}

inline constexpr double kDegenerationThreshold = 0.7;

// Fraction with PLCS strictly above 0.7.
inline double pod(std::span<const KnowledgeResponsePair> pairs) {
  if (pairs.empty()) throw UndefinedMetricError("PoD undefined on an empty corpus");
  std::size_t hits = 0;
  for (const auto& p : pairs) hits += plcs(p) > kDegenerationThreshold ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

inline double pod_from_plcs(std::span<const double> values) {
  if (values.empty()) throw UndefinedMetricError("PoD undefined on an empty corpus");
  std::size_t hits = 0;
  for (double v : values) hits += v > kDegenerationThreshold ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(values.size());
}

struct KPHistogram {
  static constexpr std::size_t kBins = 10;
  std::size_t n = 1;
  std::vector<double> bin_edges;  // kBins + 1 edges over [0,1]
  std::vector<double> masses;     // kBins entries summing to 1
};

// Bins are [i/10, (i+1)/10) with the last bin closed on the right.
inline KPHistogram histogram_from_values(std::span<const double> values, std::size_t n) {
  if (values.empty()) throw UndefinedMetricError("KP histogram undefined: no eligible pair");
  KPHistogram h;
  h.n = n;
  h.bin_edges.resize(KPHistogram::kBins + 1);
  for (std::size_t i = 0; i <= KPHistogram::kBins; ++i)
    h.bin_edges[i] = static_cast<double>(i) / static_cast<double>(KPHistogram::kBins);
  std::vector<std::size_t> counts(KPHistogram::kBins, 0);
  for (double v : values) {
    // The slack keeps exact tenths such as 0.3 out of the bin below.
    auto bin = static_cast<std::size_t>(std::floor(v * static_cast<double>(KPHistogram::kBins) + 1e-9));
    counts[std::min(bin, KPHistogram::kBins - 1)] += 1;
  }
  h.masses.resize(KPHistogram::kBins);
  for (std::size_t i = 0; i < KPHistogram::kBins; ++i)
    h.masses[i] = static_cast<double>(counts[i]) / static_cast<double>(values.size());
  return h;
}

inline KPHistogram kp_histogram(std::span<const KnowledgeResponsePair> pairs, std::size_t n) {
  const auto v = eligible_kp(pairs, n);
  return histogram_from_values(v, n);
}

// Mean absolute difference of bin masses, in percentage points.
inline double kud(const KPHistogram& human, const KPHistogram& generated) {
  if (human.masses.size() != generated.masses.size() || human.bin_edges != generated.bin_edges)
    throw ShapeError("KUD requires identical histogram bins");
  if (human.masses.empty()) throw ShapeError("KUD requires non-empty histograms");
  double sum = 0.0;
  for (std::size_t i = 0; i < human.masses.size(); ++i) sum += std::abs(human.masses[i] - generated.masses[i]);
  return 100.0 * sum / static_cast<double>(human.masses.size());
}

struct ExampleScore {
  std::string example_id;
  double plcs = 0.0;
  double kp1 = 0.0;
  bool kp1_defined = false;
};

// Metrics over one set of responses (references or generations).
struct SideMetrics {
  double dup16 = 0.0;
  double dup32 = 0.0;
  double plcs_mean = 0.0;
  double mkp1 = 0.0;
  double mkp2 = 0.0;
  double pod = 0.0;
  KPHistogram kp1_hist;
  KPHistogram kp2_hist;
  std::vector<ExampleScore> per_example;
};

struct MetricsReport {
  SideMetrics generated;
  SideMetrics reference;
  double kud = 0.0;  // generated vs reference KP-1 histograms
  std::size_t n_examples = 0;
};

inline SideMetrics score_side(const std::vector<std::string>& ids, std::span<const KnowledgeResponsePair> pairs) {
  SideMetrics s;
  s.dup16 = dup_n(pairs, 16);
  s.dup32 = dup_n(pairs, 32);
  std::vector<double> plcs_values;
  plcs_values.reserve(pairs.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    ExampleScore e;
    e.example_id = ids[i];
    // An empty generation cannot copy anything: PLCS 0, KP-n excluded.
    e.plcs = pairs[i].response.empty() ? 0.0 : plcs(pairs[i]);
    if (!pairs[i].response.empty()) {
      e.kp1 = kp_n(pairs[i], 1);
      e.kp1_defined = true;
    }
    sum += e.plcs;
    plcs_values.push_back(e.plcs);
    s.per_example.push_back(std::move(e));
  }
  s.plcs_mean = sum / static_cast<double>(pairs.size());
  s.pod = pod_from_plcs(plcs_values);
  if (!eligible_kp(pairs, 1).empty()) {
    s.mkp1 = mkp_n(pairs, 1);
    s.kp1_hist = kp_histogram(pairs, 1);
  } else {
    s.kp1_hist = histogram_from_values(std::vector<double>{0.0}, 1);
  }
  // Short generations may leave no bigram; report 0 rather than fail.
  if (!eligible_kp(pairs, 2).empty()) {
    s.mkp2 = mkp_n(pairs, 2);
    s.kp2_hist = kp_histogram(pairs, 2);
  } else {
    s.kp2_hist = histogram_from_values(std::vector<double>{0.0}, 2);
  }
  return s;
}

// Generations are aligned to references by example id; KUD takes the
// references' KP-1 distribution as the human one.
inline MetricsReport build_report(const Corpus& references, const std::vector<GenerationRecord>& generations) {
  if (generations.size() != references.size())
    throw AlignmentError("generation count " + std::to_string(generations.size()) + " != reference count " +
                         std::to_string(references.size()));
  std::unordered_map<std::string, const GenerationRecord*> by_id;
  for (const auto& g : generations) {
    if (!by_id.emplace(g.example_id, &g).second) throw AlignmentError("duplicate generation id " + g.example_id);
  }
  std::vector<std::string> ids;
  std::vector<KnowledgeResponsePair> ref_pairs, gen_pairs;
  for (const auto& ex : references.examples) {
    auto it = by_id.find(ex.example_id);
    if (it == by_id.end()) throw AlignmentError("no generation for example " + ex.example_id);
    ids.push_back(ex.example_id);
    ref_pairs.push_back({ex.gold_knowledge(), ex.response});
    gen_pairs.push_back({ex.gold_knowledge(), it->second->generated_response});
  }
  MetricsReport r;
  r.n_examples = ids.size();
  r.reference = score_side(ids, ref_pairs);
  r.generated = score_side(ids, gen_pairs);
  r.kud = kud(r.reference.kp1_hist, r.generated.kp1_hist);
  return r;
}

inline nlohmann::json to_json(const KPHistogram& h) {
  return {{"n", h.n}, {"bin_edges", h.bin_edges}, {"masses", h.masses}};
}

inline nlohmann::json to_json(const SideMetrics& s) {
  return {{"dup_16", s.dup16}, {"dup_32", s.dup32}, {"plcs_mean", s.plcs_mean}, {"mkp_1", s.mkp1},
          {"mkp_2", s.mkp2},   {"pod", s.pod},      {"kp1_histogram", to_json(s.kp1_hist)},
          {"kp2_histogram", to_json(s.kp2_hist)}};
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["n_examples"] = r.n_examples;
  j["generated"] = to_json(r.generated);
  j["reference"] = to_json(r.reference);
  j["kud"] = r.kud;
  j["pod"] = r.generated.pod;
  j["metadata"] = {{"dup_n_short_pairs", "contribute 0"},
                   {"kp_n_short_pairs", "excluded"},
                   {"pod_threshold", "plcs > 0.7"},
                   {"kud_bins", KPHistogram::kBins},
                   {"kud_scale", "percentage points"}};
  return j;
}

inline std::string per_example_csv(const MetricsReport& r) {
  std::string out = "id,gen_plcs,gen_kp1,ref_plcs,ref_kp1\n";
  char buf[128];
  for (std::size_t i = 0; i < r.generated.per_example.size(); ++i) {
    const auto& g = r.generated.per_example[i];
    const auto& h = r.reference.per_example[i];
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f\n", g.plcs, g.kp1, h.plcs, h.kp1);
    out += g.example_id;
    out += buf;
  }
  return out;
}

}  // namespace macl::metrics
