#pragma once

// Two-phase training: an MLE degenerator trained with early stopping and
// frozen, then the contrastive model trained on token loss plus the
// sequence loss over in-batch and mined hard negatives.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "macl/autodiff.hpp"
#include "macl/corpus.hpp"
#include "macl/decoding.hpp"
#include "macl/error.hpp"
#include "macl/io.hpp"
#include "macl/losses.hpp"
#include "macl/metrics.hpp"
#include "macl/model.hpp"
#include "macl/sampling.hpp"

namespace macl::trainer {

enum class Objective { kMle, kNt, kMacl };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::kMle: return "mle";
    case Objective::kNt: return "nt";
    case Objective::kMacl: return "macl";
  }
  return "mle";
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "mle") return Objective::kMle;
  if (s == "nt") return Objective::kNt;
  if (s == "macl") return Objective::kMacl;
  throw ConfigError("unknown objective: " + s + " (expected mle, nt or macl)");
}

struct TrainConfig {
  std::string profile = "paper";
  Objective objective = Objective::kMle;
  double learning_rate = 1e-5;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 15;
  std::size_t patience = 3;
  std::uint64_t seed = 1;

  double alpha = 4.0;
  double lambda = 1.0;
  double mu = 2.0;
  std::size_t b = 32;
  std::size_t m = 16;
  std::size_t num_groups = 8;
  double diversity_penalty = 0.5;
  losses::CandidateRule candidate_rule = losses::CandidateRule::kArgmaxKnowledge;
  double epsilon = 1e-7;
  bool init_from_degenerator = true;

  // Model shape; vocab_size comes from the corpus.
  std::size_t embedding_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t attention_heads = 4;
  std::size_t max_source_len = 64;
  std::size_t max_target_len = 32;
  model::Pooling pooling = model::Pooling::kMean;

  // Per-epoch validation generations.
  std::size_t eval_beam_size = 3;
  std::size_t eval_examples = 0;  // 0: the whole validation split
  bool eval_each_epoch = true;

  bool deterministic = false;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
    if (batch_size < 1 || max_epochs < 1 || patience < 1) throw ConfigError("batch_size, max_epochs and patience must be >= 1");
    if (b < 1 || m < 1 || num_groups < 1) throw ConfigError("b, m and num_groups must be >= 1");
    if (m > b) throw ConfigError("m must not exceed b");
    if (b % num_groups != 0) throw ConfigError("num_groups must divide b");
    if (eval_beam_size < 1) throw ConfigError("eval_beam_size must be >= 1");
    token_config().validate();
    seq_config().validate();
    model_config(100).validate();
    group_beam().validate();
  }

  losses::TokenLossConfig token_config() const { return {alpha, candidate_rule, epsilon}; }
  losses::SeqLossConfig seq_config() const { return {lambda, mu}; }
  sampling::GroupBeamConfig group_beam() const { return {b, num_groups, diversity_penalty, 0}; }

  model::ModelConfig model_config(std::size_t vocab_size) const {
    model::ModelConfig c;
    c.vocab_size = vocab_size;
    c.embedding_dim = embedding_dim;
    c.hidden_dim = hidden_dim;
    c.encoder_layers = encoder_layers;
    c.decoder_layers = decoder_layers;
    c.attention_heads = attention_heads;
    c.max_source_len = max_source_len;
    c.max_target_len = max_target_len;
    c.seed = seed;
    c.pooling = pooling;
    return c;
  }

  decoding::DecodeConfig eval_decode() const {
    decoding::DecodeConfig d;
    d.strategy = decoding::Strategy::kBeam;
    d.beam_size = eval_beam_size;
    return d;
  }
};

// Paper-scale values are the struct defaults; the desk profile shrinks the
// optimisation and mining budget for CPU runs.
inline TrainConfig paper_profile() { return {}; }

inline TrainConfig desk_profile() {
  TrainConfig c;
  c.profile = "desk";
  c.learning_rate = 1e-3;
  c.batch_size = 8;
  c.b = 8;
  c.m = 4;
  c.num_groups = 8;
  c.max_epochs = 15;
  c.eval_examples = 100;
  return c;
}

inline TrainConfig profile_config(const std::string& name) {
  if (name == "paper") return paper_profile();
  if (name == "desk") return desk_profile();
  throw ConfigError("unknown profile: " + name + " (expected paper or desk)");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"profile", c.profile},
          {"objective", to_string(c.objective)},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"seed", c.seed},
          {"alpha", c.alpha},
          {"lambda", c.lambda},
          {"mu", c.mu},
          {"b", c.b},
          {"m", c.m},
          {"num_groups", c.num_groups},
          {"diversity_penalty", c.diversity_penalty},
          {"candidate_rule", losses::to_string(c.candidate_rule)},
          {"epsilon", c.epsilon},
          {"init_from_degenerator", c.init_from_degenerator},
          {"embedding_dim", c.embedding_dim},
          {"hidden_dim", c.hidden_dim},
          {"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers},
          {"attention_heads", c.attention_heads},
          {"max_source_len", c.max_source_len},
          {"max_target_len", c.max_target_len},
          {"pooling", model::to_string(c.pooling)},
          {"eval_beam_size", c.eval_beam_size},
          {"eval_examples", c.eval_examples},
          {"eval_each_epoch", c.eval_each_epoch},
          {"deterministic", c.deterministic}};
}

namespace detail {

template <class T>
T get_as(const nlohmann::json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("bad value for config key '" + key + "': " + v.dump());
  }
}

}  // namespace detail

// Starts from the named profile (default "paper") and applies every other
// key. Unknown keys are errors.
inline TrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a key/value object");
  TrainConfig c = profile_config(j.contains("profile") ? detail::get_as<std::string>(j.at("profile"), "profile") : "paper");
  for (const auto& [key, v] : j.items()) {
    using detail::get_as;
    if (key == "profile") continue;
    else if (key == "objective") c.objective = objective_from_string(get_as<std::string>(v, key));
    else if (key == "learning_rate") c.learning_rate = get_as<double>(v, key);
    else if (key == "batch_size") c.batch_size = get_as<std::size_t>(v, key);
    else if (key == "max_epochs") c.max_epochs = get_as<std::size_t>(v, key);
    else if (key == "patience") c.patience = get_as<std::size_t>(v, key);
    else if (key == "seed") c.seed = get_as<std::uint64_t>(v, key);
    else if (key == "alpha") c.alpha = get_as<double>(v, key);
    else if (key == "lambda") c.lambda = get_as<double>(v, key);
    else if (key == "mu") c.mu = get_as<double>(v, key);
    else if (key == "b") c.b = get_as<std::size_t>(v, key);
    else if (key == "m") c.m = get_as<std::size_t>(v, key);
    else if (key == "num_groups") c.num_groups = get_as<std::size_t>(v, key);
    else if (key == "diversity_penalty") c.diversity_penalty = get_as<double>(v, key);
    else if (key == "candidate_rule") c.candidate_rule = losses::candidate_rule_from_string(get_as<std::string>(v, key));
    else if (key == "epsilon") c.epsilon = get_as<double>(v, key);
    else if (key == "init_from_degenerator") c.init_from_degenerator = get_as<bool>(v, key);
    else if (key == "embedding_dim") c.embedding_dim = get_as<std::size_t>(v, key);
    else if (key == "hidden_dim") c.hidden_dim = get_as<std::size_t>(v, key);
    else if (key == "encoder_layers") c.encoder_layers = get_as<std::size_t>(v, key);
    else if (key == "decoder_layers") c.decoder_layers = get_as<std::size_t>(v, key);
    else if (key == "attention_heads") c.attention_heads = get_as<std::size_t>(v, key);
    else if (key == "max_source_len") c.max_source_len = get_as<std::size_t>(v, key);
    else if (key == "max_target_len") c.max_target_len = get_as<std::size_t>(v, key);
    else if (key == "pooling") c.pooling = model::pooling_from_string(get_as<std::string>(v, key));
    else if (key == "eval_beam_size") c.eval_beam_size = get_as<std::size_t>(v, key);
    else if (key == "eval_examples") c.eval_examples = get_as<std::size_t>(v, key);
    else if (key == "eval_each_epoch") c.eval_each_epoch = get_as<bool>(v, key);
    else if (key == "deterministic") c.deterministic = get_as<bool>(v, key);
    else throw ConfigError("unknown config key: " + key);
  }
  c.validate();
  return c;
}

// Flat TOML subset: `key = value` lines, '#' comments, quoted strings,
// integers, floats and booleans. Tables are not supported.
inline nlohmann::json parse_flat_toml(const std::string& text) {
  nlohmann::json out = nlohmann::json::object();
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') throw ParseError("tables are not supported in config files", lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", lineno);
    const std::string key = trim(line.substr(0, eq));
    const std::string raw = trim(line.substr(eq + 1));
    if (key.empty() || raw.empty()) throw ParseError("expected key = value", lineno);
    if (out.contains(key)) throw ParseError("duplicate key " + key, lineno);
    if (raw.front() == '"') {
      if (raw.size() < 2 || raw.back() != '"') throw ParseError("unterminated string", lineno);
      out[key] = raw.substr(1, raw.size() - 2);
    } else if (raw == "true" || raw == "false") {
      out[key] = raw == "true";
    } else {
      std::string num;
      for (char ch : raw)
        if (ch != '_') num += ch;
      try {
        out[key] = nlohmann::json::parse(num);
      } catch (const nlohmann::json::exception&) {
        throw ParseError("bad value for " + key + ": " + raw, lineno);
      }
      if (!out[key].is_number()) throw ParseError("bad value for " + key + ": " + raw, lineno);
    }
  }
  return out;
}

// JSON when the first non-space character is '{', flat TOML otherwise.
inline TrainConfig parse_config_text(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad JSON config: ") + e.what());
    }
    return config_from_json(j);
  }
  return config_from_json(parse_flat_toml(text));
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

class Adam {
 public:
  Adam(const model::Seq2SeqModel& m, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : m.parameters()) {
      m_.push_back(ad::Matrix::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(ad::Matrix::Zero(p.value.rows(), p.value.cols()));
    }
  }

  // grads[i] may be empty when parameter i took no part in the loss.
  void step(model::Seq2SeqModel& model, const std::vector<ad::Matrix>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (grads[i].size() == 0) continue;
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
      params[i].value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<ad::Matrix> m_, v_;
};

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

struct TraceEntry {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double mle = 0.0;
  double token_penalty = 0.0;  // alpha * penalty, batch mean
  double token = 0.0;          // mle + token_penalty
  double seq = 0.0;
  double final_loss = 0.0;     // token + lambda * seq
  std::size_t n_candidates_skipped = 0;
};

inline nlohmann::json to_json(const TraceEntry& e) {
  return {{"step", e.step}, {"epoch", e.epoch}, {"mle", e.mle}, {"token_penalty", e.token_penalty},
          {"token", e.token}, {"seq", e.seq},   {"final", e.final_loss},
          {"n_candidates_skipped", e.n_candidates_skipped}};
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  std::optional<double> valid_pod;
  std::optional<double> valid_kud;
};

inline nlohmann::json to_json(const EpochRecord& e) {
  nlohmann::json j{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"valid_loss", e.valid_loss}};
  j["valid_pod"] = e.valid_pod ? nlohmann::json(*e.valid_pod) : nlohmann::json();
  j["valid_kud"] = e.valid_kud ? nlohmann::json(*e.valid_kud) : nlohmann::json();
  return j;
}

struct RunRecord {
  std::string phase;  // "degenerator" or "model"
  TrainConfig config;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_valid_loss = std::numeric_limits<double>::infinity();
  std::string best_checkpoint;
  std::string degenerator_hash;
  std::size_t mined_examples = 0;
  std::size_t negative_shortfall = 0;
  std::vector<TraceEntry> trace;
};

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json j;
  j["phase"] = r.phase;
  j["objective"] = to_string(r.config.objective);
  j["config"] = to_json(r.config);
  j["loss_reduction"] = "sum over tokens, mean over batch";
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : r.epochs) j["epochs"].push_back(to_json(e));
  j["best_epoch"] = r.best_epoch;
  j["best_valid_loss"] = r.best_valid_loss;
  j["best_checkpoint"] = r.best_checkpoint;
  j["degenerator_hash"] = r.degenerator_hash;
  j["mined_examples"] = r.mined_examples;
  j["negative_shortfall"] = r.negative_shortfall;
  j["loss_trace"] = nlohmann::json::array();
  for (const auto& e : r.trace) j["loss_trace"].push_back(to_json(e));
  return j;
}

inline std::string trace_jsonl(const RunRecord& r) {
  std::string out;
  for (const auto& e : r.trace) {
    out += to_json(e).dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct PreparedExample {
  const DialogueExample* example = nullptr;
  model::SourceInput source;
  IdSeq target;
  std::vector<TokenId> knowledge;  // unique ids on gold-knowledge positions
  IdSeq gold;                      // gold knowledge, in order
};

inline std::vector<PreparedExample> prepare(const Corpus& corpus, const Vocabulary& vocab, const model::ModelConfig& mc) {
  std::vector<PreparedExample> out;
  out.reserve(corpus.size());
  for (const auto& ex : corpus.examples) {
    PreparedExample p;
    p.example = &ex;
    p.source = model::build_source(ex, vocab, mc.max_source_len);
    p.target = model::build_target(ex.response, vocab, mc.max_target_len);
    p.knowledge = model::knowledge_ids(p.source);
    p.gold = vocab.encode(ex.gold_knowledge());
    out.push_back(std::move(p));
  }
  return out;
}

struct BatchLoss {
  ad::Var loss;  // batch objective
  TraceEntry parts;
};

struct TrainOptions {
  std::function<void(const std::string&)> log;  // progress lines, optional
  std::filesystem::path negative_cache;          // empty: in-memory only
  std::filesystem::path checkpoint_out;          // empty: keep in memory
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, const Vocabulary& vocab) : cfg_(std::move(cfg)), vocab_(vocab) { cfg_.validate(); }

  const TrainConfig& config() const { return cfg_; }

  // Phase 1. MLE with early stopping; the returned checkpoint is frozen.
  model::Checkpoint train_degenerator(const Corpus& train, const Corpus& valid, RunRecord* record = nullptr,
                                      const TrainOptions& opts = {}) {
    TrainConfig c = cfg_;
    c.objective = Objective::kMle;
    model::Seq2SeqModel m(c.model_config(vocab_.size()));
    RunRecord r = run(c, m, nullptr, train, valid, opts);
    r.phase = "degenerator";
    model::Checkpoint ck{std::move(m), vocab_, true, checkpoint_metadata(r)};
    finish(ck, r, opts);
    if (record) *record = std::move(r);
    return ck;
  }

  // Phase 2 (or a single-phase mle/nt run when degenerator is null).
  model::Checkpoint train_model(const Corpus& train, const Corpus& valid, const model::Checkpoint* degenerator,
                                RunRecord* record = nullptr, const TrainOptions& opts = {}) {
    if (cfg_.objective == Objective::kMacl && cfg_.lambda > 0.0) {
      if (!degenerator) throw ConfigError("objective macl with lambda > 0 needs a degenerator");
      if (!degenerator->frozen) throw ConfigError("degenerator checkpoint is not frozen");
    }
    if (degenerator && degenerator->vocab.hash() != vocab_.hash())
      throw VocabularyError("degenerator vocabulary does not match the corpus vocabulary");
    const bool warm = degenerator && cfg_.objective == Objective::kMacl && cfg_.init_from_degenerator;
    model::Seq2SeqModel m = warm ? degenerator->model : model::Seq2SeqModel(cfg_.model_config(vocab_.size()));
    RunRecord r = run(cfg_, m, degenerator, train, valid, opts);
    r.phase = "model";
    model::Checkpoint ck{std::move(m), vocab_, false, checkpoint_metadata(r)};
    finish(ck, r, opts);
    if (record) *record = std::move(r);
    return ck;
  }

  // Objective on one batch. Shared by training and validation.
  BatchLoss batch_loss(model::ModelGraph& g, const TrainConfig& c, const std::vector<const PreparedExample*>& batch,
                       const std::vector<const std::vector<sampling::ScoredNegative>*>& negatives,
                       macl::detail::Rng* rng) const {
    ad::Tape& tape = g.tape();
    const bool use_seq = c.objective == Objective::kMacl && c.lambda > 0.0;
    std::vector<model::StepDistributions> sd;
    sd.reserve(batch.size());
    std::vector<ad::Var> token_terms, seq_terms;
    BatchLoss out;
    double mle_sum = 0.0, pen_sum = 0.0, seq_sum = 0.0;
    for (const auto* ex : batch) {
      sd.push_back(g.forward_teacher_forced(ex->source, ex->target));
      const auto& s = sd.back();
      switch (c.objective) {
        case Objective::kMle: {
          auto l = losses::mle_loss(s.probs, ex->target);
          mle_sum += l.scalar();
          token_terms.push_back(l);
          break;
        }
        case Objective::kNt: {
          auto r = losses::ul_loss_baseline(s.probs, ex->target, ex->source.ids, c.alpha, c.epsilon);
          mle_sum += r.mle.scalar();
          pen_sum += c.alpha * r.penalty.scalar();
          token_terms.push_back(r.loss);
          break;
        }
        case Objective::kMacl: {
          auto r = losses::token_contrastive_loss(s.probs, ex->target, ex->knowledge, c.token_config(), rng);
          mle_sum += r.mle.scalar();
          pen_sum += c.alpha * r.penalty.scalar();
          out.parts.n_candidates_skipped += r.skipped;
          token_terms.push_back(r.loss);
          break;
        }
      }
    }
    if (use_seq) {
      for (std::size_t i = 0; i < batch.size(); ++i) {
        std::vector<ad::Var> in_batch, hard;
        for (std::size_t j = 0; j < batch.size(); ++j)
          if (j != i) in_batch.push_back(sd[j].target_pooled);
        if (negatives[i])
          for (const auto& n : *negatives[i]) {
            IdSeq t = n.tokens;
            if (t.size() + 1 > c.max_target_len) t.resize(c.max_target_len - 1);
            t.push_back(Vocabulary::kEos);
            hard.push_back(g.target_representation(sd[i].source_states, t));
          }
        auto l = losses::infonce_seq_loss(sd[i].source_pooled, sd[i].target_pooled, in_batch, hard, c.seq_config());
        seq_sum += l.scalar();
        seq_terms.push_back(l);
      }
    }
    const double k = static_cast<double>(batch.size());
    auto token_mean = ad::scale(ad::add_scalars(tape, token_terms), 1.0 / k);
    if (use_seq) {
      auto seq_mean = ad::scale(ad::add_scalars(tape, seq_terms), 1.0 / k);
      out.loss = losses::final_loss(token_mean, seq_mean, c.lambda);
    } else {
      out.loss = token_mean;
    }
    out.parts.mle = mle_sum / k;
    out.parts.token_penalty = pen_sum / k;
    out.parts.token = token_mean.scalar();
    out.parts.seq = seq_sum / k;
    out.parts.final_loss = out.loss.scalar();
    if (!std::isfinite(out.parts.final_loss))
      throw NumericError("non-finite loss (mle " + std::to_string(out.parts.mle) + ", penalty " +
                         std::to_string(out.parts.token_penalty) + ", seq " + std::to_string(out.parts.seq) + ")");
    return out;
  }

 private:
  nlohmann::json checkpoint_metadata(const RunRecord& r) const {
    return {{"phase", r.phase},
            {"objective", to_string(r.config.objective)},
            {"best_epoch", r.best_epoch},
            {"degenerator_hash", r.degenerator_hash},
            {"loss_reduction", "sum over tokens, mean over batch"}};
  }

  void finish(model::Checkpoint& ck, RunRecord& r, const TrainOptions& opts) const {
    if (!opts.checkpoint_out.empty()) {
      r.best_checkpoint = opts.checkpoint_out.string();
      model::save_checkpoint(ck, opts.checkpoint_out);
    }
  }

  const std::vector<sampling::ScoredNegative>* negatives_for(const PreparedExample& ex, const model::Checkpoint& degen,
                                                             sampling::NegativeCache& cache, RunRecord& r) const {
    if (const auto* hit = cache.find(ex.example->example_id)) return hit;
    auto pool = sampling::mine_hard_negatives(degen.model, vocab_, *ex.example, cfg_.group_beam(), cfg_.m);
    r.mined_examples += 1;
    r.negative_shortfall += pool.shortfall;
    cache.put(ex.example->example_id, std::move(pool.retained));
    return cache.find(ex.example->example_id);
  }

  RunRecord run(const TrainConfig& c, model::Seq2SeqModel& m, const model::Checkpoint* degen, const Corpus& train,
                const Corpus& valid, const TrainOptions& opts) const {
    if (train.examples.empty()) throw ValidationError("training split is empty");
    if (valid.examples.empty()) throw ValidationError("validation split is empty");
    const auto mc = m.config();
    const auto train_ex = prepare(train, vocab_, mc);
    const auto valid_ex = prepare(valid, vocab_, mc);
    const bool use_seq = c.objective == Objective::kMacl && c.lambda > 0.0;

    RunRecord r;
    r.config = c;
    std::optional<sampling::NegativeCache> cache;
    if (use_seq) {
      r.degenerator_hash = degen->model.hash();
      if (!opts.negative_cache.empty() && std::filesystem::exists(opts.negative_cache))
        cache = sampling::NegativeCache::load(opts.negative_cache, vocab_, r.degenerator_hash);
      else
        cache.emplace(r.degenerator_hash);
    }
    auto log = [&](const std::string& s) {
      if (opts.log) opts.log(s);
    };

    Adam adam(m, c.learning_rate);
    macl::detail::Rng loss_rng(macl::detail::splitmix64(c.seed ^ 0x6c6f7373ULL));
    std::vector<model::Parameter> best = m.parameters();
    std::size_t since_best = 0, step = 0;

    auto negatives_of = [&](const std::vector<const PreparedExample*>& batch) {
      std::vector<const std::vector<sampling::ScoredNegative>*> negs(batch.size(), nullptr);
      if (use_seq)
        for (std::size_t i = 0; i < batch.size(); ++i) negs[i] = negatives_for(*batch[i], *degen, *cache, r);
      return negs;
    };

    for (std::size_t epoch = 1; epoch <= c.max_epochs; ++epoch) {
      std::vector<std::size_t> order(train_ex.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      macl::detail::Rng shuffle(macl::detail::splitmix64(c.seed * 1000003ULL + epoch));
      shuffle.shuffle(order);

      double train_sum = 0.0;
      std::size_t n_batches = 0;
      for (std::size_t start = 0; start < order.size(); start += c.batch_size) {
        std::vector<const PreparedExample*> batch;
        for (std::size_t i = start; i < std::min(order.size(), start + c.batch_size); ++i)
          batch.push_back(&train_ex[order[i]]);
        const auto negs = negatives_of(batch);
        ad::Tape tape(true);
        model::ModelGraph g(m, tape);
        auto bl = batch_loss(g, c, batch, negs, &loss_rng);
        tape.backward(bl.loss);
        std::vector<ad::Matrix> grads(m.parameters().size());
        tape.for_each_parameter_grad([&](std::size_t slot, const ad::Matrix& gr) {
          if (grads[slot].size() == 0) grads[slot] = gr;
          else grads[slot] += gr;
        });
        for (const auto& gr : grads)
          if (gr.size() != 0 && !gr.allFinite()) throw NumericError("non-finite gradient at step " + std::to_string(step + 1));
        adam.step(m, grads);
        bl.parts.step = ++step;
        bl.parts.epoch = epoch;
        r.trace.push_back(bl.parts);
        train_sum += bl.parts.final_loss;
        ++n_batches;
      }

      EpochRecord er;
      er.epoch = epoch;
      er.train_loss = train_sum / static_cast<double>(n_batches);
      er.valid_loss = validation_loss(c, m, valid_ex, negatives_of);
      if (c.eval_each_epoch) {
        Corpus sub;
        sub.split = valid.split;
        const std::size_t n = c.eval_examples == 0 ? valid.size() : std::min(valid.size(), c.eval_examples);
        sub.examples.assign(valid.examples.begin(), valid.examples.begin() + static_cast<std::ptrdiff_t>(n));
        const auto gens = decoding::decode_corpus(m, vocab_, sub, c.eval_decode());
        const auto rep = metrics::build_report(sub, gens);
        er.valid_pod = rep.generated.pod;
        er.valid_kud = rep.kud;
      }
      r.epochs.push_back(er);
      std::ostringstream msg;
      msg << "epoch " << epoch << " train " << er.train_loss << " valid " << er.valid_loss;
      if (er.valid_pod) msg << " pod " << *er.valid_pod << " kud " << *er.valid_kud;
      log(msg.str());

      if (er.valid_loss < r.best_valid_loss) {
        r.best_valid_loss = er.valid_loss;
        r.best_epoch = epoch;
        best = m.parameters();
        since_best = 0;
      } else if (++since_best >= c.patience) {
        log("early stop after epoch " + std::to_string(epoch));
        break;
      }
    }
    m.parameters() = std::move(best);
    if (cache && !opts.negative_cache.empty()) cache->save(opts.negative_cache, vocab_);
    return r;
  }

  template <class NegFn>
  double validation_loss(const TrainConfig& c, const model::Seq2SeqModel& m, const std::vector<PreparedExample>& ex,
                         NegFn&& negatives_of) const {
    // Fixed candidate draws keep validation comparable across epochs.
    macl::detail::Rng rng(macl::detail::splitmix64(c.seed ^ 0x76616c6964ULL));
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t start = 0; start < ex.size(); start += c.batch_size) {
      std::vector<const PreparedExample*> batch;
      for (std::size_t i = start; i < std::min(ex.size(), start + c.batch_size); ++i) batch.push_back(&ex[i]);
      ad::Tape tape(false);
      model::ModelGraph g(m, tape);
      const auto negs = negatives_of(batch);
      sum += batch_loss(g, c, batch, negs, &rng).parts.final_loss * static_cast<double>(batch.size());
      n += batch.size();
    }
    return sum / static_cast<double>(n);
  }

  TrainConfig cfg_;
  Vocabulary vocab_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline metrics::MetricsReport evaluate_run(const model::Seq2SeqModel& m, const Vocabulary& vocab, const Corpus& split,
                                           const decoding::DecodeConfig& cfg, const Corpus& references,
                                           std::vector<GenerationRecord>* generations = nullptr) {
  auto gens = decoding::decode_corpus(m, vocab, split, cfg);
  auto rep = metrics::build_report(references, gens);
  if (generations) *generations = std::move(gens);
  return rep;
}

inline std::vector<decoding::DecodeConfig> default_sweep(std::uint64_t seed = 1) {
  std::vector<decoding::DecodeConfig> out(4);
  out[0].strategy = decoding::Strategy::kBeam;
  out[0].beam_size = 3;
  out[1].strategy = decoding::Strategy::kBeam;
  out[1].beam_size = 5;
  out[2].strategy = decoding::Strategy::kGreedy;
  out[3].strategy = decoding::Strategy::kNucleus;
  out[3].nucleus_p = 0.9;
  for (auto& c : out) c.seed = seed;
  return out;
}

struct SweepRow {
  std::string decode;
  metrics::MetricsReport report;
};

inline std::vector<SweepRow> evaluate_sweep(const model::Seq2SeqModel& m, const Vocabulary& vocab, const Corpus& split,
                                            const Corpus& references, const std::vector<decoding::DecodeConfig>& sweep) {
  std::vector<SweepRow> rows;
  for (const auto& c : sweep) rows.push_back({c.name(), evaluate_run(m, vocab, split, c, references)});
  return rows;
}

}  // namespace macl::trainer
