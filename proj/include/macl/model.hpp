#pragma once

// A small pre-LayerNorm transformer encoder-decoder.
//
// Training goes through the autodiff tape (ModelGraph). Inference goes
// through SourceEncoding + DecoderState, which cache the encoder output and
// the per-layer self-attention keys/values so each decode step costs one row.
// Both paths evaluate the same arithmetic; decode_step() matches the
// teacher-forced row to rounding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "macl/autodiff.hpp"
#include "macl/corpus.hpp"
#include "macl/error.hpp"
#include "macl/io.hpp"

namespace macl::model {

using ad::Matrix;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

enum class Pooling { kMean, kMax, kFirst };

inline std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::kMean: return "mean";
    case Pooling::kMax: return "max";
    case Pooling::kFirst: return "first";
  }
  return "mean";
}

inline Pooling pooling_from_string(const std::string& s) {
  if (s == "mean") return Pooling::kMean;
  if (s == "max") return Pooling::kMax;
  if (s == "first") return Pooling::kFirst;
  throw ConfigError("unknown pooling: " + s);
}

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embedding_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t attention_heads = 4;
  std::size_t max_source_len = 64;
  std::size_t max_target_len = 32;  // decoder positions, EOS included
  std::uint64_t seed = 0;
  Pooling pooling = Pooling::kMean;

  std::size_t ffn_dim() const { return 2 * hidden_dim; }
  std::size_t head_dim() const { return hidden_dim / attention_heads; }

  void validate() const {
    if (vocab_size <= static_cast<std::size_t>(Vocabulary::kNumReserved)) throw ConfigError("vocab_size too small");
    if (embedding_dim == 0 || hidden_dim == 0 || attention_heads == 0 || encoder_layers == 0 || decoder_layers == 0)
      throw ConfigError("model dimensions must be positive");
    if (hidden_dim % attention_heads != 0) throw ConfigError("attention_heads must divide hidden_dim");
    if (max_source_len < 3 || max_target_len < 2) throw ConfigError("max lengths too small");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},         {"embedding_dim", c.embedding_dim},
          {"hidden_dim", c.hidden_dim},         {"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers}, {"attention_heads", c.attention_heads},
          {"max_source_len", c.max_source_len}, {"max_target_len", c.max_target_len},
          {"seed", c.seed},                     {"pooling", to_string(c.pooling)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.attention_heads = j.value("attention_heads", c.attention_heads);
  c.max_source_len = j.value("max_source_len", c.max_source_len);
  c.max_target_len = j.value("max_target_len", c.max_target_len);
  c.seed = j.value("seed", c.seed);
  c.pooling = pooling_from_string(j.value("pooling", std::string("mean")));
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Source construction
// ---------------------------------------------------------------------------

struct SourceInput {
  IdSeq ids;
  std::vector<bool> knowledge_mask;  // true exactly on gold-knowledge positions
};

// BOS u1 SEP u2 SEP ... SEP k EOS. Whole oldest turns are dropped first; if
// the newest turn alone still overflows, its oldest tokens go next.
inline SourceInput build_source(const DialogueExample& ex, const Vocabulary& vocab, std::size_t max_source_len) {
  const TokenSeq& k = ex.gold_knowledge();
  if (k.size() + 2 > max_source_len)
    throw ConfigError("gold knowledge of example " + ex.example_id + " (" + std::to_string(k.size()) +
                      " tokens) exceeds max_source_len " + std::to_string(max_source_len));
  std::size_t first_turn = 0;
  auto length_from = [&](std::size_t first) {
    std::size_t n = 2 + k.size();
    for (std::size_t i = first; i < ex.context_turns.size(); ++i) n += ex.context_turns[i].size() + 1;
    return n;
  };
  while (first_turn < ex.context_turns.size() && length_from(first_turn) > max_source_len) ++first_turn;

  SourceInput s;
  s.ids.push_back(Vocabulary::kBos);
  if (first_turn == ex.context_turns.size() && !ex.context_turns.empty() && first_turn > 0) {
    // Keep the tail of the newest turn.
    const TokenSeq& last = ex.context_turns.back();
    const std::size_t room = max_source_len > 3 + k.size() ? max_source_len - 3 - k.size() : 0;
    if (room > 0) {
      for (std::size_t i = last.size() - std::min(room, last.size()); i < last.size(); ++i)
        s.ids.push_back(vocab.id(last[i]));
      s.ids.push_back(Vocabulary::kSep);
    }
  } else {
    for (std::size_t i = first_turn; i < ex.context_turns.size(); ++i) {
      for (const auto& tok : ex.context_turns[i]) s.ids.push_back(vocab.id(tok));
      s.ids.push_back(Vocabulary::kSep);
    }
  }
  s.knowledge_mask.assign(s.ids.size(), false);
  for (const auto& tok : k) {
    s.ids.push_back(vocab.id(tok));
    s.knowledge_mask.push_back(true);
  }
  s.ids.push_back(Vocabulary::kEos);
  s.knowledge_mask.push_back(false);
  return s;
}

// Response ids followed by EOS, clipped to max_target_len.
inline IdSeq build_target(const TokenSeq& response, const Vocabulary& vocab, std::size_t max_target_len) {
  IdSeq t = vocab.encode(response);
  if (t.size() + 1 > max_target_len) t.resize(max_target_len - 1);
  t.push_back(Vocabulary::kEos);
  return t;
}

// Unique ids of the gold knowledge, ascending.
inline std::vector<TokenId> knowledge_ids(const SourceInput& src) {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < src.ids.size(); ++i)
    if (src.knowledge_mask[i]) out.push_back(src.ids[i]);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Parameter {
  std::string name;
  Matrix value;
};

struct AttentionParams {
  std::size_t wq, wk, wv, wo, bo;
};
struct FfnParams {
  std::size_t w1, b1, w2, b2;
};
struct NormParams {
  std::size_t gamma, beta;
};
struct EncoderLayerParams {
  NormParams ln_attn;
  AttentionParams attn;
  NormParams ln_ffn;
  FfnParams ffn;
};
struct DecoderLayerParams {
  NormParams ln_self;
  AttentionParams self_attn;
  NormParams ln_cross;
  AttentionParams cross_attn;
  NormParams ln_ffn;
  FfnParams ffn;
};

// Output of the teacher-forced forward pass: per-step next-token
// distributions and pooled encoder/decoder representations.
struct StepDistributions {
  ad::Var probs;           // T x V
  ad::Var source_pooled;   // 1 x H
  ad::Var target_pooled;   // 1 x H
  ad::Var target_hidden;   // T x H
  ad::Var source_states;   // S x H encoder output
  bool differentiable = false;
};

class Seq2SeqModel;

// Binds a model's parameters onto one tape.
class ModelGraph {
 public:
  ModelGraph(const Seq2SeqModel& model, ad::Tape& tape);

  ad::Tape& tape() { return *tape_; }
  ad::Var encode(const IdSeq& source);                          // S x H
  ad::Var decode_hidden(ad::Var memory, const IdSeq& decoder_input);  // T x H
  ad::Var logits(ad::Var hidden);                               // T x V
  ad::Var pool(ad::Var states);                                 // 1 x H

  StepDistributions forward_teacher_forced(const SourceInput& source, const IdSeq& target);
  // Pooled decoder representation of `target` given an encoded source.
  ad::Var target_representation(ad::Var memory, const IdSeq& target);

 private:
  ad::Var p(std::size_t slot) { return params_[slot]; }
  ad::Var attention(const AttentionParams& a, ad::Var query_in, ad::Var kv_in, bool causal);
  ad::Var ffn(const FfnParams& f, ad::Var x);
  ad::Var norm(const NormParams& n, ad::Var x);
  ad::Var embed(const IdSeq& ids, std::size_t pos_slot);

  const Seq2SeqModel* model_;
  ad::Tape* tape_;
  std::vector<ad::Var> params_;
};

// Cached encoder output for inference.
struct SourceEncoding {
  IdSeq ids;
  Matrix states;                     // S x H
  std::vector<bool> attention_mask;  // all true: sources are never padded
  std::vector<bool> knowledge_token_mask;
  std::vector<Matrix> cross_k, cross_v;  // per decoder layer, S x H
};

// Incremental decoder state: self-attention keys/values per layer.
struct DecoderState {
  std::vector<Matrix> self_k, self_v;  // per decoder layer, t x H
  std::size_t length = 0;
};

class Seq2SeqModel {
 public:
  Seq2SeqModel() = default;
  explicit Seq2SeqModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
    initialize();
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void check_ids(const IdSeq& ids) const {
    for (TokenId id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
        throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(cfg_.vocab_size));
  }

  SourceEncoding encode(const SourceInput& source) const {
    ad::Tape tape(false);
    ModelGraph g(*this, tape);
    SourceEncoding enc;
    enc.ids = source.ids;
    enc.states = g.encode(source.ids).value();
    enc.attention_mask.assign(source.ids.size(), true);
    enc.knowledge_token_mask = source.knowledge_mask;
    for (const auto& layer : dec_) {
      enc.cross_k.push_back(enc.states * params_[layer.cross_attn.wk].value);
      enc.cross_v.push_back(enc.states * params_[layer.cross_attn.wv].value);
    }
    return enc;
  }

  DecoderState start_state() const {
    DecoderState s;
    s.self_k.assign(dec_.size(), Matrix(0, static_cast<Eigen::Index>(cfg_.hidden_dim)));
    s.self_v.assign(dec_.size(), Matrix(0, static_cast<Eigen::Index>(cfg_.hidden_dim)));
    return s;
  }

  // Feeds one decoder input token and returns the next-token distribution.
  RowVec step(const SourceEncoding& enc, DecoderState& state, TokenId input) const;

  // Distribution after `prefix` (which starts with BOS).
  RowVec decode_step(const SourceEncoding& enc, const IdSeq& prefix) const {
    if (prefix.empty() || prefix.front() != Vocabulary::kBos) throw ValidationError("prefix must begin with BOS");
    if (prefix.size() > cfg_.max_target_len)
      throw LengthError("prefix length " + std::to_string(prefix.size()) + " exceeds max_target_len " +
                        std::to_string(cfg_.max_target_len));
    check_ids(prefix);
    DecoderState s = start_state();
    RowVec out;
    for (TokenId t : prefix) out = step(enc, s, t);
    return out;
  }

  // Parameter fingerprint (names, shapes and exact bits).
  std::string hash() const {
    io::Fnv1a h;
    h.update(to_json(cfg_).dump());
    for (const auto& p : params_) {
      h.update(p.name);
      h.update_u64(static_cast<std::uint64_t>(p.value.rows()));
      h.update_u64(static_cast<std::uint64_t>(p.value.cols()));
      h.update(std::string_view(reinterpret_cast<const char*>(p.value.data()),
                                static_cast<std::size_t>(p.value.size()) * sizeof(double)));
    }
    return h.hex();
  }

 private:
  friend class ModelGraph;

  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    params_.push_back({std::move(name), Matrix::Zero(rows, cols)});
    return params_.size() - 1;
  }
  AttentionParams add_attention(const std::string& prefix) {
    const auto h = static_cast<Eigen::Index>(cfg_.hidden_dim);
    return {add(prefix + ".wq", h, h), add(prefix + ".wk", h, h), add(prefix + ".wv", h, h),
            add(prefix + ".wo", h, h), add(prefix + ".bo", 1, h)};
  }
  FfnParams add_ffn(const std::string& prefix) {
    const auto h = static_cast<Eigen::Index>(cfg_.hidden_dim);
    const auto f = static_cast<Eigen::Index>(cfg_.ffn_dim());
    return {add(prefix + ".w1", h, f), add(prefix + ".b1", 1, f), add(prefix + ".w2", f, h), add(prefix + ".b2", 1, h)};
  }
  NormParams add_norm(const std::string& prefix) {
    const auto h = static_cast<Eigen::Index>(cfg_.hidden_dim);
    return {add(prefix + ".gamma", 1, h), add(prefix + ".beta", 1, h)};
  }

  void build() {
    const auto v = static_cast<Eigen::Index>(cfg_.vocab_size);
    const auto e = static_cast<Eigen::Index>(cfg_.embedding_dim);
    const auto h = static_cast<Eigen::Index>(cfg_.hidden_dim);
    tok_emb_ = add("tok_emb", v, e);
    in_proj_ = add("in_proj", e, h);
    in_bias_ = add("in_bias", 1, h);
    enc_pos_ = add("enc_pos", static_cast<Eigen::Index>(cfg_.max_source_len), h);
    dec_pos_ = add("dec_pos", static_cast<Eigen::Index>(cfg_.max_target_len), h);
    for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) {
      const std::string pre = "enc" + std::to_string(l);
      EncoderLayerParams p;
      p.ln_attn = add_norm(pre + ".ln_attn");
      p.attn = add_attention(pre + ".attn");
      p.ln_ffn = add_norm(pre + ".ln_ffn");
      p.ffn = add_ffn(pre + ".ffn");
      enc_.push_back(p);
    }
    enc_norm_ = add_norm("enc.ln_final");
    for (std::size_t l = 0; l < cfg_.decoder_layers; ++l) {
      const std::string pre = "dec" + std::to_string(l);
      DecoderLayerParams p;
      p.ln_self = add_norm(pre + ".ln_self");
      p.self_attn = add_attention(pre + ".self");
      p.ln_cross = add_norm(pre + ".ln_cross");
      p.cross_attn = add_attention(pre + ".cross");
      p.ln_ffn = add_norm(pre + ".ln_ffn");
      p.ffn = add_ffn(pre + ".ffn");
      dec_.push_back(p);
    }
    dec_norm_ = add_norm("dec.ln_final");
    out_proj_ = add("out_proj", h, e);
    out_bias_ = add("out_bias", 1, v);
  }

  void initialize() {
    macl::detail::Rng rng(macl::detail::splitmix64(cfg_.seed ^ 0x6d61636cULL));
    for (auto& p : params_) {
      const auto& n = p.name;
      auto ends_with = [&](const char* suf) {
        const std::string s(suf);
        return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
      };
      if (ends_with(".gamma")) {
        p.value.setOnes();
      } else if (ends_with(".beta") || ends_with(".bo") || ends_with(".b1") || ends_with(".b2") || n == "in_bias" ||
                 n == "out_bias") {
        p.value.setZero();
      } else {
        double std;
        if (n == "tok_emb") std = 1.0 / std::sqrt(static_cast<double>(cfg_.embedding_dim));
        else if (n == "enc_pos" || n == "dec_pos") std = 0.1;
        else std = 1.0 / std::sqrt(static_cast<double>(p.value.rows()));
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = std * rng.normal();
      }
    }
  }

  // Row-wise helpers for the inference path.
  static RowVec layer_norm_row(const RowVec& x, const Matrix& gamma, const Matrix& beta) {
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + ad::kLayerNormEps);
    return (((x.array() - mu) * inv) * gamma.row(0).array() + beta.row(0).array()).matrix();
  }
  RowVec attend_row(const AttentionParams& a, const RowVec& q_in, const Matrix& keys, const Matrix& values) const {
    const RowVec q = q_in * params_[a.wq].value;
    const auto heads = static_cast<Eigen::Index>(cfg_.attention_heads);
    const auto dh = static_cast<Eigen::Index>(cfg_.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    RowVec concat(static_cast<Eigen::Index>(cfg_.hidden_dim));
    for (Eigen::Index hd = 0; hd < heads; ++hd) {
      RowVec scores = (q.segment(hd * dh, dh) * keys.middleCols(hd * dh, dh).transpose()) * scale;
      const double mx = scores.maxCoeff();
      RowVec w = (scores.array() - mx).exp().matrix();
      w /= w.sum();
      concat.segment(hd * dh, dh) = w * values.middleCols(hd * dh, dh);
    }
    return concat * params_[a.wo].value + params_[a.bo].value;
  }
  RowVec ffn_row(const FfnParams& f, const RowVec& x) const {
    RowVec hidden = (x * params_[f.w1].value + params_[f.b1].value).cwiseMax(0.0);
    return hidden * params_[f.w2].value + params_[f.b2].value;
  }

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::size_t tok_emb_ = 0, in_proj_ = 0, in_bias_ = 0, enc_pos_ = 0, dec_pos_ = 0, out_proj_ = 0, out_bias_ = 0;
  NormParams enc_norm_{}, dec_norm_{};
  std::vector<EncoderLayerParams> enc_;
  std::vector<DecoderLayerParams> dec_;
};

// ---------------------------------------------------------------------------
// ModelGraph
// ---------------------------------------------------------------------------

inline ModelGraph::ModelGraph(const Seq2SeqModel& model, ad::Tape& tape) : model_(&model), tape_(&tape) {
  params_.reserve(model.params_.size());
  for (std::size_t i = 0; i < model.params_.size(); ++i) params_.push_back(tape.parameter(model.params_[i].value, i));
}

inline ad::Var ModelGraph::norm(const NormParams& n, ad::Var x) { return ad::layer_norm(x, p(n.gamma), p(n.beta)); }

inline ad::Var ModelGraph::ffn(const FfnParams& f, ad::Var x) {
  auto h = ad::relu(ad::add_row(ad::matmul(x, p(f.w1)), p(f.b1)));
  return ad::add_row(ad::matmul(h, p(f.w2)), p(f.b2));
}

inline ad::Var ModelGraph::attention(const AttentionParams& a, ad::Var query_in, ad::Var kv_in, bool causal) {
  const auto& cfg = model_->cfg_;
  auto q = ad::matmul(query_in, p(a.wq));
  auto k = ad::matmul(kv_in, p(a.wk));
  auto v = ad::matmul(kv_in, p(a.wv));
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> heads;
  for (Eigen::Index hd = 0; hd < static_cast<Eigen::Index>(cfg.attention_heads); ++hd) {
    auto qh = ad::slice_cols(q, hd * dh, dh);
    auto kh = ad::slice_cols(k, hd * dh, dh);
    auto vh = ad::slice_cols(v, hd * dh, dh);
    auto w = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), scale), causal);
    heads.push_back(ad::matmul(w, vh));
  }
  auto concat = heads.size() == 1 ? heads[0] : ad::concat_cols(*tape_, heads);
  return ad::add_row(ad::matmul(concat, p(a.wo)), p(a.bo));
}

inline ad::Var ModelGraph::embed(const IdSeq& ids, std::size_t pos_slot) {
  model_->check_ids(ids);
  std::vector<Eigen::Index> rows(ids.begin(), ids.end());
  auto e = ad::gather_rows(p(model_->tok_emb_), rows);
  auto x = ad::add_row(ad::matmul(e, p(model_->in_proj_)), p(model_->in_bias_));
  std::vector<Eigen::Index> pos(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<Eigen::Index>(i);
  return ad::add(x, ad::top_rows(p(pos_slot), static_cast<Eigen::Index>(ids.size())));
}

inline ad::Var ModelGraph::encode(const IdSeq& source) {
  if (source.empty()) throw LengthError("empty source");
  if (source.size() > model_->cfg_.max_source_len)
    throw LengthError("source length " + std::to_string(source.size()) + " exceeds max_source_len");
  auto x = embed(source, model_->enc_pos_);
  for (const auto& layer : model_->enc_) {
    auto h = norm(layer.ln_attn, x);
    x = ad::add(x, attention(layer.attn, h, h, false));
    x = ad::add(x, ffn(layer.ffn, norm(layer.ln_ffn, x)));
  }
  return norm(model_->enc_norm_, x);
}

inline ad::Var ModelGraph::decode_hidden(ad::Var memory, const IdSeq& decoder_input) {
  if (decoder_input.empty()) throw LengthError("empty decoder input");
  if (decoder_input.size() > model_->cfg_.max_target_len)
    throw LengthError("target length " + std::to_string(decoder_input.size()) + " exceeds max_target_len");
  auto x = embed(decoder_input, model_->dec_pos_);
  for (const auto& layer : model_->dec_) {
    auto h = norm(layer.ln_self, x);
    x = ad::add(x, attention(layer.self_attn, h, h, true));
    x = ad::add(x, attention(layer.cross_attn, norm(layer.ln_cross, x), memory, false));
    x = ad::add(x, ffn(layer.ffn, norm(layer.ln_ffn, x)));
  }
  return norm(model_->dec_norm_, x);
}

inline ad::Var ModelGraph::logits(ad::Var hidden) {
  auto e = ad::matmul(hidden, p(model_->out_proj_));
  return ad::add_row(ad::matmul_nt(e, p(model_->tok_emb_)), p(model_->out_bias_));
}

inline ad::Var ModelGraph::pool(ad::Var states) {
  switch (model_->cfg_.pooling) {
    case Pooling::kMean: return ad::mean_rows(states);
    case Pooling::kMax: return ad::max_rows(states);
    case Pooling::kFirst: return ad::top_rows(states, 1);
  }
  return ad::mean_rows(states);
}

namespace detail {
inline IdSeq shift_right(const IdSeq& target) {
  IdSeq in;
  in.reserve(target.size());
  in.push_back(Vocabulary::kBos);
  for (std::size_t i = 0; i + 1 < target.size(); ++i) in.push_back(target[i]);
  return in;
}
}  // namespace detail

// Row t of probs is p(target[t] | source, BOS target[<t]).
inline StepDistributions ModelGraph::forward_teacher_forced(const SourceInput& source, const IdSeq& target) {
  if (target.empty()) throw LengthError("empty target");
  model_->check_ids(source.ids);
  model_->check_ids(target);
  auto memory = encode(source.ids);
  auto hidden = decode_hidden(memory, detail::shift_right(target));
  StepDistributions out;
  out.probs = ad::softmax_rows(logits(hidden));
  out.source_pooled = pool(memory);
  out.target_hidden = hidden;
  out.source_states = memory;
  out.target_pooled = pool(hidden);
  out.differentiable = tape_->grad_enabled();
  return out;
}

inline ad::Var ModelGraph::target_representation(ad::Var memory, const IdSeq& target) {
  return pool(decode_hidden(memory, detail::shift_right(target)));
}

// ---------------------------------------------------------------------------
// Inference step
// ---------------------------------------------------------------------------

inline RowVec Seq2SeqModel::step(const SourceEncoding& enc, DecoderState& state, TokenId input) const {
  if (state.length >= cfg_.max_target_len)
    throw LengthError("decoder length exceeds max_target_len " + std::to_string(cfg_.max_target_len));
  if (input < 0 || static_cast<std::size_t>(input) >= cfg_.vocab_size)
    throw VocabularyError("token id " + std::to_string(input) + " outside vocabulary");
  const auto pos = static_cast<Eigen::Index>(state.length);
  RowVec x = params_[tok_emb_].value.row(input) * params_[in_proj_].value + params_[in_bias_].value;
  x += params_[dec_pos_].value.row(pos);
  for (std::size_t l = 0; l < dec_.size(); ++l) {
    const auto& layer = dec_[l];
    RowVec h = layer_norm_row(x, params_[layer.ln_self.gamma].value, params_[layer.ln_self.beta].value);
    auto& K = state.self_k[l];
    auto& V = state.self_v[l];
    K.conservativeResize(pos + 1, Eigen::NoChange);
    V.conservativeResize(pos + 1, Eigen::NoChange);
    K.row(pos) = h * params_[layer.self_attn.wk].value;
    V.row(pos) = h * params_[layer.self_attn.wv].value;
    x += attend_row(layer.self_attn, h, K, V);
    h = layer_norm_row(x, params_[layer.ln_cross.gamma].value, params_[layer.ln_cross.beta].value);
    x += attend_row(layer.cross_attn, h, enc.cross_k[l], enc.cross_v[l]);
    h = layer_norm_row(x, params_[layer.ln_ffn.gamma].value, params_[layer.ln_ffn.beta].value);
    x += ffn_row(layer.ffn, h);
  }
  state.length += 1;
  const RowVec out = layer_norm_row(x, params_[dec_norm_.gamma].value, params_[dec_norm_.beta].value);
  RowVec logits = (out * params_[out_proj_].value) * params_[tok_emb_].value.transpose() + params_[out_bias_].value;
  const double mx = logits.maxCoeff();
  RowVec probs = (logits.array() - mx).exp().matrix();
  probs /= probs.sum();
  return probs;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "MACLCKPT\n";

struct Checkpoint {
  Seq2SeqModel model;
  Vocabulary vocab;
  bool frozen = false;
  nlohmann::json metadata = nlohmann::json::object();
};

// Layout: magic line, one JSON header line, then raw little-endian doubles
// for every parameter in header order.
inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["config"] = to_json(ck.model.config());
  header["vocab"] = ck.vocab.surfaces();
  header["vocab_hash"] = ck.vocab.hash();
  header["frozen"] = ck.frozen;
  header["metadata"] = ck.metadata;
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& p : ck.model.parameters()) shapes.push_back({p.name, p.value.rows(), p.value.cols()});
  header["parameters"] = shapes;
  std::string out(kCheckpointMagic);
  out += header.dump();
  out += '\n';
  for (const auto& p : ck.model.parameters())
    out.append(reinterpret_cast<const char*>(p.value.data()), static_cast<std::size_t>(p.value.size()) * sizeof(double));
  return out;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.compare(0, kCheckpointMagic.size(), kCheckpointMagic) != 0) throw ValidationError("not a checkpoint file");
  const auto eol = bytes.find('\n', kCheckpointMagic.size());
  if (eol == std::string::npos) throw ValidationError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(kCheckpointMagic.size(), eol - kCheckpointMagic.size()));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad checkpoint header: ") + e.what());
  }
  if (header.value("format_version", 0) != kCheckpointFormatVersion)
    throw ValidationError("unsupported checkpoint format version");
  Checkpoint ck;
  ck.vocab = Vocabulary::from_surfaces(header.at("vocab").get<std::vector<std::string>>());
  if (ck.vocab.hash() != header.at("vocab_hash").get<std::string>())
    throw VocabularyError("checkpoint vocabulary hash mismatch");
  ck.model = Seq2SeqModel(model_config_from_json(header.at("config")));
  if (ck.model.config().vocab_size != ck.vocab.size())
    throw VocabularyError("checkpoint vocabulary size differs from model vocab_size");
  ck.frozen = header.value("frozen", false);
  ck.metadata = header.value("metadata", nlohmann::json::object());
  const auto& shapes = header.at("parameters");
  auto& params = ck.model.parameters();
  if (shapes.size() != params.size()) throw ValidationError("checkpoint parameter count mismatch");
  std::size_t offset = eol + 1;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (shapes[i][0].get<std::string>() != params[i].name || shapes[i][1].get<Eigen::Index>() != params[i].value.rows() ||
        shapes[i][2].get<Eigen::Index>() != params[i].value.cols())
      throw ValidationError("checkpoint parameter layout mismatch at " + params[i].name);
    const std::size_t nbytes = static_cast<std::size_t>(params[i].value.size()) * sizeof(double);
    if (offset + nbytes > bytes.size()) throw ValidationError("truncated checkpoint parameters");
    std::memcpy(params[i].value.data(), bytes.data() + offset, nbytes);
    offset += nbytes;
  }
  if (offset != bytes.size()) throw ValidationError("trailing bytes in checkpoint");
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(io::read_file(path)); }

// Loading against a corpus vocabulary requires the same hash.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const Vocabulary& expected) {
  auto ck = load_checkpoint(path);
  if (ck.vocab.hash() != expected.hash())
    throw VocabularyError("checkpoint vocabulary " + ck.vocab.hash() + " does not match expected " + expected.hash());
  return ck;
}

inline std::string checkpoint_hash(const std::filesystem::path& path) {
  io::Fnv1a h;
  h.update(io::read_file(path));
  return h.hex();
}

}  // namespace macl::model
