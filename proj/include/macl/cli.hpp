#pragma once

// Command-line front end: synth, train, mine, decode, score, report.
// Exit codes: 0 success, 1 invalid input, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "macl/corpus.hpp"
#include "macl/decoding.hpp"
#include "macl/error.hpp"
#include "macl/io.hpp"
#include "macl/metrics.hpp"
#include "macl/model.hpp"
#include "macl/sampling.hpp"
#include "macl/trainer.hpp"

namespace macl::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitFailure = 2;

inline void write_json(const fs::path& path, const nlohmann::json& j) { io::write_file_atomic(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void ensure_dir(const fs::path& dir) {
  if (!dir.empty()) fs::create_directories(dir);
}

// Negative-pool cache location for a training corpus, if MACL_CACHE_DIR is set.
inline fs::path cache_path_for(const fs::path& corpus) {
  const char* dir = std::getenv("MACL_CACHE_DIR");
  if (!dir || !*dir) return {};
  return fs::path(dir) / (corpus.stem().string() + ".negatives.jsonl");
}

// --------------------------------------------------------------------------
// Report rendering
// --------------------------------------------------------------------------

struct NamedReport {
  std::string name;
  nlohmann::json report;  // metrics report JSON
};

// Accepts a score report or a run.json carrying an "evaluation" report.
inline nlohmann::json report_from_file(const nlohmann::json& j, const std::string& path) {
  if (j.contains("kud") && j.contains("generated")) return j;
  if (j.contains("evaluation") && j["evaluation"].is_object()) return j["evaluation"];
  throw ValidationError(path + " holds neither a metrics report nor an evaluated run");
}

inline std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

inline std::string render_table(const std::vector<NamedReport>& runs) {
  std::string md = "| run | PoD | PoD (ref) | KUD | mKP-1 | mKP-2 | Dup-16 | Dup-32 | PLCS |\n";
  md += "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : runs) {
    const auto& g = r.report.at("generated");
    md += "| " + r.name + " | " + fmt(100.0 * g.at("pod").get<double>(), 2) + "% | " +
          fmt(100.0 * r.report.at("reference").at("pod").get<double>(), 2) + "% | " + fmt(r.report.at("kud").get<double>(), 2) +
          " | " + fmt(g.at("mkp_1").get<double>()) + " | " + fmt(g.at("mkp_2").get<double>()) + " | " +
          fmt(g.at("dup_16").get<double>()) + " | " + fmt(g.at("dup_32").get<double>()) + " | " +
          fmt(g.at("plcs_mean").get<double>()) + " |\n";
  }
  return md;
}

inline std::string render_table_csv(const std::vector<NamedReport>& runs) {
  std::string csv = "run,pod,pod_reference,kud,mkp_1,mkp_2,dup_16,dup_32,plcs_mean\n";
  for (const auto& r : runs) {
    const auto& g = r.report.at("generated");
    csv += r.name + "," + fmt(g.at("pod").get<double>(), 6) + "," + fmt(r.report.at("reference").at("pod").get<double>(), 6) +
           "," + fmt(r.report.at("kud").get<double>(), 6) + "," + fmt(g.at("mkp_1").get<double>(), 6) + "," +
           fmt(g.at("mkp_2").get<double>(), 6) + "," + fmt(g.at("dup_16").get<double>(), 6) + "," +
           fmt(g.at("dup_32").get<double>(), 6) + "," + fmt(g.at("plcs_mean").get<double>(), 6) + "\n";
  }
  return csv;
}

// One row per (run, side, n, bin); references appear once per run.
inline std::string render_histograms_csv(const std::vector<NamedReport>& runs) {
  std::string csv = "run,side,n,bin_lo,bin_hi,mass\n";
  for (const auto& r : runs)
    for (const char* side : {"generated", "reference"})
      for (const char* key : {"kp1_histogram", "kp2_histogram"}) {
        const auto& h = r.report.at(side).at(key);
        const auto edges = h.at("bin_edges").get<std::vector<double>>();
        const auto masses = h.at("masses").get<std::vector<double>>();
        for (std::size_t i = 0; i < masses.size(); ++i)
          csv += r.name + "," + side + "," + std::to_string(h.at("n").get<int>()) + "," + fmt(edges[i], 2) + "," +
                 fmt(edges[i + 1], 2) + "," + fmt(masses[i], 6) + "\n";
      }
  return csv;
}

// Grouped bar chart of KP-1 masses: each run's generations next to the
// first run's references.
inline std::string render_histogram_svg(const std::vector<NamedReport>& runs) {
  static const char* kColors[] = {"#c0392b", "#2471a3", "#d68910", "#229954", "#7d3c98", "#566573"};
  std::vector<std::pair<std::string, std::vector<double>>> series;
  series.push_back({"reference", runs.front().report.at("reference").at("kp1_histogram").at("masses").get<std::vector<double>>()});
  for (const auto& r : runs)
    series.push_back({r.name, r.report.at("generated").at("kp1_histogram").at("masses").get<std::vector<double>>()});
  const double w = 640, h = 320, left = 40, bottom = 290, top = 20;
  const std::size_t bins = series.front().second.size();
  const double group_w = (w - left - 10) / static_cast<double>(bins);
  const double bar_w = group_w * 0.8 / static_cast<double>(series.size());
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h + 20 * series.size() << "\">\n";
  s << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << w - 10 << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    for (std::size_t b = 0; b < bins; ++b) {
      const double bh = series[k].second[b] * (bottom - top);
      s << "<rect x=\"" << fmt(left + b * group_w + k * bar_w, 1) << "\" y=\"" << fmt(bottom - bh, 1) << "\" width=\""
        << fmt(bar_w, 1) << "\" height=\"" << fmt(bh, 1) << "\" fill=\"" << kColors[k % 6] << "\"/>\n";
    }
    s << "<text x=\"" << left << "\" y=\"" << h + 20 * k << "\" font-size=\"12\" fill=\"" << kColors[k % 6] << "\">"
      << series[k].first << "</text>\n";
  }
  for (std::size_t b = 0; b <= bins; b += 2)
    s << "<text x=\"" << fmt(left + b * group_w - 8, 1) << "\" y=\"" << bottom + 14 << "\" font-size=\"10\">"
      << fmt(static_cast<double>(b) / static_cast<double>(bins), 1) << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

// --------------------------------------------------------------------------
// Subcommands
// --------------------------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 1;
  std::size_t n = 2000;
  std::size_t vocab_size = 300;
  double shortcut_rate = 0.9;
  double test_shortcut_rate = 0.1;
  std::size_t n_valid = 0;  // 0: n / 10
  std::size_t n_test = 0;   // 0: n / 10
  std::string out;
};

inline void run_synth(const SynthArgs& a, std::ostream& out) {
  SynthConfig cfg{a.seed, a.n, a.vocab_size, a.shortcut_rate};
  const std::size_t n_valid = a.n_valid ? a.n_valid : std::max<std::size_t>(1, a.n / 10);
  const std::size_t n_test = a.n_test ? a.n_test : std::max<std::size_t>(1, a.n / 10);
  const fs::path dir(a.out);
  ensure_dir(dir);
  save_corpus(generate_synthetic(cfg, Split::kTrain), dir / "train.jsonl");
  cfg.n_examples = n_valid;
  save_corpus(generate_synthetic(cfg, Split::kValid), dir / "valid.jsonl");
  // Held-out references follow the human-like rate.
  cfg.n_examples = n_test;
  cfg.shortcut_rate = a.test_shortcut_rate;
  save_corpus(generate_synthetic(cfg, Split::kTestSeen), dir / "test_seen.jsonl");
  save_corpus(generate_synthetic(cfg, Split::kTestUnseen), dir / "test_unseen.jsonl");
  out << "wrote train/valid/test_seen/test_unseen to " << dir.string() << "\n";
}

struct TrainArgs {
  std::string objective;
  std::string config;
  std::string profile;
  std::string train, valid, test;
  std::string degenerator;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_epochs;
  bool deterministic = false;
  bool quiet = false;
};

inline trainer::TrainConfig resolve_train_config(const TrainArgs& a) {
  nlohmann::json j = nlohmann::json::object();
  if (!a.config.empty()) {
    const auto text = io::read_file(a.config);
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
      try {
        j = nlohmann::json::parse(text);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(a.config + ": " + e.what());
      }
    } else {
      j = trainer::parse_flat_toml(text);
    }
  }
  if (!a.profile.empty()) j["profile"] = a.profile;
  if (!a.objective.empty()) j["objective"] = a.objective;
  if (a.seed) j["seed"] = *a.seed;
  if (a.max_epochs) j["max_epochs"] = *a.max_epochs;
  if (a.deterministic) j["deterministic"] = true;
  return trainer::config_from_json(j);
}

inline void run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_train_config(a);
  const auto train = load_corpus(a.train, Split::kTrain);
  const auto valid = load_corpus(a.valid, Split::kValid);
  std::optional<Corpus> test;
  if (!a.test.empty()) test = load_corpus(a.test, Split::kTestSeen);
  const auto vocab = build_vocabulary(train);
  const fs::path dir(a.out);
  ensure_dir(dir);

  trainer::TrainOptions opts;
  if (!a.quiet) opts.log = [&err](const std::string& s) { err << s << "\n"; };

  auto write_run = [&](const trainer::RunRecord& r, const model::Checkpoint& ck, const std::string& stem) {
    auto j = trainer::to_json(r);
    if (test) {
      const auto rep = trainer::evaluate_run(ck.model, vocab, *test, cfg.eval_decode(), *test);
      j["evaluation"] = metrics::to_json(rep);
      j["evaluation_decode"] = cfg.eval_decode().name();
    }
    write_json(dir / (stem + ".json"), j);
    io::write_file_atomic(dir / (stem + "_trace.jsonl"), trainer::trace_jsonl(r));
  };

  trainer::Trainer tr(cfg, vocab);
  if (cfg.objective == trainer::Objective::kMle) {
    trainer::RunRecord r;
    opts.checkpoint_out = dir / "model.ckpt";
    const auto ck = tr.train_degenerator(train, valid, &r, opts);
    write_run(r, ck, "run");
  } else {
    std::optional<model::Checkpoint> degen;
    if (cfg.objective == trainer::Objective::kMacl) {
      if (!a.degenerator.empty()) {
        degen = model::load_checkpoint(a.degenerator, vocab);
      } else {
        trainer::RunRecord r;
        trainer::TrainOptions o1 = opts;
        o1.checkpoint_out = dir / "degenerator.ckpt";
        degen = tr.train_degenerator(train, valid, &r, o1);
        write_run(r, *degen, "degenerator_run");
      }
      opts.negative_cache = cache_path_for(a.train);
    }
    trainer::RunRecord r;
    opts.checkpoint_out = dir / "model.ckpt";
    const auto ck = tr.train_model(train, valid, degen ? &*degen : nullptr, &r, opts);
    write_run(r, ck, "run");
  }
  out << "wrote " << (dir / "model.ckpt").string() << " and " << (dir / "run.json").string() << "\n";
}

struct MineArgs {
  std::string degenerator, corpus, out, config;
  std::optional<std::size_t> b, m, groups;
  std::optional<double> diversity;
};

inline void run_mine(const MineArgs& a, std::ostream& out) {
  trainer::TrainConfig cfg = trainer::desk_profile();
  if (!a.config.empty()) cfg = trainer::load_config(a.config);
  if (a.b) cfg.b = *a.b;
  if (a.m) cfg.m = *a.m;
  if (a.groups) cfg.num_groups = *a.groups;
  if (a.diversity) cfg.diversity_penalty = *a.diversity;
  cfg.validate();
  const auto corpus = load_corpus(a.corpus);
  const auto ck = model::load_checkpoint(a.degenerator);
  if (!ck.frozen) throw ValidationError("mining needs a frozen degenerator checkpoint");
  fs::path dest = a.out.empty() ? cache_path_for(a.corpus) : fs::path(a.out);
  if (dest.empty()) throw ValidationError("no output path: pass --out or set MACL_CACHE_DIR");
  ensure_dir(dest.parent_path());
  sampling::NegativeCache cache(ck.model.hash());
  std::size_t shortfall = 0;
  for (const auto& ex : corpus.examples) {
    auto pool = sampling::mine_hard_negatives(ck.model, ck.vocab, ex, cfg.group_beam(), cfg.m);
    shortfall += pool.shortfall;
    cache.put(ex.example_id, std::move(pool.retained));
  }
  cache.save(dest, ck.vocab);
  out << "mined " << cache.size() << " pools (shortfall " << shortfall << ") into " << dest.string() << "\n";
}

struct DecodeArgs {
  std::string checkpoint, corpus, out;
  std::string strategy = "beam";
  std::size_t beam_size = 3;
  double nucleus_p = 0.9;
  std::size_t max_len = 0;
  std::uint64_t seed = 1;
  bool length_normalize = false;
};

inline void run_decode(const DecodeArgs& a, std::ostream& out) {
  decoding::DecodeConfig cfg;
  cfg.strategy = decoding::strategy_from_string(a.strategy);
  cfg.beam_size = a.beam_size;
  cfg.nucleus_p = a.nucleus_p;
  cfg.max_target_len = a.max_len;
  cfg.seed = a.seed;
  cfg.length_normalize = a.length_normalize;
  cfg.validate();
  const auto corpus = load_corpus(a.corpus);
  const auto ck = model::load_checkpoint(a.checkpoint);
  const auto gens = decoding::decode_corpus(ck.model, ck.vocab, corpus, cfg);
  io::write_file_atomic(a.out, serialize_generations(gens));
  out << "decoded " << gens.size() << " examples with " << cfg.name() << "\n";
}

struct ScoreArgs {
  std::string references, generations, out, csv;
};

inline void run_score(const ScoreArgs& a, std::ostream& out) {
  const auto refs = load_corpus(a.references);
  const auto gens = load_generations(a.generations);
  const auto rep = metrics::build_report(refs, gens);
  auto j = metrics::to_json(rep);
  if (!gens.empty()) j["decode_config"] = gens.front().decode_config.name;
  write_json(a.out, j);
  if (!a.csv.empty()) io::write_file_atomic(a.csv, metrics::per_example_csv(rep));
  out << "PoD " << fmt(100.0 * rep.generated.pod, 2) << "% KUD " << fmt(rep.kud, 2) << "\n";
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::vector<std::string> names;
  std::string out;
  bool plot = false;
};

inline void run_report(const ReportArgs& a, std::ostream& out) {
  if (!a.names.empty() && a.names.size() != a.runs.size()) throw ValidationError("--names must match --runs");
  std::vector<NamedReport> runs;
  for (std::size_t i = 0; i < a.runs.size(); ++i) {
    const auto j = read_json(a.runs[i]);
    runs.push_back({a.names.empty() ? fs::path(a.runs[i]).stem().string() : a.names[i], report_from_file(j, a.runs[i])});
  }
  const fs::path dir(a.out);
  ensure_dir(dir);
  const auto table = render_table(runs);
  io::write_file_atomic(dir / "report.md", table);
  io::write_file_atomic(dir / "report.csv", render_table_csv(runs));
  io::write_file_atomic(dir / "kp_histograms.csv", render_histograms_csv(runs));
  if (a.plot) io::write_file_atomic(dir / "kp1_histogram.svg", render_histogram_svg(runs));
  out << table;
}

// --------------------------------------------------------------------------
// Entry point
// --------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Knowledge-grounded dialogue training with multi-level adaptive contrastive learning", "macl"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic corpus (train/valid/test splits)");
  s->add_option("--seed", synth.seed);
  s->add_option("--n", synth.n, "training examples")->check(CLI::PositiveNumber);
  s->add_option("--vocab-size", synth.vocab_size)->check(CLI::Range(50, 1000000));
  s->add_option("--shortcut-rate", synth.shortcut_rate)->check(CLI::Range(0.0, 1.0));
  s->add_option("--test-shortcut-rate", synth.test_shortcut_rate, "shortcut rate of held-out references")
      ->check(CLI::Range(0.0, 1.0));
  s->add_option("--n-valid", synth.n_valid);
  s->add_option("--n-test", synth.n_test);
  s->add_option("--out", synth.out)->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model (mle, nt or macl)");
  t->add_option("--objective", train.objective)->check(CLI::IsMember({"mle", "nt", "macl"}));
  t->add_option("--config", train.config, "TOML or JSON config")->check(CLI::ExistingFile);
  t->add_option("--profile", train.profile)->check(CLI::IsMember({"paper", "desk"}));
  t->add_option("--train", train.train)->required()->check(CLI::ExistingFile);
  t->add_option("--valid", train.valid)->required()->check(CLI::ExistingFile);
  t->add_option("--test", train.test, "held-out split evaluated into run.json")->check(CLI::ExistingFile);
  t->add_option("--degenerator", train.degenerator, "frozen MLE checkpoint for macl")->check(CLI::ExistingFile);
  t->add_option("--out", train.out)->required();
  t->add_option("--seed", train.seed);
  t->add_option("--max-epochs", train.max_epochs)->check(CLI::PositiveNumber);
  t->add_flag("--deterministic", train.deterministic, "serial execution");
  t->add_flag("--quiet", train.quiet);

  MineArgs mine;
  auto* mi = app.add_subcommand("mine", "mine hard negatives with a frozen degenerator");
  mi->add_option("--degenerator", mine.degenerator)->required()->check(CLI::ExistingFile);
  mi->add_option("--corpus", mine.corpus)->required()->check(CLI::ExistingFile);
  mi->add_option("--out", mine.out);
  mi->add_option("--config", mine.config)->check(CLI::ExistingFile);
  mi->add_option("--b", mine.b)->check(CLI::PositiveNumber);
  mi->add_option("--m", mine.m)->check(CLI::PositiveNumber);
  mi->add_option("--groups", mine.groups)->check(CLI::PositiveNumber);
  mi->add_option("--diversity-penalty", mine.diversity)->check(CLI::NonNegativeNumber);

  DecodeArgs dec;
  auto* d = app.add_subcommand("decode", "generate responses for a corpus");
  d->add_option("--checkpoint", dec.checkpoint)->required()->check(CLI::ExistingFile);
  d->add_option("--corpus", dec.corpus)->required()->check(CLI::ExistingFile);
  d->add_option("--out", dec.out)->required();
  d->add_option("--strategy", dec.strategy)->check(CLI::IsMember({"beam", "greedy", "nucleus"}));
  d->add_option("--beam-size", dec.beam_size)->check(CLI::PositiveNumber);
  d->add_option("--nucleus-p", dec.nucleus_p);
  d->add_option("--max-len", dec.max_len);
  d->add_option("--seed", dec.seed);
  d->add_flag("--length-normalize", dec.length_normalize);

  ScoreArgs score;
  auto* sc = app.add_subcommand("score", "compute the metrics report for generations");
  sc->add_option("--references", score.references)->required()->check(CLI::ExistingFile);
  sc->add_option("--generations", score.generations)->required()->check(CLI::ExistingFile);
  sc->add_option("--out", score.out)->required();
  sc->add_option("--csv", score.csv, "per-example scores");

  ReportArgs report;
  auto* r = app.add_subcommand("report", "side-by-side table and KP histograms for several runs");
  r->add_option("--runs", report.runs)->required()->check(CLI::ExistingFile);
  r->add_option("--names", report.names);
  r->add_option("--out", report.out)->required();
  r->add_flag("--plot", report.plot, "also write an SVG histogram");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    return kExitInvalid;
  }

  try {
    if (*s) run_synth(synth, out);
    else if (*t) run_train(train, out, err);
    else if (*mi) run_mine(mine, out);
    else if (*d) run_decode(dec, out);
    else if (*sc) run_score(score, out);
    else if (*r) run_report(report, out);
    return kExitOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace macl::cli
