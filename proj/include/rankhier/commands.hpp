// SPDX-License-Identifier: Apache-2.0
/**
 * @file   commands.hpp
 * @brief  End-to-end pipelines behind the command-line tool: preprocess,
 *         train, eval, rank and cluster-report.
 */
#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rankhier/checkpoint.hpp"
#include "rankhier/config.hpp"
#include "rankhier/evaluation.hpp"
#include "rankhier/textprep.hpp"
#include "rankhier/training.hpp"

namespace rankhier {

/// Timestamped line on stderr. Timestamps never reach primary outputs.
inline void log_line(const std::string &level, const std::string &msg) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%d %H:%M:%S", std::localtime(&now));
  std::cerr << '[' << stamp << "] " << level << ": " << msg << '\n';
}

namespace detail {

inline void require_readable(const RunConfig &cfg, const std::string &key) {
  if (!cfg.has(key)) throw ConfigError("missing required path --" + key);
  std::ifstream is(cfg.get(key));
  if (!is) throw ConfigError("--" + key + ": cannot read '" + cfg.get(key) + "'");
}

inline void require_writable_parent(const RunConfig &cfg, const std::string &key) {
  if (!cfg.has(key)) throw ConfigError("missing required path --" + key);
  namespace fs = std::filesystem;
  auto parent = fs::path(cfg.get(key)).parent_path();
  if (parent.empty()) parent = ".";
  if (!fs::is_directory(parent))
    throw ConfigError("--" + key + ": directory '" + parent.string() + "' does not exist");
}

inline void check_optional_readable(const RunConfig &cfg, const std::string &key) {
  if (cfg.has(key)) require_readable(cfg, key);
}

/// Output stream for `--output`, or stdout.
class Output {
 public:
  explicit Output(const RunConfig &cfg) {
    if (cfg.has("output")) {
      file_.open(cfg.get("output"));
      if (!file_) throw ConfigError("cannot write --output '" + cfg.get("output") + "'");
    }
  }
  std::ostream &stream() { return file_.is_open() ? static_cast<std::ostream &>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

/// Vocabulary from --vocab, else the path recorded in the checkpoint.
inline Vocabulary vocabulary_for(const RunConfig &cfg, const ConfigMap &stored) {
  std::string path = cfg.get("vocab");
  if (path.empty())
    if (auto it = stored.find("vocab"); it != stored.end()) path = it->second;
  if (path.empty()) throw ConfigError("no vocabulary: pass --vocab");
  return Vocabulary::load(path);
}

inline std::vector<EvalGroup> load_groups(const std::string &path, const Vocabulary &vocab,
                                          const Delimiter &delim) {
  std::vector<EvalGroup> out;
  for (const auto &g : read_groups(path)) out.push_back(encode_group(g, vocab, delim));
  return out;
}

inline void check_group_sizes(std::span<const EvalGroup> groups, const std::vector<Metric> &metrics) {
  if (groups.empty()) throw DataError("evaluation file has no groups");
  const std::size_t n = groups.front().candidates.size();
  for (const auto &g : groups)
    if (g.candidates.size() != n)
      throw DataError("group '" + g.id + "' has " + std::to_string(g.candidates.size()) +
                      " candidates, expected " + std::to_string(n));
  for (const auto &m : metrics)
    if (m.n > n)
      throw DataError("metric " + m.name() + " needs groups of at least " + std::to_string(m.n) +
                      " candidates, file has " + std::to_string(n));
}

inline std::vector<LabeledText> load_labeled(const std::string &path, const Vocabulary &vocab,
                                             const Delimiter &delim) {
  std::vector<LabeledText> out;
  detail::for_each_line(path, [&](const std::string &line, const std::string &where) {
    const auto f = split_tabs(line);
    if (f.size() != 2) throw DataError(where + ": expected category<TAB>text");
    out.push_back({encode_text(f[1], vocab, delim), f[0]});
  });
  if (out.empty()) throw DataError(path + ": no samples");
  return out;
}

inline std::map<std::string, double> compute_metrics(std::span<const CandidateGroup> scored,
                                                     const std::vector<Metric> &metrics) {
  std::map<std::string, double> out;
  for (const auto &m : metrics) out[m.name()] = m.compute(scored);
  return out;
}

}  // namespace detail

/// Raw pairs -> train triples, evaluation groups and a training vocabulary.
/// Writes <out-dir>/vocab.txt, train.tsv, valid.tsv, test.tsv for the splits
/// given. Returns the number of lines written per split.
inline std::map<std::string, std::size_t> cmd_preprocess(const RunConfig &cfg) {
  const bool any_split = cfg.has("train") || cfg.has("valid") || cfg.has("test") || cfg.has("input");
  if (!any_split) throw ConfigError("preprocess needs --train, --valid, --test or --input");
  for (const char *k : {"train", "valid", "test", "input"}) detail::check_optional_readable(cfg, k);
  if (!cfg.has("out-dir")) throw ConfigError("missing required path --out-dir");
  namespace fs = std::filesystem;
  const fs::path out_dir = cfg.get("out-dir");
  fs::create_directories(out_dir);

  Rng rng(cfg.size("seed"));
  const std::size_t n_neg = cfg.size("neg");
  const std::size_t eval_neg = cfg.size("eval-neg");
  std::map<std::string, std::size_t> written;

  // --input is an alias for a training split.
  const std::string train_path = cfg.has("train") ? cfg.get("train") : cfg.get("input");
  if (!train_path.empty()) {
    const auto pairs = read_pairs(train_path);
    std::vector<Tokens> corpus;
    for (const auto &p : pairs) {
      corpus.push_back(tokenize(p.question));
      corpus.push_back(tokenize(p.answer));
    }
    build_vocab(corpus, cfg.size("min-count")).save((out_dir / "vocab.txt").string());
    const auto triples = negative_sample(pairs, n_neg, rng);
    write_triples((out_dir / "train.tsv").string(), triples);
    written["train"] = triples.size();
  } else if (!cfg.has("vocab")) {
    log_line("notice", "no training split given; vocabulary not written");
  }
  for (const char *split : {"valid", "test"}) {
    if (!cfg.has(split)) continue;
    const auto pairs = read_pairs(cfg.get(split));
    const auto groups = make_groups(pairs, eval_neg, rng);
    write_groups((out_dir / (std::string(split) + ".tsv")).string(), groups);
    written[split] = groups.size() * (1 + eval_neg);
  }
  return written;
}

/// Trains one model and writes the best checkpoint plus its history.
inline History cmd_train(const RunConfig &cfg) {
  detail::require_readable(cfg, "train");
  detail::require_readable(cfg, "vocab");
  detail::check_optional_readable(cfg, "valid");
  detail::check_optional_readable(cfg, "embeddings");
  detail::require_writable_parent(cfg, "checkpoint");
  const std::string history_path =
      cfg.has("history") ? cfg.get("history") : cfg.get("checkpoint") + ".history";

  const auto vocab = Vocabulary::load(cfg.get("vocab"));
  const auto tcfg = cfg.train_config(vocab.size());
  const auto delim = cfg.delimiter();

  std::vector<RankingTriple> train;
  for (const auto &t : read_triples(cfg.get("train"))) train.push_back(encode_triple(t, vocab, delim));
  std::vector<EvalGroup> valid;
  if (cfg.has("valid")) valid = detail::load_groups(cfg.get("valid"), vocab, delim);

  Rng emb_rng(tcfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::size_t found = 0;
  auto table = load_embeddings<float>(cfg.get("embeddings"), vocab, tcfg.model.embed_dim, emb_rng, &found);
  if (cfg.has("embeddings"))
    log_line("info", "embeddings: " + std::to_string(found) + " of " + std::to_string(vocab.size()) +
                         " vocabulary rows found in " + cfg.get("embeddings"));
  else
    log_line("notice", "no --embeddings given; using seeded random embeddings");

  auto result = fit<float>(tcfg, train, valid, std::move(table), [](const EpochRecord &e) {
    std::ostringstream os;
    os << "epoch " << e.epoch << " loss " << e.train_loss;
    if (e.valid_recall) os << " valid R@1 " << *e.valid_recall;
    log_line("info", os.str());
  });

  ConfigMap stored = cfg.values();
  save_checkpoint(result.model, cfg.get("checkpoint"), stored);
  std::ofstream hs(history_path);
  if (!hs) throw ConfigError("cannot write history '" + history_path + "'");
  result.history.write(hs);
  return result.history;
}

/// Scores grouped evaluation data with a checkpoint (or, with --seeds and
/// --train, trains one model per seed) and writes the metric report.
inline EvalReport cmd_eval(const RunConfig &cfg) {
  detail::require_readable(cfg, "test");
  detail::check_optional_readable(cfg, "cluster-report");
  const auto metrics = parse_metrics(cfg.get("metrics"));
  std::vector<std::string> names;
  for (const auto &m : metrics) names.push_back(m.name());
  detail::Output out(cfg);
  const auto delim = cfg.delimiter();
  const std::size_t max_words = cfg.size("max-words"), max_chunks = cfg.size("max-chunks");

  EvalReport report;
  std::optional<DualEncoder<float>> last_model;
  std::optional<Vocabulary> vocab_used;
  std::vector<EvalGroup> groups;
  const auto seeds = cfg.seeds();
  if (!seeds.empty() && cfg.has("train")) {
    detail::require_readable(cfg, "train");
    detail::require_readable(cfg, "vocab");
    detail::check_optional_readable(cfg, "valid");
    detail::check_optional_readable(cfg, "embeddings");
    const auto vocab = Vocabulary::load(cfg.get("vocab"));
    vocab_used = vocab;
    groups = detail::load_groups(cfg.get("test"), vocab, delim);
    detail::check_group_sizes(groups, metrics);
    std::vector<RankingTriple> train;
    for (const auto &t : read_triples(cfg.get("train"))) train.push_back(encode_triple(t, vocab, delim));
    std::vector<EvalGroup> valid;
    if (cfg.has("valid")) valid = detail::load_groups(cfg.get("valid"), vocab, delim);
    report = evaluate_runs(
        [&](std::uint64_t seed) {
          RunConfig run = cfg;
          run.set("seed", std::to_string(seed));
          auto tcfg = run.train_config(vocab.size());
          Rng emb_rng(seed ^ 0x9e3779b97f4a7c15ULL);
          auto table = load_embeddings<float>(cfg.get("embeddings"), vocab, tcfg.model.embed_dim, emb_rng);
          auto fitted = fit<float>(tcfg, train, valid, std::move(table));
          const auto scored = score_groups(fitted.model, groups, max_words, max_chunks, 64, worker_count());
          last_model = std::move(fitted.model);
          return detail::compute_metrics(scored, metrics);
        },
        seeds, names);
  } else {
    detail::require_readable(cfg, "checkpoint");
    auto ck = load_checkpoint<float>(cfg.get("checkpoint"));
    const auto vocab = detail::vocabulary_for(cfg, ck.config);
    if (vocab.size() != ck.model.config().vocab_size)
      throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " tokens, checkpoint expects " +
                        std::to_string(ck.model.config().vocab_size));
    vocab_used = vocab;
    groups = detail::load_groups(cfg.get("test"), vocab, delim);
    detail::check_group_sizes(groups, metrics);
    const auto scored = score_groups(ck.model, groups, max_words, max_chunks, 64, worker_count());
    const std::uint64_t seed = cfg.size("seed");
    report = evaluate_runs([&](std::uint64_t) { return detail::compute_metrics(scored, metrics); },
                           std::vector<std::uint64_t>{seed}, names);
    if (cfg.flag("degradation")) report.breakdown = degradation_report(scored);
    last_model = std::move(ck.model);
  }
  report.write(out.stream());

  if (cfg.has("cluster-report")) {
    if (!last_model || !last_model->ltc())
      throw ConfigError("--cluster-report needs a model with an LTC module");
    const auto samples = detail::load_labeled(cfg.get("cluster-report"), *vocab_used, delim);
    out.stream() << '\n';
    cluster_report(*last_model, samples, max_words, max_chunks).write(out.stream());
  }
  return report;
}

struct RankedCandidate {
  std::size_t index = 0;
  std::string text;
  double score = 0.0;
};

/// Scores every line of --candidates against --question, best first; equal
/// scores keep file order.
inline std::vector<RankedCandidate> cmd_rank(const RunConfig &cfg) {
  detail::require_readable(cfg, "checkpoint");
  detail::require_readable(cfg, "candidates");
  if (!cfg.has("question")) throw ConfigError("missing --question");
  auto ck = load_checkpoint<float>(cfg.get("checkpoint"));
  const auto vocab = detail::vocabulary_for(cfg, ck.config);
  const auto delim = cfg.delimiter();

  std::vector<std::string> lines;
  {
    std::ifstream is(cfg.get("candidates"));
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) lines.push_back(line);
    }
  }
  if (lines.empty()) throw DataError("candidates file '" + cfg.get("candidates") + "' is empty");

  const auto question = encode_text(cfg.get("question"), vocab, delim);
  std::vector<RankingTriple> pairs;
  for (const auto &l : lines) pairs.push_back({question, encode_text(l, vocab, delim), 0});
  std::vector<RankedCandidate> ranked;
  for (const auto &b : batchify(pairs, cfg.size("max-words"), cfg.size("max-chunks"))) {
    for (float p : ck.model.predict(b)) {
      const std::size_t i = ranked.size();
      ranked.push_back({i, lines[i], static_cast<double>(p)});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto &a, const auto &b) { return a.score > b.score; });
  detail::Output out(cfg);
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", ranked[r].score);
    out.stream() << r + 1 << '\t' << buf << '\t' << ranked[r].text << '\n';
  }
  return ranked;
}

/// Per-category proportions of the most similar topic cluster.
inline ClusterReport cmd_cluster_report(const RunConfig &cfg) {
  detail::require_readable(cfg, "checkpoint");
  detail::require_readable(cfg, "samples");
  auto ck = load_checkpoint<float>(cfg.get("checkpoint"));
  if (!ck.model.ltc()) throw ConfigError("checkpoint model '" + to_string(ck.model.config().kind) + "' has no LTC module");
  const auto vocab = detail::vocabulary_for(cfg, ck.config);
  const auto samples = detail::load_labeled(cfg.get("samples"), vocab, cfg.delimiter());
  auto rep = cluster_report(ck.model, samples, cfg.size("max-words"), cfg.size("max-chunks"));
  detail::Output out(cfg);
  rep.write(out.stream());
  return rep;
}

}  // namespace rankhier
