// SPDX-License-Identifier: Apache-2.0
/**
 * @file   evaluation.hpp
 * @brief  1-in-n Recall@k, multi-seed aggregation, the TF-IDF baseline,
 *         chunk-count breakdown and topic cluster reports.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "rankhier/encoders.hpp"
#include "rankhier/textprep.hpp"

namespace rankhier {

/// Scores for one question's candidates and which of them is the truth.
struct CandidateGroup {
  std::vector<double> scores;
  std::vector<int> flags;
  std::size_t question_chunks = 0;

  std::size_t size() const { return scores.size(); }

  std::size_t truth() const {
    if (scores.size() != flags.size())
      throw std::invalid_argument("candidate group: scores and flags differ in length");
    std::size_t idx = flags.size(), count = 0;
    for (std::size_t i = 0; i < flags.size(); ++i)
      if (flags[i] == 1) idx = i, ++count;
    if (count != 1)
      throw std::invalid_argument("candidate group must have exactly one ground truth, found " +
                                  std::to_string(count));
    return idx;
  }

  /// 0-based rank of the ground truth: candidates scored higher, or equal
  /// with a lower index, come first.
  std::size_t truth_rank() const {
    const std::size_t t = truth();
    std::size_t rank = 0;
    for (std::size_t j = 0; j < scores.size(); ++j)
      if (scores[j] > scores[t] || (scores[j] == scores[t] && j < t)) ++rank;
    return rank;
  }
};

/// Fraction of groups whose ground truth ranks within the top k.
inline double recall_at_k(std::span<const CandidateGroup> groups, std::size_t k) {
  if (groups.empty()) throw std::invalid_argument("recall_at_k: no groups");
  std::size_t hits = 0;
  for (const auto &g : groups) {
    if (k < 1 || k > g.size())
      throw std::invalid_argument("recall_at_k: k=" + std::to_string(k) +
                                  " outside [1, " + std::to_string(g.size()) + "]");
    if (g.truth_rank() < k) ++hits;
  }
  return double(hits) / double(groups.size());
}

/// The first n candidates of a group in file order, always keeping the
/// ground truth: truth plus the first n−1 distractors.
inline CandidateGroup subgroup(const CandidateGroup &g, std::size_t n) {
  if (n > g.size())
    throw std::invalid_argument("group of " + std::to_string(g.size()) +
                                " candidates cannot provide 1-in-" + std::to_string(n));
  const std::size_t t = g.truth();
  CandidateGroup out;
  out.question_chunks = g.question_chunks;
  std::size_t distractors = 0;
  for (std::size_t j = 0; j < g.size(); ++j) {
    if (j != t && distractors + 1 >= n) continue;
    if (j != t) ++distractors;
    out.scores.push_back(g.scores[j]);
    out.flags.push_back(g.flags[j]);
  }
  return out;
}

/// "1 in n R@k".
struct Metric {
  std::size_t n = 10;
  std::size_t k = 1;

  std::string name() const { return "1in" + std::to_string(n) + "_R@" + std::to_string(k); }

  /// Parses "1in10@2" or "1in10_R@2".
  static Metric parse(const std::string &s) {
    Metric m;
    unsigned long n = 0, k = 0;
    char tail = 0;
    if (std::sscanf(s.c_str(), "1in%lu_R@%lu%c", &n, &k, &tail) == 2 ||
        std::sscanf(s.c_str(), "1in%lu@%lu%c", &n, &k, &tail) == 2) {
      m.n = n;
      m.k = k;
      if (m.n >= 2 && m.k >= 1 && m.k <= m.n) return m;
    }
    throw std::invalid_argument("bad metric '" + s + "' (expected e.g. 1in10@1)");
  }

  double compute(std::span<const CandidateGroup> groups) const {
    std::vector<CandidateGroup> cut;
    cut.reserve(groups.size());
    for (const auto &g : groups) cut.push_back(subgroup(g, n));
    return recall_at_k(cut, k);
  }
};

inline std::vector<Metric> default_metrics() { return {{2, 1}, {10, 1}, {10, 2}, {10, 5}}; }

inline std::vector<Metric> parse_metrics(const std::string &list) {
  std::vector<Metric> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(Metric::parse(item));
  if (out.empty()) throw std::invalid_argument("empty metric list");
  return out;
}

/// Worker count bounded by RANKHIER_THREADS when set.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char *env = std::getenv("RANKHIER_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
  }
  return n;
}

/// Scores every candidate of every group with the model. Work is split over
/// at most `threads` workers; results do not depend on the split.
template <typename T>
std::vector<CandidateGroup> score_groups(const DualEncoder<T> &model,
                                         std::span<const EvalGroup> groups, std::size_t max_words,
                                         std::size_t max_chunks, std::size_t batch_size = 64,
                                         std::size_t threads = 1) {
  std::vector<RankingTriple> pairs;
  for (const auto &g : groups)
    for (std::size_t k = 0; k < g.candidates.size(); ++k)
      pairs.push_back({g.question, g.candidates[k], g.flags[k]});
  std::vector<double> scores(pairs.size());
  const std::size_t n_batches = (pairs.size() + batch_size - 1) / batch_size;
  auto work = [&](std::size_t worker, std::size_t stride) {
    for (std::size_t b = worker; b < n_batches; b += stride) {
      const std::size_t lo = b * batch_size, hi = std::min(pairs.size(), lo + batch_size);
      const auto batch = make_batch(std::span(pairs).subspan(lo, hi - lo), max_words, max_chunks);
      const auto p = model.predict(batch);
      for (std::size_t i = 0; i < p.size(); ++i) scores[lo + i] = static_cast<double>(p[i]);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, n_batches));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w, threads);
    for (auto &t : pool) t.join();
  }
  std::vector<CandidateGroup> out;
  std::size_t pos = 0;
  for (const auto &g : groups) {
    CandidateGroup cg;
    cg.question_chunks = g.question.num_chunks();
    cg.flags = g.flags;
    cg.scores.assign(scores.begin() + static_cast<std::ptrdiff_t>(pos),
                     scores.begin() + static_cast<std::ptrdiff_t>(pos + g.candidates.size()));
    pos += g.candidates.size();
    out.push_back(std::move(cg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-run statistics
// ---------------------------------------------------------------------------

struct MetricStats {
  std::string name;
  std::vector<double> values;  // one per successful run
  double mean = 0.0;
  double stddev = 0.0;  // population
};

struct ChunkBucket {
  std::string label;  // "1" … "12", "13+"
  std::size_t groups = 0;
  double recall = 0.0;
};

struct EvalReport {
  std::vector<std::uint64_t> seeds;
  std::vector<MetricStats> metrics;
  std::vector<std::pair<std::uint64_t, std::string>> failures;
  std::vector<ChunkBucket> breakdown;

  const MetricStats &metric(const std::string &name) const {
    for (const auto &m : metrics)
      if (m.name == name) return m;
    throw std::out_of_range("no metric " + name);
  }

  void write(std::ostream &os) const {
    auto fmt = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", v);
      return std::string(buf);
    };
    os << "metric\tmean\tstd\tvalues\n";
    for (const auto &m : metrics) {
      os << m.name << '\t' << fmt(m.mean) << '\t' << fmt(m.stddev) << '\t';
      for (std::size_t i = 0; i < m.values.size(); ++i) os << (i ? "," : "") << fmt(m.values[i]);
      os << '\n';
    }
    for (const auto &[seed, msg] : failures) os << "failed\tseed=" << seed << '\t' << msg << '\n';
    if (!breakdown.empty()) {
      os << "chunks\tgroups\tR@1\n";
      for (const auto &b : breakdown) os << b.label << '\t' << b.groups << '\t' << fmt(b.recall) << '\n';
    }
  }
};

/// mean and population standard deviation.
inline std::pair<double, double> mean_std(std::span<const double> xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= double(xs.size());
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / double(xs.size()))};
}

using RunFactory = std::function<std::map<std::string, double>(std::uint64_t seed)>;

/// Runs the factory once per seed and aggregates each metric. A run that
/// throws is recorded under `failures` and excluded from the statistics.
inline EvalReport evaluate_runs(const RunFactory &run, std::span<const std::uint64_t> seeds,
                                const std::vector<std::string> &metrics) {
  if (seeds.empty()) throw std::invalid_argument("evaluate_runs: at least one seed required");
  EvalReport report;
  report.seeds.assign(seeds.begin(), seeds.end());
  for (const auto &name : metrics) report.metrics.push_back({name, {}, 0, 0});
  for (auto seed : seeds) {
    std::map<std::string, double> values;
    try {
      values = run(seed);
    } catch (const std::exception &e) {
      report.failures.emplace_back(seed, e.what());
      continue;
    }
    for (auto &m : report.metrics) {
      auto it = values.find(m.name);
      if (it == values.end()) throw std::invalid_argument("run did not report metric " + m.name);
      m.values.push_back(it->second);
    }
  }
  for (auto &m : report.metrics) std::tie(m.mean, m.stddev) = mean_std(m.values);
  return report;
}

// ---------------------------------------------------------------------------
// TF-IDF baseline
// ---------------------------------------------------------------------------

template <typename Tok> struct DocumentFrequencies {
  std::size_t documents = 0;
  std::unordered_map<Tok, std::size_t> df;

  static DocumentFrequencies build(std::span<const std::vector<Tok>> corpus) {
    DocumentFrequencies out;
    out.documents = corpus.size();
    for (const auto &doc : corpus) {
      std::vector<Tok> uniq(doc.begin(), doc.end());
      std::sort(uniq.begin(), uniq.end());
      uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
      for (const auto &t : uniq) ++out.df[t];
    }
    return out;
  }

  /// ln(N / (1 + df)) + 1
  double idf(const Tok &t) const {
    auto it = df.find(t);
    const double d = it == df.end() ? 0.0 : double(it->second);
    return std::log(double(std::max<std::size_t>(documents, 1)) / (1.0 + d)) + 1.0;
  }
};

namespace detail {
template <typename Tok>
std::map<Tok, double> tfidf_vector(std::span<const Tok> doc, const DocumentFrequencies<Tok> &stats,
                                   double tf_scale) {
  std::map<Tok, double> v;
  for (const auto &t : doc) v[t] += tf_scale;
  for (auto &[t, w] : v) w *= stats.idf(t);
  return v;
}
}  // namespace detail

/// Cosine similarity of tf-idf vectors (tf = raw count) between the question
/// and each candidate; 0 when either vector is empty.
template <typename Tok>
std::vector<double> tfidf_rank(std::span<const Tok> question,
                               std::span<const std::vector<Tok>> candidates,
                               const DocumentFrequencies<Tok> &stats, double tf_scale = 1.0) {
  const auto q = detail::tfidf_vector(question, stats, tf_scale);
  double qn = 0;
  for (const auto &[t, w] : q) qn += w * w;
  std::vector<double> out;
  for (const auto &cand : candidates) {
    const auto c = detail::tfidf_vector(std::span<const Tok>(cand), stats, tf_scale);
    double cn = 0, dot = 0;
    for (const auto &[t, w] : c) {
      cn += w * w;
      if (auto it = q.find(t); it != q.end()) dot += w * it->second;
    }
    out.push_back(qn > 0 && cn > 0 ? std::min(1.0, dot / std::sqrt(qn * cn)) : 0.0);
  }
  return out;
}

/// TF-IDF candidate groups over id sequences; document frequencies come from
/// every question and candidate text in `groups`.
inline std::vector<CandidateGroup> tfidf_groups(std::span<const EvalGroup> groups) {
  std::vector<std::vector<int>> corpus;
  for (const auto &g : groups) {
    corpus.push_back(g.question.flat());
    for (const auto &c : g.candidates) corpus.push_back(c.flat());
  }
  const auto stats = DocumentFrequencies<int>::build(corpus);
  std::vector<CandidateGroup> out;
  for (const auto &g : groups) {
    std::vector<std::vector<int>> cands;
    for (const auto &c : g.candidates) cands.push_back(c.flat());
    const auto q = g.question.flat();
    CandidateGroup cg;
    cg.scores = tfidf_rank<int>(q, cands, stats);
    cg.flags = g.flags;
    cg.question_chunks = g.question.num_chunks();
    out.push_back(std::move(cg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Analyses
// ---------------------------------------------------------------------------

inline constexpr std::size_t kMaxChunkBucket = 13;

/// R@1 per question chunk count; counts >= 13 share the "13+" bucket. Empty
/// buckets are absent.
inline std::vector<ChunkBucket> degradation_report(std::span<const CandidateGroup> groups) {
  std::map<std::size_t, std::vector<CandidateGroup>> by_bucket;
  for (const auto &g : groups) {
    if (g.question_chunks == 0)
      throw std::invalid_argument("degradation_report: group without a chunk count");
    by_bucket[std::min(g.question_chunks, kMaxChunkBucket)].push_back(g);
  }
  std::vector<ChunkBucket> out;
  for (const auto &[bucket, members] : by_bucket) {
    ChunkBucket b;
    b.label = bucket == kMaxChunkBucket ? std::to_string(kMaxChunkBucket) + "+" : std::to_string(bucket);
    b.groups = members.size();
    b.recall = recall_at_k(members, 1);
    out.push_back(std::move(b));
  }
  return out;
}

/// Index of the largest score; ties go to the lowest index.
inline std::size_t assign_cluster(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("assign_cluster: no scores");
  std::size_t best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k)
    if (scores[k] > scores[best]) best = k;
  return best;
}

struct ClusterReport {
  std::size_t clusters = 0;
  std::vector<std::string> categories;           // first-appearance order
  std::vector<std::size_t> counts;                // samples per category
  std::vector<std::vector<double>> proportions;  // [category][cluster]
  std::vector<std::size_t> assignments;           // per sample

  void write(std::ostream &os) const {
    os << "category\tsamples";
    for (std::size_t k = 0; k < clusters; ++k) os << "\tcluster" << k + 1;
    os << '\n';
    for (std::size_t c = 0; c < categories.size(); ++c) {
      os << categories[c] << '\t' << counts[c];
      for (double p : proportions[c]) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", p);
        os << '\t' << buf;
      }
      os << '\n';
    }
  }
};

struct LabeledText {
  ChunkedText text;
  std::string label;
};

/// Topic distribution [n × K] of texts under the model's LTC module.
template <typename T>
Tensor<T> topic_probabilities(const DualEncoder<T> &model, std::span<const LabeledText> samples,
                              std::size_t max_words, std::size_t max_chunks,
                              std::size_t batch_size = 64) {
  if (!model.ltc()) throw ConfigError("cluster report needs a model with an LTC module");
  const std::size_t K = model.ltc()->clusters;
  Tensor<T> out({samples.size(), K});
  for (std::size_t lo = 0; lo < samples.size(); lo += batch_size) {
    const std::size_t hi = std::min(samples.size(), lo + batch_size);
    std::vector<const ChunkedText *> texts;
    for (std::size_t i = lo; i < hi; ++i) texts.push_back(&samples[i].text);
    Tape<T> tape;
    Rng unused;
    const auto x = model.encode(tape, make_grid(texts, max_words, max_chunks));
    const auto topic = ltc_forward<T>(*model.ltc(), x, false, 0.0, unused);
    std::copy_n(topic.probs.value().data(), (hi - lo) * K, out.data() + lo * K);
  }
  return out;
}

/// Assigns each sample to its most similar topic and tabulates, per
/// category, the share of samples in each cluster.
template <typename T>
ClusterReport cluster_report(const DualEncoder<T> &model, std::span<const LabeledText> samples,
                             std::size_t max_words, std::size_t max_chunks) {
  const auto probs = topic_probabilities(model, samples, max_words, max_chunks);
  ClusterReport rep;
  rep.clusters = model.ltc()->clusters;
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<std::size_t>> tallies;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::vector<double> row(probs.row(i).begin(), probs.row(i).end());
    const std::size_t k = assign_cluster(row);
    rep.assignments.push_back(k);
    auto [it, fresh] = index.emplace(samples[i].label, rep.categories.size());
    if (fresh) {
      rep.categories.push_back(samples[i].label);
      tallies.emplace_back(rep.clusters, 0);
    }
    ++tallies[it->second][k];
  }
  for (const auto &t : tallies) {
    std::size_t total = 0;
    for (auto c : t) total += c;
    rep.counts.push_back(total);
    std::vector<double> row;
    for (auto c : t) row.push_back(double(c) / double(total));
    rep.proportions.push_back(std::move(row));
  }
  return rep;
}

}  // namespace rankhier
