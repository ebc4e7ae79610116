// SPDX-License-Identifier: Apache-2.0
/**
 * @file   textprep.hpp
 * @brief  Tokenization, vocabulary, chunking, embedding loading, negative
 *         sampling and batching.
 */
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rankhier/random.hpp"
#include "rankhier/tensor.hpp"

namespace rankhier {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char *kPadToken = "<pad>";
inline constexpr const char *kUnkToken = "<unk>";
inline constexpr const char *kEndOfSentence = "_eos_";
inline constexpr const char *kEndOfTurn = "_eot_";
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;

using Tokens = std::vector<std::string>;

/// Lowercases and splits on whitespace.
inline Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  Vocabulary() {
    add(kPadToken);
    add(kUnkToken);
  }

  /// Ids in order; the first two must be the PAD and UNK tokens.
  explicit Vocabulary(const Tokens &ordered) {
    if (ordered.size() < 2 || ordered[0] != kPadToken || ordered[1] != kUnkToken)
      throw DataError("vocabulary must start with " + std::string(kPadToken) +
                      " and " + kUnkToken);
    for (const auto &tok : ordered) {
      if (index_.count(tok)) throw DataError("duplicate vocabulary token '" + tok + "'");
      add(tok);
    }
  }

  int id(const std::string &token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }
  bool contains(const std::string &token) const { return index_.count(token) > 0; }
  const std::string &token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const Tokens &tokens() const { return tokens_; }

  std::vector<int> encode(const Tokens &toks) const {
    std::vector<int> ids;
    ids.reserve(toks.size());
    for (const auto &t : toks) ids.push_back(id(t));
    return ids;
  }

  /// One token per line, in id order.
  void save(const std::string &path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write vocabulary to " + path);
    for (const auto &t : tokens_) os << t << '\n';
  }

  static Vocabulary load(const std::string &path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read vocabulary " + path);
    Tokens toks;
    std::string line;
    while (std::getline(is, line))
      if (!line.empty()) toks.push_back(line);
    return Vocabulary(toks);
  }

  friend bool operator==(const Vocabulary &a, const Vocabulary &b) {
    return a.tokens_ == b.tokens_;
  }

 private:
  void add(const std::string &tok) {
    index_.emplace(tok, static_cast<int>(tokens_.size()));
    tokens_.push_back(tok);
  }

  Tokens tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Builds a vocabulary: PAD, UNK, any delimiter tokens seen, then tokens with
/// count >= min_count by descending frequency (ties lexicographic).
inline Vocabulary build_vocab(const std::vector<Tokens> &corpus, std::size_t min_count = 1) {
  if (min_count < 1) throw std::invalid_argument("build_vocab: min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto &doc : corpus)
    for (const auto &tok : doc) ++counts[tok], ++total;
  if (total == 0) throw DataError("build_vocab: empty corpus");

  Tokens ordered{kPadToken, kUnkToken};
  for (const char *delim : {kEndOfSentence, kEndOfTurn})
    if (counts.count(delim)) ordered.emplace_back(delim);

  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (const auto &[tok, n] : counts) {
    if (n < min_count || tok == kEndOfSentence || tok == kEndOfTurn) continue;
    if (tok == kPadToken || tok == kUnkToken) continue;
    ranked.emplace_back(tok, n);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto &a, const auto &b) { return a.second > b.second; });
  for (auto &[tok, n] : ranked) ordered.push_back(std::move(tok));
  return Vocabulary(ordered);
}

inline std::string detokenize(std::span<const int> ids, const Vocabulary &vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.token(ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Chunking
// ---------------------------------------------------------------------------

/// Where a text is cut into chunks: at a delimiter token, or at sentence
/// punctuation ('.', '?', '!') for texts that carry no explicit delimiter.
struct Delimiter {
  enum class Kind { kToken, kSentencePunct };
  Kind kind = Kind::kToken;
  std::string token = kEndOfSentence;

  static Delimiter of_token(std::string tok) { return {Kind::kToken, std::move(tok)}; }
  static Delimiter sentence_punct() { return {Kind::kSentencePunct, ""}; }

  /// Accepts "_eos_", "_eot_", "punct", or any other single token.
  static Delimiter parse(const std::string &s) {
    if (s == "punct" || s == "sentence") return sentence_punct();
    if (s.empty() || tokenize(s).size() != 1)
      throw std::invalid_argument("delimiter must be a single token, got '" + s + "'");
    return of_token(s);
  }

  std::string name() const { return kind == Kind::kToken ? token : "punct"; }
};

using TokenChunks = std::vector<Tokens>;

inline bool is_sentence_punct(char c) { return c == '.' || c == '?' || c == '!'; }

/// Detaches trailing sentence punctuation into a standalone "." token so the
/// generic splitter can cut on it.
inline Tokens mark_sentence_ends(const Tokens &tokens) {
  Tokens out;
  for (const auto &tok : tokens) {
    std::size_t end = tok.size();
    while (end > 0 && is_sentence_punct(tok[end - 1])) --end;
    if (end < tok.size()) {
      if (end > 0) out.push_back(tok.substr(0, end));
      out.emplace_back(".");
    } else {
      out.push_back(tok);
    }
  }
  return out;
}

/// Splits at every delimiter occurrence, dropping delimiters and empty chunks.
/// Input with no content tokens yields a single chunk holding UNK.
inline TokenChunks chunk_split(const Tokens &tokens, const Delimiter &delim) {
  const bool punct = delim.kind == Delimiter::Kind::kSentencePunct;
  const Tokens marked = punct ? mark_sentence_ends(tokens) : tokens;
  const std::string &cut = punct ? std::string(".") : delim.token;
  TokenChunks chunks;
  Tokens cur;
  for (const auto &tok : marked) {
    if (tok == cut) {
      if (!cur.empty()) chunks.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(tok);
    }
  }
  if (!cur.empty()) chunks.push_back(std::move(cur));
  if (chunks.empty()) chunks.push_back({kUnkToken});
  return chunks;
}

inline TokenChunks chunk_split(const Tokens &tokens, const std::string &delim_token) {
  return chunk_split(tokens, Delimiter::of_token(delim_token));
}

/// A text as an ordered list of non-empty chunks of token ids.
struct ChunkedText {
  std::vector<std::vector<int>> chunks;

  std::size_t num_chunks() const { return chunks.size(); }
  std::size_t num_tokens() const {
    std::size_t n = 0;
    for (const auto &c : chunks) n += c.size();
    return n;
  }
  std::vector<int> flat() const {
    std::vector<int> out;
    for (const auto &c : chunks) out.insert(out.end(), c.begin(), c.end());
    return out;
  }
  friend bool operator==(const ChunkedText &, const ChunkedText &) = default;
};

inline ChunkedText to_ids(const TokenChunks &chunks, const Vocabulary &vocab) {
  ChunkedText out;
  for (const auto &c : chunks) out.chunks.push_back(vocab.encode(c));
  return out;
}

inline ChunkedText encode_text(std::string_view text, const Vocabulary &vocab,
                               const Delimiter &delim) {
  return to_ids(chunk_split(tokenize(text), delim), vocab);
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

/// Embedding table [V × dim]. Every row is first drawn uniform(−0.25, 0.25)
/// in id order; rows found in the file are then overwritten and the PAD row
/// is zeroed. An empty path yields the random table alone.
template <typename T>
Tensor<T> load_embeddings(const std::string &path, const Vocabulary &vocab,
                          std::size_t dim, Rng &rng, std::size_t *found = nullptr) {
  Tensor<T> table({vocab.size(), dim});
  for (auto &v : table.values()) v = static_cast<T>(rng.uniform(-0.25, 0.25));
  std::size_t hits = 0;
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read embeddings " + path);
    std::string line;
    std::size_t lineno = 0;
    std::vector<T> row;
    while (std::getline(is, line)) {
      ++lineno;
      std::istringstream ls(line);
      std::string tok;
      if (!(ls >> tok)) continue;
      row.clear();
      double x;
      while (ls >> x) row.push_back(static_cast<T>(x));
      if (!ls.eof())
        throw DataError(path + ":" + std::to_string(lineno) + ": non-numeric value");
      if (row.size() != dim)
        throw DataError(path + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(dim) + " values, found " + std::to_string(row.size()));
      if (!vocab.contains(tok)) continue;
      const int id = vocab.id(tok);
      if (id == kPadId) continue;
      std::copy(row.begin(), row.end(), table.row(static_cast<std::size_t>(id)).begin());
      ++hits;
    }
  }
  for (auto &v : table.row(kPadId)) v = T{0};
  if (found) *found = hits;
  return table;
}

// ---------------------------------------------------------------------------
// Triples and negative sampling
// ---------------------------------------------------------------------------

template <typename Text> struct QAPair {
  Text question;
  Text answer;
};

template <typename Text> struct Triple {
  Text question;
  Text answer;
  int flag = 0;
};

using RankingTriple = Triple<ChunkedText>;

/// One positive triple per pair followed by `n_neg` negatives whose answers
/// come, uniformly without replacement, from the other pairs.
template <typename Text>
std::vector<Triple<Text>> negative_sample(const std::vector<QAPair<Text>> &pairs,
                                          std::size_t n_neg, Rng &rng) {
  if (n_neg > 0 && n_neg + 1 > pairs.size())
    throw std::invalid_argument("negative_sample: " + std::to_string(n_neg) +
                                " negatives need at least " + std::to_string(n_neg + 1) +
                                " pairs, got " + std::to_string(pairs.size()));
  std::vector<Triple<Text>> out;
  out.reserve(pairs.size() * (1 + n_neg));
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    out.push_back({pairs[i].question, pairs[i].answer, 1});
    picked.clear();
    while (picked.size() < n_neg) {
      std::size_t j = rng.uniform_int(0, pairs.size() - 2);
      if (j >= i) ++j;
      if (std::find(picked.begin(), picked.end(), j) != picked.end()) continue;
      picked.push_back(j);
      out.push_back({pairs[i].question, pairs[j].answer, 0});
    }
  }
  return out;
}

/// A question with n candidates, exactly one of them the ground truth.
template <typename Text> struct Group {
  std::string id;
  Text question;
  std::vector<Text> candidates;
  std::vector<int> flags;

  std::size_t truth() const {
    return static_cast<std::size_t>(std::find(flags.begin(), flags.end(), 1) - flags.begin());
  }
};

using EvalGroup = Group<ChunkedText>;

/// Evaluation groups of 1 + n_neg candidates; the ground truth is placed at a
/// seeded random position.
template <typename Text>
std::vector<Group<Text>> make_groups(const std::vector<QAPair<Text>> &pairs,
                                     std::size_t n_neg, Rng &rng) {
  const auto triples = negative_sample(pairs, n_neg, rng);
  std::vector<Group<Text>> groups;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    Group<Text> g;
    g.id = std::to_string(i);
    g.question = pairs[i].question;
    std::vector<std::size_t> order(1 + n_neg);
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    rng.shuffle(order.begin(), order.end());
    for (auto k : order) {
      const auto &t = triples[i * (1 + n_neg) + k];
      g.candidates.push_back(t.answer);
      g.flags.push_back(t.flag);
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// PAD-filled [batch × chunks × words] id grid with true extents.
struct TextGrid {
  std::size_t batch = 0, chunks = 0, words = 0;
  std::vector<int> ids;                   // batch*chunks*words
  std::vector<std::size_t> chunk_lengths;  // batch*chunks, 0 for absent chunks
  std::vector<std::size_t> chunk_counts;   // batch

  int at(std::size_t b, std::size_t c, std::size_t w) const {
    return ids[(b * chunks + c) * words + w];
  }
  std::size_t length(std::size_t b, std::size_t c) const { return chunk_lengths[b * chunks + c]; }

  /// Grows the grid with PAD to at least the given extents.
  TextGrid padded(std::size_t new_chunks, std::size_t new_words) const {
    TextGrid g;
    g.batch = batch;
    g.chunks = std::max(chunks, new_chunks);
    g.words = std::max(words, new_words);
    g.ids.assign(g.batch * g.chunks * g.words, kPadId);
    g.chunk_lengths.assign(g.batch * g.chunks, 0);
    g.chunk_counts = chunk_counts;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < chunks; ++c) {
        g.chunk_lengths[b * g.chunks + c] = length(b, c);
        for (std::size_t w = 0; w < words; ++w)
          g.ids[(b * g.chunks + c) * g.words + w] = at(b, c, w);
      }
    return g;
  }
};

struct Batch {
  TextGrid question;
  TextGrid answer;
  std::vector<int> flags;

  std::size_t size() const { return flags.size(); }
};

/// Keeps the head of each chunk (max_words) and the tail of the chunk list
/// (max_chunks).
inline ChunkedText truncate(const ChunkedText &text, std::size_t max_words,
                            std::size_t max_chunks) {
  ChunkedText out;
  const std::size_t n = text.chunks.size();
  const std::size_t first = n > max_chunks ? n - max_chunks : 0;
  for (std::size_t c = first; c < n; ++c) {
    const auto &ch = text.chunks[c];
    out.chunks.emplace_back(ch.begin(), ch.begin() + std::min(ch.size(), max_words));
  }
  return out;
}

inline TextGrid make_grid(const std::vector<const ChunkedText *> &texts,
                          std::size_t max_words, std::size_t max_chunks) {
  std::vector<ChunkedText> cut;
  cut.reserve(texts.size());
  TextGrid g;
  g.batch = texts.size();
  for (const auto *t : texts) {
    if (t->chunks.empty()) throw DataError("batchify: text without chunks");
    cut.push_back(truncate(*t, max_words, max_chunks));
    g.chunks = std::max(g.chunks, cut.back().chunks.size());
    for (const auto &ch : cut.back().chunks) g.words = std::max(g.words, ch.size());
  }
  g.ids.assign(g.batch * g.chunks * g.words, kPadId);
  g.chunk_lengths.assign(g.batch * g.chunks, 0);
  g.chunk_counts.resize(g.batch);
  for (std::size_t b = 0; b < g.batch; ++b) {
    g.chunk_counts[b] = cut[b].chunks.size();
    for (std::size_t c = 0; c < cut[b].chunks.size(); ++c) {
      const auto &ch = cut[b].chunks[c];
      g.chunk_lengths[b * g.chunks + c] = ch.size();
      std::copy(ch.begin(), ch.end(), g.ids.begin() + static_cast<std::ptrdiff_t>((b * g.chunks + c) * g.words));
    }
  }
  return g;
}

inline Batch make_batch(std::span<const RankingTriple> triples, std::size_t max_words,
                        std::size_t max_chunks) {
  std::vector<const ChunkedText *> qs, as;
  Batch batch;
  for (const auto &t : triples) {
    qs.push_back(&t.question);
    as.push_back(&t.answer);
    batch.flags.push_back(t.flag);
  }
  batch.question = make_grid(qs, max_words, max_chunks);
  batch.answer = make_grid(as, max_words, max_chunks);
  return batch;
}

/// Splits triples, in order, into batches of at most batch_size.
inline std::vector<Batch> batchify(std::span<const RankingTriple> triples, std::size_t max_words,
                                   std::size_t max_chunks, std::size_t batch_size = 64) {
  if (max_words < 1 || max_chunks < 1 || batch_size < 1)
    throw std::invalid_argument("batchify: limits must be >= 1");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < triples.size(); i += batch_size)
    out.push_back(make_batch(triples.subspan(i, std::min(batch_size, triples.size() - i)),
                             max_words, max_chunks));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

using TextTriple = Triple<std::string>;
using TextPair = QAPair<std::string>;
using TextGroup = Group<std::string>;

namespace detail {

inline std::vector<std::string> split_tabs(const std::string &line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

inline int parse_flag(const std::string &s, const std::string &where) {
  if (s == "1") return 1;
  if (s == "0") return 0;
  throw DataError(where + ": flag must be 0 or 1, got '" + s + "'");
}

template <typename Fn> void for_each_line(const std::string &path, Fn &&fn) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    fn(line, path + ":" + std::to_string(lineno));
  }
}

}  // namespace detail

/// `question<TAB>answer` per line.
inline std::vector<TextPair> read_pairs(const std::string &path) {
  std::vector<TextPair> out;
  detail::for_each_line(path, [&](const std::string &line, const std::string &where) {
    auto f = detail::split_tabs(line);
    if (f.size() != 2) throw DataError(where + ": expected 2 tab-separated fields, found " + std::to_string(f.size()));
    out.push_back({f[0], f[1]});
  });
  return out;
}

/// `flag<TAB>question<TAB>answer` per line.
inline std::vector<TextTriple> read_triples(const std::string &path) {
  std::vector<TextTriple> out;
  detail::for_each_line(path, [&](const std::string &line, const std::string &where) {
    auto f = detail::split_tabs(line);
    if (f.size() != 3) throw DataError(where + ": expected 3 tab-separated fields, found " + std::to_string(f.size()));
    out.push_back({f[1], f[2], detail::parse_flag(f[0], where)});
  });
  return out;
}

inline void write_triples(const std::string &path, const std::vector<TextTriple> &triples) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  for (const auto &t : triples) os << t.flag << '\t' << t.question << '\t' << t.answer << '\n';
}

/// `group_id<TAB>flag<TAB>question<TAB>candidate` per line. Lines sharing a
/// group id form one group, in first-appearance order.
inline std::vector<TextGroup> read_groups(const std::string &path) {
  std::vector<TextGroup> out;
  std::unordered_map<std::string, std::size_t> where_of;
  detail::for_each_line(path, [&](const std::string &line, const std::string &where) {
    auto f = detail::split_tabs(line);
    if (f.size() != 4) throw DataError(where + ": expected 4 tab-separated fields, found " + std::to_string(f.size()));
    auto [it, fresh] = where_of.emplace(f[0], out.size());
    if (fresh) {
      out.emplace_back();
      out.back().id = f[0];
      out.back().question = f[2];
    } else if (out[it->second].question != f[2]) {
      throw DataError(where + ": group '" + f[0] + "' has differing question text");
    }
    auto &g = out[it->second];
    g.candidates.push_back(f[3]);
    g.flags.push_back(detail::parse_flag(f[1], where));
  });
  for (const auto &g : out)
    if (std::count(g.flags.begin(), g.flags.end(), 1) != 1)
      throw DataError(path + ": group '" + g.id + "' must have exactly one flag=1 candidate");
  return out;
}

inline void write_groups(const std::string &path, const std::vector<TextGroup> &groups) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  for (const auto &g : groups)
    for (std::size_t k = 0; k < g.candidates.size(); ++k)
      os << g.id << '\t' << g.flags[k] << '\t' << g.question << '\t' << g.candidates[k] << '\n';
}

inline RankingTriple encode_triple(const TextTriple &t, const Vocabulary &vocab,
                                   const Delimiter &delim) {
  return {encode_text(t.question, vocab, delim), encode_text(t.answer, vocab, delim), t.flag};
}

inline EvalGroup encode_group(const TextGroup &g, const Vocabulary &vocab, const Delimiter &delim) {
  EvalGroup out;
  out.id = g.id;
  out.question = encode_text(g.question, vocab, delim);
  for (const auto &c : g.candidates) out.candidates.push_back(encode_text(c, vocab, delim));
  out.flags = g.flags;
  return out;
}

}  // namespace rankhier
