// SPDX-License-Identifier: Apache-2.0
/**
 * @file   encoders.hpp
 * @brief  GRU cell, flat and hierarchical dual encoders, latent topic
 *         clustering, and the bilinear matching score.
 *
 * Four model kinds share one parameter layout:
 *
 *   rde       q = GRU(words)            score = σ(qᵀ M a + b)
 *   hrde      q = GRU_c(GRU_w(chunk)…)  score = σ(qᵀ M a + b)
 *   *-ltc     the configured side's vector x becomes concat{x, Σ_k p_k m_k}
 *             with p = softmax(x·mᵀ), and M widens to match.
 *
 * Question and answer sides always run through the same GRU objects.
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rankhier/autodiff.hpp"
#include "rankhier/random.hpp"
#include "rankhier/tensor.hpp"
#include "rankhier/textprep.hpp"

namespace rankhier {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ModelKind { kRde, kRdeLtc, kHrde, kHrdeLtc };
enum class Side { kQuestion, kAnswer };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::kRde: return "rde";
    case ModelKind::kRdeLtc: return "rde-ltc";
    case ModelKind::kHrde: return "hrde";
    case ModelKind::kHrdeLtc: return "hrde-ltc";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string &s) {
  if (s == "rde") return ModelKind::kRde;
  if (s == "rde-ltc") return ModelKind::kRdeLtc;
  if (s == "hrde") return ModelKind::kHrde;
  if (s == "hrde-ltc") return ModelKind::kHrdeLtc;
  throw ConfigError("unknown model kind '" + s + "' (expected rde, rde-ltc, hrde, hrde-ltc)");
}

inline std::string to_string(Side s) { return s == Side::kQuestion ? "question" : "answer"; }

inline Side parse_side(const std::string &s) {
  if (s == "question" || s == "context") return Side::kQuestion;
  if (s == "answer" || s == "response") return Side::kAnswer;
  throw ConfigError("unknown side '" + s + "' (expected question or answer)");
}

struct ModelConfig {
  ModelKind kind = ModelKind::kRde;
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 300;
  std::size_t hidden = 300;        // RDE hidden size, HRDE word-level size
  std::size_t chunk_hidden = 300;  // HRDE chunk-level size
  std::size_t memory_dim = 256;    // topic vector size
  std::size_t clusters = 3;        // topic count
  Side ltc_side = Side::kAnswer;
  double embed_dropout = 0.2;      // on word inputs at every step
  double memory_dropout = 0.8;     // on topic memory rows

  bool hierarchical() const { return kind == ModelKind::kHrde || kind == ModelKind::kHrdeLtc; }
  bool has_ltc() const { return kind == ModelKind::kRdeLtc || kind == ModelKind::kHrdeLtc; }
  std::size_t encoding_dim() const { return hierarchical() ? chunk_hidden : hidden; }
  std::size_t question_dim() const {
    return encoding_dim() + (has_ltc() && ltc_side == Side::kQuestion ? memory_dim : 0);
  }
  std::size_t answer_dim() const {
    return encoding_dim() + (has_ltc() && ltc_side == Side::kAnswer ? memory_dim : 0);
  }

  /// Word-input dropout used for a kind unless configured otherwise.
  static double default_embed_dropout(ModelKind k) {
    return k == ModelKind::kHrde || k == ModelKind::kHrdeLtc ? 0.3 : 0.2;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char *name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(vocab_size, "vocab-size");
    positive(embed_dim, "embed-dim");
    positive(hidden, "hidden");
    if (hierarchical()) positive(chunk_hidden, "chunk-hidden");
    if (has_ltc()) {
      positive(memory_dim, "memory-dim");
      positive(clusters, "clusters");
    }
    for (auto [rate, name] : {std::pair{embed_dropout, "embed-dropout"},
                              std::pair{memory_dropout, "memory-dropout"}})
      if (!(rate >= 0.0 && rate < 1.0))
        throw ConfigError(std::string(name) + " must lie in [0, 1)");
  }

  std::map<std::string, std::string> to_kv() const {
    return {{"model", to_string(kind)},
            {"vocab-size", std::to_string(vocab_size)},
            {"embed-dim", std::to_string(embed_dim)},
            {"hidden", std::to_string(hidden)},
            {"chunk-hidden", std::to_string(chunk_hidden)},
            {"memory-dim", std::to_string(memory_dim)},
            {"clusters", std::to_string(clusters)},
            {"ltc-side", to_string(ltc_side)},
            {"embed-dropout", format_double(embed_dropout)},
            {"memory-dropout", format_double(memory_dropout)}};
  }

  static std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
};

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

namespace init {

template <typename T> Tensor<T> uniform(Shape shape, double limit, Rng &rng) {
  Tensor<T> t(std::move(shape));
  for (auto &v : t.values()) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

/// Glorot uniform for a [fan_out × fan_in] map.
template <typename T> Tensor<T> glorot(std::size_t fan_out, std::size_t fan_in, Rng &rng) {
  return uniform<T>({fan_out, fan_in}, std::sqrt(6.0 / double(fan_in + fan_out)), rng);
}

template <typename T> Tensor<T> gaussian(Shape shape, double stddev, Rng &rng) {
  Tensor<T> t(std::move(shape));
  for (auto &v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

/// Orthogonal [n × n] matrix: Q from the QR factorization of a seeded
/// Gaussian matrix, with columns signed so that diag(R) > 0.
template <typename T> Tensor<T> orthogonal(std::size_t n, Rng &rng) {
  std::vector<double> a(n * n);
  for (auto &v : a) v = rng.normal(0.0, 1.0);
  // Modified Gram-Schmidt over columns; a[i*n + j] is row i, column j.
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += a[i * n + k] * a[i * n + j];
      for (std::size_t i = 0; i < n; ++i) a[i * n + j] -= dot * a[i * n + k];
    }
    double norm = 0;
    for (std::size_t i = 0; i < n; ++i) norm += a[i * n + j] * a[i * n + j];
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < n; ++i) a[i * n + j] /= norm;
  }
  Tensor<T> q({n, n});
  for (std::size_t i = 0; i < n * n; ++i) q[i] = static_cast<T>(a[i]);
  return q;
}

}  // namespace init

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

/// z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
/// h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h), h' = (1 − z) ⊙ h + z ⊙ h̃.
template <typename T> struct GRUCellParams {
  std::size_t input_dim = 0, hidden_dim = 0;
  Parameter<T> W_z, W_r, W_h;  // [hidden × input]
  Parameter<T> U_z, U_r, U_h;  // [hidden × hidden]
  Parameter<T> b_z, b_r, b_h;  // [hidden]

  GRUCellParams() = default;

  GRUCellParams(const std::string &prefix, std::size_t d_in, std::size_t d, Rng &rng)
      : input_dim(d_in), hidden_dim(d),
        W_z(prefix + ".W_z", init::glorot<T>(d, d_in, rng)),
        W_r(prefix + ".W_r", init::glorot<T>(d, d_in, rng)),
        W_h(prefix + ".W_h", init::glorot<T>(d, d_in, rng)),
        U_z(prefix + ".U_z", init::orthogonal<T>(d, rng)),
        U_r(prefix + ".U_r", init::orthogonal<T>(d, rng)),
        U_h(prefix + ".U_h", init::orthogonal<T>(d, rng)),
        b_z(prefix + ".b_z", Tensor<T>({d})),
        b_r(prefix + ".b_r", Tensor<T>({d})),
        b_h(prefix + ".b_h", Tensor<T>({d})) {}

  std::vector<Parameter<T> *> parameters() {
    return {&W_z, &W_r, &W_h, &U_z, &U_r, &U_h, &b_z, &b_r, &b_h};
  }
  std::vector<const Parameter<T> *> parameters() const {
    return {&W_z, &W_r, &W_h, &U_z, &U_r, &U_h, &b_z, &b_r, &b_h};
  }

  void check() const {
    for (const auto *w : {&W_z, &W_r, &W_h})
      if (w->value.shape() != Shape{hidden_dim, input_dim})
        throw ShapeError(w->name + ": expected " + shape_str({hidden_dim, input_dim}) + ", got " +
                         shape_str(w->value.shape()));
    for (const auto *u : {&U_z, &U_r, &U_h})
      if (u->value.shape() != Shape{hidden_dim, hidden_dim})
        throw ShapeError(u->name + ": expected " + shape_str({hidden_dim, hidden_dim}) +
                         ", got " + shape_str(u->value.shape()));
    for (const auto *b : {&b_z, &b_r, &b_h})
      if (b->value.shape() != Shape{hidden_dim})
        throw ShapeError(b->name + ": expected " + shape_str({hidden_dim}) + ", got " +
                         shape_str(b->value.shape()));
  }
};

/// GRU parameters bound to one tape.
template <typename T> struct BoundGRU {
  Var<T> W_z, W_r, W_h, U_z, U_r, U_h, b_z, b_r, b_h;

  template <typename Params> static BoundGRU bind(Tape<T> &tape, Params &p) {
    return {tape.param(p.W_z), tape.param(p.W_r), tape.param(p.W_h),
            tape.param(p.U_z), tape.param(p.U_r), tape.param(p.U_h),
            tape.param(p.b_z), tape.param(p.b_r), tape.param(p.b_h)};
  }
};

/// One GRU step over a batch: h_prev [B×d], x [B×d_in] -> [B×d].
template <typename T> Var<T> gru_step(const BoundGRU<T> &g, Var<T> h_prev, Var<T> x) {
  const auto z = sigmoid(add_row(add(linear(x, g.W_z), linear(h_prev, g.U_z)), g.b_z));
  const auto r = sigmoid(add_row(add(linear(x, g.W_r), linear(h_prev, g.U_r)), g.b_r));
  const auto cand =
      tanh(add_row(add(linear(x, g.W_h), linear(mul(r, h_prev), g.U_h)), g.b_h));
  return add(mul(one_minus(z), h_prev), mul(z, cand));
}

/// Runs the GRU from h0 over inputs produced by `input_at(t)`. Row i advances
/// only while t < lengths[i]; later steps leave its state bit-identical.
/// When `states` is given, the state after every step is appended to it.
template <typename T, typename InputFn>
Var<T> run_gru(const BoundGRU<T> &g, Var<T> h0, const std::vector<std::size_t> &lengths,
               InputFn &&input_at, std::vector<Var<T>> *states = nullptr) {
  std::size_t steps = 0;
  for (auto l : lengths) steps = std::max(steps, l);
  Var<T> h = h0;
  std::vector<std::uint8_t> live(lengths.size());
  for (std::size_t t = 0; t < steps; ++t) {
    bool all = true;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
      live[i] = t < lengths[i];
      all = all && live[i];
    }
    const Var<T> next = gru_step(g, h, input_at(t));
    h = all ? next : select_rows(live, next, h);
    if (states) states->push_back(h);
  }
  return h;
}

/// Single-vector convenience: h_prev [d], x [d_in] -> [d].
template <typename T>
Tensor<T> gru_step(const GRUCellParams<T> &params, const Tensor<T> &h_prev, const Tensor<T> &x) {
  params.check();
  if (h_prev.size() != params.hidden_dim || x.size() != params.input_dim)
    throw ShapeError("gru_step: state " + shape_str(h_prev.shape()) + " / input " +
                     shape_str(x.shape()) + " do not fit a GRU " +
                     shape_str({params.hidden_dim, params.input_dim}));
  Tape<T> tape;
  const auto g = BoundGRU<T>::bind(tape, params);
  const auto h = tape.constant(h_prev.reshaped({1, params.hidden_dim}));
  const auto in = tape.constant(x.reshaped({1, params.input_dim}));
  return gru_step(g, h, in).value().reshaped({params.hidden_dim});
}

/// Final state after `true_length` steps over embedded [T × d_in], from h0 = 0.
template <typename T>
Tensor<T> encode_sequence(const GRUCellParams<T> &params, const Tensor<T> &embedded,
                          std::size_t true_length) {
  params.check();
  if (embedded.rank() != 2 || embedded.shape()[1] != params.input_dim)
    throw ShapeError("encode_sequence: inputs " + shape_str(embedded.shape()) +
                     " do not match input width " + std::to_string(params.input_dim));
  if (true_length == 0 || true_length > embedded.shape()[0])
    throw std::invalid_argument("encode_sequence: true_length must lie in [1, " +
                                std::to_string(embedded.shape()[0]) + "]");
  Tape<T> tape;
  const auto g = BoundGRU<T>::bind(tape, params);
  const auto x = tape.constant(embedded);
  const auto h = run_gru(g, tape.constant(Tensor<T>({1, params.hidden_dim})),
                         std::vector<std::size_t>{true_length},
                         [&](std::size_t t) { return gather_rows(x, {t}); });
  return h.value().reshaped({params.hidden_dim});
}

// ---------------------------------------------------------------------------
// Latent topic clustering
// ---------------------------------------------------------------------------

template <typename T> struct LTCModule {
  std::size_t clusters = 0, memory_dim = 0, input_dim = 0;
  Parameter<T> memory;                     // [K × d^m]
  std::optional<Parameter<T>> projection;  // [d^m × d_x] when d_x != d^m

  LTCModule() = default;

  LTCModule(std::size_t k, std::size_t d_m, std::size_t d_x, Rng &rng)
      : clusters(k), memory_dim(d_m), input_dim(d_x),
        memory("ltc.memory", init::uniform<T>({k, d_m}, 0.1, rng)) {
    if (k == 0) throw ConfigError("ltc: cluster count must be >= 1");
    if (d_x != d_m) projection.emplace("ltc.projection", init::glorot<T>(d_m, d_x, rng));
  }

  /// Wraps an existing memory with no projection.
  static LTCModule from_memory(Tensor<T> m) {
    LTCModule l;
    if (m.rank() != 2 || m.shape()[0] == 0) throw ShapeError("ltc: memory must be [K × d^m], K >= 1");
    l.clusters = m.shape()[0];
    l.memory_dim = m.shape()[1];
    l.input_dim = l.memory_dim;
    l.memory = Parameter<T>("ltc.memory", std::move(m));
    return l;
  }

  std::vector<Parameter<T> *> parameters() {
    std::vector<Parameter<T> *> out{&memory};
    if (projection) out.push_back(&*projection);
    return out;
  }
  std::vector<const Parameter<T> *> parameters() const {
    std::vector<const Parameter<T> *> out{&memory};
    if (projection) out.push_back(&*projection);
    return out;
  }

  std::size_t output_dim() const { return input_dim + memory_dim; }
};

/// Result of the topic step over a batch.
template <typename T> struct TopicOutput {
  Var<T> probs;     // [B × K]
  Var<T> enriched;  // [B × (d_x + d^m)]
};

/// p = softmax((P x)·mᵀ), e = concat{x, p·m}. Memory dropout applies only in
/// training.
template <typename T, typename Module>
TopicOutput<T> ltc_forward(Module &ltc, Var<T> x, bool training, double memory_dropout, Rng &rng) {
  Tape<T> &tape = *x.tape;
  if (x.value().cols() != ltc.input_dim)
    throw ShapeError("ltc: input width " + std::to_string(x.value().cols()) +
                     " does not match module input " + std::to_string(ltc.input_dim));
  Var<T> m = dropout(tape.param(ltc.memory), memory_dropout, training, rng);
  Var<T> key = ltc.projection ? linear(x, tape.param(*ltc.projection)) : x;
  const Var<T> probs = softmax(linear(key, m));
  return {probs, concat(x, matmul(probs, m))};
}

namespace detail {
template <typename T> Tensor<T> as_row(const Tensor<T> &v) { return v.reshaped({1, v.size()}); }
}  // namespace detail

/// Topic distribution for a single vector.
template <typename T> Tensor<T> ltc_probs(const LTCModule<T> &ltc, const Tensor<T> &x) {
  if (x.size() != ltc.input_dim)
    throw ShapeError("ltc_probs: input of size " + std::to_string(x.size()) +
                     " needs a projection to match memory dimension " +
                     std::to_string(ltc.memory_dim));
  Tape<T> tape;
  Rng unused;
  auto out = ltc_forward(ltc, tape.constant(detail::as_row(x)), false, 0.0, unused);
  return out.probs.value().reshaped({ltc.clusters});
}

/// concat{x, Σ_k p_k m_k} for a single vector.
template <typename T> Tensor<T> ltc_apply(const LTCModule<T> &ltc, const Tensor<T> &x) {
  if (x.size() != ltc.input_dim)
    throw ShapeError("ltc_apply: input of size " + std::to_string(x.size()) +
                     " needs a projection to match memory dimension " +
                     std::to_string(ltc.memory_dim));
  Tape<T> tape;
  Rng unused;
  auto out = ltc_forward(ltc, tape.constant(detail::as_row(x)), false, 0.0, unused);
  return out.enriched.value().reshaped({ltc.output_dim()});
}

// ---------------------------------------------------------------------------
// Bilinear score
// ---------------------------------------------------------------------------

/// σ(q_i ᵀ M a_i + b) per row: q [B×p], M [p×q], a [B×q], b scalar.
template <typename T> Var<T> bilinear_score(Var<T> q, Var<T> M, Var<T> b, Var<T> a) {
  return sigmoid(add_scalar(row_dot(matmul(q, M), a), b));
}

template <typename T>
T score_pair(const Tensor<T> &M, T b, const Tensor<T> &q_vec, const Tensor<T> &a_vec) {
  if (M.rank() != 2 || M.shape()[0] != q_vec.size() || M.shape()[1] != a_vec.size())
    throw ShapeError("score_pair: M " + shape_str(M.shape()) + " does not fit q " +
                     shape_str(q_vec.shape()) + " and a " + shape_str(a_vec.shape()));
  Tape<T> tape;
  const auto out = bilinear_score(tape.constant(detail::as_row(q_vec)), tape.constant(M),
                                  tape.constant(Tensor<T>::scalar(b)),
                                  tape.constant(detail::as_row(a_vec)));
  return out.value()[0];
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

/// Per-side encodings and the matching probabilities for one batch.
template <typename T> struct ForwardOutput {
  Var<T> probs;        // [B]
  Var<T> question;     // [B × question_dim]
  Var<T> answer;       // [B × answer_dim]
  Var<T> ltc_input;    // [B × encoding_dim] on the LTC side
  std::optional<Var<T>> topic_probs;  // [B × K]
};

template <typename T> class DualEncoder {
 public:
  DualEncoder() = default;

  /// Fresh model. `embeddings`, when given, must be [vocab_size × embed_dim].
  DualEncoder(const ModelConfig &config, Rng &rng,
              std::optional<Tensor<T>> embeddings = std::nullopt)
      : config_(config) {
    config_.validate();
    Rng emb_rng = rng.split(), word_rng = rng.split(), chunk_rng = rng.split(),
        ltc_rng = rng.split(), out_rng = rng.split();
    if (embeddings) {
      if (embeddings->shape() != Shape{config_.vocab_size, config_.embed_dim})
        throw ConfigError("embedding table " + shape_str(embeddings->shape()) +
                          " does not match vocab-size x embed-dim " +
                          shape_str({config_.vocab_size, config_.embed_dim}));
      embedding_ = Parameter<T>("embedding", std::move(*embeddings));
    } else {
      auto table = init::uniform<T>({config_.vocab_size, config_.embed_dim}, 0.25, emb_rng);
      for (auto &v : table.row(kPadId)) v = T{0};
      embedding_ = Parameter<T>("embedding", std::move(table));
    }
    word_ = GRUCellParams<T>("word_gru", config_.embed_dim, config_.hidden, word_rng);
    if (config_.hierarchical())
      chunk_.emplace("chunk_gru", config_.hidden, config_.chunk_hidden, chunk_rng);
    if (config_.has_ltc())
      ltc_.emplace(config_.clusters, config_.memory_dim, config_.encoding_dim(), ltc_rng);
    M_ = Parameter<T>("bilinear.M",
                      init::gaussian<T>({config_.question_dim(), config_.answer_dim()}, 0.01, out_rng));
    b_ = Parameter<T>("bilinear.b", Tensor<T>::scalar(T{0}));
  }

  const ModelConfig &config() const { return config_; }

  std::vector<Parameter<T> *> parameters() { return collect<Parameter<T>>(*this); }
  std::vector<const Parameter<T> *> parameters() const {
    return collect<const Parameter<T>>(*this);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto *p : parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto *p : parameters()) p->zero_grad();
  }

  Parameter<T> *find(const std::string &name) {
    for (auto *p : parameters())
      if (p->name == name) return p;
    return nullptr;
  }

  GRUCellParams<T> &word_gru() { return word_; }
  const GRUCellParams<T> &word_gru() const { return word_; }
  const std::optional<GRUCellParams<T>> &chunk_gru() const { return chunk_; }
  std::optional<GRUCellParams<T>> &chunk_gru() { return chunk_; }
  const std::optional<LTCModule<T>> &ltc() const { return ltc_; }
  std::optional<LTCModule<T>> &ltc() { return ltc_; }
  const Parameter<T> &embedding() const { return embedding_; }
  const Parameter<T> &bilinear() const { return M_; }
  const Parameter<T> &bias() const { return b_; }

  /// Differentiable forward pass; gradients reach this model's parameters.
  ForwardOutput<T> forward(Tape<T> &tape, const Batch &batch, bool training, Rng &rng) {
    return forward_impl(*this, tape, batch, training, rng);
  }

  /// Inference pass; no gradient flows to the (const) parameters.
  ForwardOutput<T> forward(Tape<T> &tape, const Batch &batch) const {
    Rng unused;
    return forward_impl(*this, tape, batch, false, unused);
  }

  /// Matching probabilities for a batch in evaluation mode.
  std::vector<T> predict(const Batch &batch) const {
    Tape<T> tape;
    const auto out = forward(tape, batch);
    const auto v = out.probs.value().values();
    return {v.begin(), v.end()};
  }

  /// Encodes one side of a batch without LTC: [B × encoding_dim].
  Var<T> encode(Tape<T> &tape, const TextGrid &grid) const {
    Rng unused;
    return encode_impl(*this, tape, grid, false, unused, nullptr);
  }

  /// Word-level then chunk-level encoding of one text; returns u_final and
  /// all chunk states [C × d^u].
  std::pair<Tensor<T>, Tensor<T>> hrde_encode(const ChunkedText &text) const {
    if (!config_.hierarchical()) throw ConfigError("hrde_encode on a flat model");
    if (text.chunks.empty()) throw std::invalid_argument("hrde_encode: empty text");
    Tape<T> tape;
    const auto grid = single_grid(text);
    std::vector<Var<T>> states;
    Rng unused;
    const auto u = encode_impl(*this, tape, grid, false, unused, &states);
    Tensor<T> all({states.size(), config_.chunk_hidden});
    for (std::size_t c = 0; c < states.size(); ++c)
      std::copy_n(states[c].value().data(), config_.chunk_hidden, all.data() + c * config_.chunk_hidden);
    return {u.value().reshaped({config_.chunk_hidden}), std::move(all)};
  }

  /// Flat word-level encoding of one text (chunk boundaries ignored).
  Tensor<T> rde_encode(const ChunkedText &text) const {
    if (config_.hierarchical()) throw ConfigError("rde_encode on a hierarchical model");
    if (text.num_tokens() == 0) throw std::invalid_argument("rde_encode: empty text");
    Tape<T> tape;
    return encode(tape, single_grid(text)).value().reshaped({config_.hidden});
  }

  /// Encoding of a single text with the model's own encoder.
  Tensor<T> encode_text(const ChunkedText &text) const {
    Tape<T> tape;
    return encode(tape, single_grid(text)).value().reshaped({config_.encoding_dim()});
  }

 private:
  static TextGrid single_grid(const ChunkedText &text) {
    std::size_t words = 1;
    for (const auto &c : text.chunks) words = std::max(words, c.size());
    return make_grid({&text}, words, std::max<std::size_t>(1, text.chunks.size()));
  }

  template <typename P, typename Self> static std::vector<P *> collect(Self &self) {
    std::vector<P *> out{&self.embedding_};
    for (auto *p : self.word_.parameters()) out.push_back(p);
    if (self.chunk_)
      for (auto *p : self.chunk_->parameters()) out.push_back(p);
    if (self.ltc_)
      for (auto *p : self.ltc_->parameters()) out.push_back(p);
    out.push_back(&self.M_);
    out.push_back(&self.b_);
    return out;
  }

  /// Flattens the chunks of every row into one PAD-filled sequence.
  static void flatten(const TextGrid &grid, std::vector<int> &ids, std::vector<std::size_t> &lengths,
                      std::size_t &width) {
    lengths.assign(grid.batch, 0);
    for (std::size_t b = 0; b < grid.batch; ++b)
      for (std::size_t c = 0; c < grid.chunks; ++c) lengths[b] += grid.length(b, c);
    width = 0;
    for (auto l : lengths) width = std::max(width, l);
    ids.assign(grid.batch * width, kPadId);
    for (std::size_t b = 0; b < grid.batch; ++b) {
      std::size_t pos = 0;
      for (std::size_t c = 0; c < grid.chunks; ++c)
        for (std::size_t w = 0; w < grid.length(b, c); ++w) ids[b * width + pos++] = grid.at(b, c, w);
    }
  }

  /// Runs the word GRU over rows of `ids` [rows × width].
  template <typename Self>
  static Var<T> word_level(Self &self, Tape<T> &tape, const std::vector<int> &ids,
                           const std::vector<std::size_t> &lengths, std::size_t width,
                           bool training, Rng &rng) {
    const std::size_t rows = lengths.size();
    const auto g = BoundGRU<T>::bind(tape, self.word_);
    const auto table = tape.param(self.embedding_);
    const double rate = self.config_.embed_dropout;
    std::vector<int> column(rows);
    return run_gru(g, tape.constant(Tensor<T>({rows, self.config_.hidden})), lengths,
                   [&](std::size_t t) {
                     for (std::size_t r = 0; r < rows; ++r) column[r] = ids[r * width + t];
                     return dropout(rankhier::embedding(table, column), rate, training, rng);
                   });
  }

  template <typename Self>
  static Var<T> encode_impl(Self &self, Tape<T> &tape, const TextGrid &grid, bool training,
                            Rng &rng, std::vector<Var<T>> *chunk_states) {
    if (grid.batch == 0) throw std::invalid_argument("encode: empty batch");
    for (auto n : grid.chunk_counts)
      if (n == 0) throw std::invalid_argument("encode: text without chunks");
    if (!self.config_.hierarchical()) {
      std::vector<int> ids;
      std::vector<std::size_t> lengths;
      std::size_t width = 0;
      flatten(grid, ids, lengths, width);
      for (auto l : lengths)
        if (l == 0) throw std::invalid_argument("encode: empty text");
      return word_level(self, tape, ids, lengths, width, training, rng);
    }
    // Word level over every (row, chunk) slot; absent chunks have length 0
    // and keep a zero state.
    const Var<T> words =
        word_level(self, tape, grid.ids, grid.chunk_lengths, grid.words, training, rng);
    const auto g = BoundGRU<T>::bind(tape, *self.chunk_);
    std::vector<std::size_t> rows(grid.batch);
    return run_gru(g, tape.constant(Tensor<T>({grid.batch, self.config_.chunk_hidden})),
                   grid.chunk_counts, [&](std::size_t c) {
                     for (std::size_t b = 0; b < grid.batch; ++b) rows[b] = b * grid.chunks + c;
                     return gather_rows(words, rows);
                   },
                   chunk_states);
  }

  template <typename Self>
  static ForwardOutput<T> forward_impl(Self &self, Tape<T> &tape, const Batch &batch,
                                       bool training, Rng &rng) {
    const auto &cfg = self.config_;
    if (batch.question.batch != batch.size() || batch.answer.batch != batch.size())
      throw ShapeError("forward: batch grids disagree with flag count");
    ForwardOutput<T> out;
    out.question = encode_impl(self, tape, batch.question, training, rng, nullptr);
    out.answer = encode_impl(self, tape, batch.answer, training, rng, nullptr);
    if (self.ltc_) {
      Var<T> &side = cfg.ltc_side == Side::kQuestion ? out.question : out.answer;
      out.ltc_input = side;
      auto topic = ltc_forward<T>(*self.ltc_, side, training, cfg.memory_dropout, rng);
      out.topic_probs = topic.probs;
      side = topic.enriched;
    }
    out.probs = bilinear_score(out.question, tape.param(self.M_), tape.param(self.b_), out.answer);
    return out;
  }

  ModelConfig config_;
  Parameter<T> embedding_;
  GRUCellParams<T> word_;
  std::optional<GRUCellParams<T>> chunk_;
  std::optional<LTCModule<T>> ltc_;
  Parameter<T> M_;
  Parameter<T> b_;
};

}  // namespace rankhier
