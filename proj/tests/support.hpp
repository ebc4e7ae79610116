// SPDX-License-Identifier: Apache-2.0
/**
 * @file   support.hpp
 * @brief  Shared test helpers: a central-difference gradient oracle, small
 *         hand-built batches and synthetic ranking corpora.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "rankhier/autodiff.hpp"
#include "rankhier/encoders.hpp"
#include "rankhier/textprep.hpp"
#include "rankhier/training.hpp"

namespace rhtest {

using namespace rankhier;

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Relative error with a floor on the denominator so entries whose true
/// gradient is (numerically) zero compare on absolute error instead.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

struct GradReport {
  double max_rel = 0.0;
  std::string worst;  // "name[index] analytic vs numeric"
  std::size_t checked = 0;
};

/// Compares tape gradients with central differences (step h) for every entry
/// of every parameter. `loss(backward)` must build a fresh tape, return the
/// scalar loss and run backward when asked.
inline GradReport check_gradients(const std::vector<Parameter<double> *> &params,
                                  const std::function<double(bool)> &loss, double h = 1e-5) {
  for (auto *p : params) p->zero_grad();
  loss(true);
  std::vector<Tensor<double>> analytic;
  for (auto *p : params) analytic.push_back(p->grad);
  GradReport rep;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto &v = params[i]->value;
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double saved = v[j];
      v[j] = saved + h;
      const double up = loss(false);
      v[j] = saved - h;
      const double down = loss(false);
      v[j] = saved;
      const double numeric = (up - down) / (2 * h);
      const double e = rel_error(analytic[i][j], numeric);
      ++rep.checked;
      if (e > rep.max_rel) {
        rep.max_rel = e;
        rep.worst = params[i]->name + "[" + std::to_string(j) + "] " +
                    std::to_string(analytic[i][j]) + " vs " + std::to_string(numeric);
      }
    }
  }
  for (auto *p : params) p->zero_grad();
  return rep;
}

/// Random tensor in [-scale, scale].
template <typename T = double> Tensor<T> random_tensor(Shape shape, Rng &rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto &v : t.values()) v = static_cast<T>(rng.uniform(-scale, scale));
  return t;
}

// ---------------------------------------------------------------------------
// Small models and batches
// ---------------------------------------------------------------------------

inline ModelConfig small_config(ModelKind kind, std::size_t vocab = 20) {
  ModelConfig c;
  c.kind = kind;
  c.vocab_size = vocab;
  c.embed_dim = 4;
  c.hidden = 4;
  c.chunk_hidden = 4;
  c.memory_dim = 3;
  c.clusters = 3;
  c.embed_dropout = 0.0;
  c.memory_dropout = 0.0;
  return c;
}

inline const std::vector<ModelKind> &all_kinds() {
  static const std::vector<ModelKind> k = {ModelKind::kRde, ModelKind::kRdeLtc, ModelKind::kHrde,
                                           ModelKind::kHrdeLtc};
  return k;
}

inline ChunkedText text(std::vector<std::vector<int>> chunks) { return ChunkedText{std::move(chunks)}; }

/// Three triples with ragged chunk counts and lengths, vocabulary < 20.
inline std::vector<RankingTriple> ragged_triples() {
  return {
      {text({{2, 3, 4}, {5, 6}}), text({{7, 8}}), 1},
      {text({{9}}), text({{10, 11, 12}, {13}, {14, 15}}), 0},
      {text({{16, 17}, {18}, {19, 2, 3, 4}}), text({{5}}), 1},
  };
}

/// Mean cross-entropy of a model on a batch, in evaluation mode.
template <typename T> double model_loss(DualEncoder<T> &model, const Batch &batch, bool backward) {
  Tape<T> tape;
  Rng rng(0);
  const auto out = model.forward(tape, batch, false, rng);
  const auto loss = bce_loss(out.probs, batch.flags);
  if (backward) tape.backward(loss);
  return static_cast<double>(loss.value().item());
}

/// Model with small random weights everywhere (M and biases included) so no
/// gradient is structurally tiny.
inline DualEncoder<double> perturbed_model(ModelKind kind, std::uint64_t seed, Side side = Side::kAnswer) {
  auto cfg = small_config(kind);
  cfg.ltc_side = side;
  Rng rng(seed);
  DualEncoder<double> m(cfg, rng);
  for (auto *p : m.parameters())
    if (p->name == "bilinear.M" || p->name == "bilinear.b" || p->name.find(".b_") != std::string::npos)
      for (auto &v : p->value.values()) v = rng.uniform(-0.5, 0.5);
  return m;
}

/// Pairs whose question and answer share one "key" id from [2, 2+keys);
/// the remaining words are filler drawn from [2+keys, vocab).
inline std::vector<QAPair<ChunkedText>> keyed_pairs(std::size_t n, std::size_t keys, std::size_t vocab,
                                                    Rng &rng, std::size_t words = 4) {
  std::vector<QAPair<ChunkedText>> out;
  auto filler = [&] { return static_cast<int>(rng.uniform_int(2 + keys, vocab - 1)); };
  for (std::size_t i = 0; i < n; ++i) {
    const int key = static_cast<int>(2 + i % keys);
    std::vector<int> q{key}, a{key};
    for (std::size_t w = 1; w < words; ++w) q.push_back(filler()), a.push_back(filler());
    out.push_back({text({q}), text({a})});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Temporary directories
// ---------------------------------------------------------------------------

class TempDir {
 public:
  explicit TempDir(const std::string &tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("rankhier-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::string file(const std::string &name) const { return (path_ / name).string(); }
  const std::filesystem::path &path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace rhtest
