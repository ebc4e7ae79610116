// SPDX-License-Identifier: Apache-2.0
/**
 * @file   training.hpp
 * @brief  Cross-entropy loss, global-norm clipping, Adam, and the epoch loop.
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rankhier/autodiff.hpp"
#include "rankhier/encoders.hpp"
#include "rankhier/evaluation.hpp"
#include "rankhier/textprep.hpp"

namespace rankhier {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean binary cross-entropy over a batch, probabilities clamped to
/// [1e-7, 1 − 1e-7].
template <typename T> Var<T> bce_loss(Var<T> probs, std::span<const int> flags) {
  std::vector<T> labels;
  labels.reserve(flags.size());
  for (int f : flags) {
    if (f != 0 && f != 1) throw std::invalid_argument("bce_loss: labels must be 0 or 1");
    labels.push_back(static_cast<T>(f));
  }
  return bce(probs, std::move(labels));
}

template <typename T> double bce_loss(std::span<const T> probs, std::span<const int> flags) {
  Tape<T> tape;
  const auto p = tape.constant(Tensor<T>({probs.size()}, std::vector<T>(probs.begin(), probs.end())));
  return static_cast<double>(bce_loss(p, flags).value().item());
}

template <typename T> double global_norm(std::span<Parameter<T> *const> params) {
  double total = 0;
  for (const auto *p : params)
    for (T g : p->grad.values()) total += double(g) * double(g);
  return std::sqrt(total);
}

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T> double clip_global_norm(std::span<Parameter<T> *const> params, double max_norm) {
  if (!(max_norm > 0)) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  const double norm = global_norm(params);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto *p : params)
      for (T &g : p->grad.values()) g *= factor;
  }
  return norm;
}

template <typename T> struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> first, second;

  bool initialized() const { return !first.empty() || step > 0; }

  static AdamState init(std::span<Parameter<T> *const> params) {
    AdamState s;
    for (const auto *p : params) {
      s.first.emplace_back(p->value.shape());
      s.second.emplace_back(p->value.shape());
    }
    return s;
  }
};

/// One Adam step with bias correction:
/// θ ← θ − lr · m̂ / (√v̂ + ε).
template <typename T>
void adam_update(AdamState<T> &state, std::span<Parameter<T> *const> params, double lr) {
  if (state.first.size() != params.size() || state.second.size() != params.size())
    throw std::logic_error("adam_update: optimizer state not initialized for these parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto &p = *params[i];
    auto &m = state.first[i];
    auto &v = state.second[i];
    if (m.shape() != p.value.shape())
      throw std::logic_error("adam_update: moment shape mismatch for " + p.name);
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      const double mj = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      const double vj = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      p.value[j] -= static_cast<T>(lr * (mj / c1) / (std::sqrt(vj / c2) + state.epsilon));
    }
  }
}

struct TrainConfig {
  ModelConfig model;
  double learning_rate = 1e-3;
  double clip_norm = 1.0;
  std::size_t batch_size = 64;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  std::size_t max_words = 40;
  std::size_t max_chunks = 14;
  std::size_t patience = 3;  // epochs without validation gain before stopping

  void validate() const {
    model.validate();
    if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
    if (!(clip_norm > 0)) throw ConfigError("clip norm must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (max_words == 0 || max_chunks == 0) throw ConfigError("max-words and max-chunks must be positive");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> valid_recall;  // 1-in-n R@1 on validation groups
};

struct History {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  bool stopped_early = false;

  /// One line per epoch: "epoch<TAB>loss<TAB>valid_R@1".
  void write(std::ostream &os) const {
    os << "epoch\tloss\tvalid_R@1\n";
    for (const auto &e : epochs) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%zu\t%.9g\t", e.epoch, e.train_loss);
      os << buf;
      if (e.valid_recall) {
        std::snprintf(buf, sizeof buf, "%.6f", *e.valid_recall);
        os << buf;
      } else {
        os << '-';
      }
      os << '\n';
    }
  }
};

template <typename T> struct FitResult {
  DualEncoder<T> model;  // best-validation snapshot, or the last epoch
  History history;
};

/// One optimization step on a batch; returns the batch loss.
template <typename T>
double train_step(DualEncoder<T> &model, AdamState<T> &adam, const Batch &batch,
                  const TrainConfig &cfg, Rng &dropout_rng) {
  Tape<T> tape;
  const auto out = model.forward(tape, batch, true, dropout_rng);
  const auto loss = bce_loss(out.probs, batch.flags);
  const double value = static_cast<double>(loss.value().item());
  if (!std::isfinite(value)) throw TrainingDiverged("training diverged: non-finite loss");
  tape.backward(loss);
  auto params = model.parameters();
  clip_global_norm<T>(params, cfg.clip_norm);
  adam_update<T>(adam, params, cfg.learning_rate);
  model.zero_grad();
  return value;
}

/// Trains a fresh model. Each epoch shuffles (seeded) and runs forward,
/// loss, backward, clipping, Adam and a gradient reset per mini-batch, then
/// scores the validation groups. The best-validation snapshot is kept and
/// training stops once `patience` epochs pass without improvement.
template <typename T>
FitResult<T> fit(const TrainConfig &cfg, std::span<const RankingTriple> train,
                 std::span<const EvalGroup> valid, std::optional<Tensor<T>> embeddings = std::nullopt,
                 const std::function<void(const EpochRecord &)> &on_epoch = {}) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("fit: empty training set");
  Rng master(cfg.seed);
  Rng init_rng = master.split();
  Rng shuffle_rng = master.split();
  Rng dropout_rng = master.split();

  DualEncoder<T> model(cfg.model, init_rng, std::move(embeddings));
  auto adam = AdamState<T>::init(model.parameters());
  FitResult<T> result{model, {}};
  double best = -1.0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<RankingTriple> chunk;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      chunk.clear();
      for (std::size_t i = lo; i < hi; ++i) chunk.push_back(train[order[i]]);
      const auto batch = make_batch(chunk, cfg.max_words, cfg.max_chunks);
      loss_sum += train_step(model, adam, batch, cfg, dropout_rng) * double(hi - lo);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(order.size());
    if (!valid.empty()) {
      const auto scored = score_groups(model, valid, cfg.max_words, cfg.max_chunks,
                                       cfg.batch_size, worker_count());
      rec.valid_recall = recall_at_k(scored, 1);
    }
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (!valid.empty()) {
      if (*rec.valid_recall > best) {
        best = *rec.valid_recall;
        result.history.best_epoch = epoch;
        result.model = model;
      } else if (epoch - result.history.best_epoch > cfg.patience) {
        result.history.stopped_early = true;
        break;
      }
    } else {
      result.history.best_epoch = epoch;
      result.model = model;
    }
  }
  return result;
}

}  // namespace rankhier
