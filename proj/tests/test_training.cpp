// SPDX-License-Identifier: Apache-2.0
// Loss, clipping, Adam and the fit loop.

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "support.hpp"

using namespace rankhier;

namespace {

std::vector<Parameter<double> *> ptrs(std::vector<Parameter<double>> &ps) {
  std::vector<Parameter<double> *> out;
  for (auto &p : ps) out.push_back(&p);
  return out;
}

Parameter<double> param(const std::string &name, std::vector<double> values, std::vector<double> grad) {
  const std::size_t n = values.size(), m = grad.size();
  Parameter<double> p(name, Tensor<double>({n}, std::move(values)));
  p.grad = Tensor<double>({m}, std::move(grad));
  return p;
}

// Plain-double reference for the mean clamped cross-entropy.
double reference_bce(const std::vector<double> &p, const std::vector<int> &y) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::min(std::max(p[i], 1e-7), 1 - 1e-7);
    s += y[i] ? -std::log(q) : -std::log(1 - q);
  }
  return s / double(p.size());
}

}  // namespace

TEST(Bce, HalfProbabilityIsLn2ForBothLabels) {
  const std::vector<double> p{0.5};
  EXPECT_NEAR(bce_loss<double>(p, std::vector<int>{1}), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce_loss<double>(p, std::vector<int>{0}), std::log(2.0), 1e-12);
}

TEST(Bce, ConfidentCorrectIsNearZero) {
  EXPECT_LT(bce_loss<double>(std::vector<double>{1.0, 0.0}, std::vector<int>{1, 0}), 1e-6);
}

TEST(Bce, ConfidentWrongIsClamped) {
  const double l = bce_loss<double>(std::vector<double>{0.0}, std::vector<int>{1});
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, -std::log(1e-7), 1e-6);
}

TEST(Bce, MatchesReferenceOnRandomBatch) {
  Rng rng(3);
  std::vector<double> p;
  std::vector<int> y;
  for (int i = 0; i < 50; ++i) {
    p.push_back(rng.uniform(0.0, 1.0));
    y.push_back(static_cast<int>(rng.uniform_int(0, 1)));
  }
  EXPECT_NEAR(bce_loss<double>(p, y), reference_bce(p, y), 1e-12);
}

TEST(Bce, RejectsBadInput) {
  EXPECT_THROW(bce_loss<double>(std::vector<double>{0.5, 0.5}, std::vector<int>{1}), ShapeError);
  EXPECT_THROW(bce_loss<double>(std::vector<double>{0.5}, std::vector<int>{2}), std::invalid_argument);
  EXPECT_THROW(bce_loss<double>(std::vector<double>{}, std::vector<int>{}), std::invalid_argument);
}

TEST(Clip, ScalesDownToBound) {
  std::vector<Parameter<double>> ps{param("a", {0, 0}, {3, 0}), param("b", {0}, {4})};
  auto p = ptrs(ps);
  EXPECT_DOUBLE_EQ(clip_global_norm<double>(p, 1.0), 5.0);
  EXPECT_NEAR(ps[0].grad[0], 0.6, 1e-12);
  EXPECT_NEAR(ps[1].grad[0], 0.8, 1e-12);
  EXPECT_NEAR(global_norm<double>(p), 1.0, 1e-12);
}

TEST(Clip, HalvesNormTwo) {
  std::vector<Parameter<double>> ps{param("a", {0, 0}, {2, 0})};
  auto p = ptrs(ps);
  clip_global_norm<double>(p, 1.0);
  EXPECT_NEAR(ps[0].grad[0], 1.0, 1e-12);
}

TEST(Clip, LeavesSmallGradientsAlone) {
  std::vector<Parameter<double>> ps{param("a", {0, 0}, {0.3, 0.4})};
  auto p = ptrs(ps);
  EXPECT_NEAR(clip_global_norm<double>(p, 1.0), 0.5, 1e-12);
  EXPECT_DOUBLE_EQ(ps[0].grad[0], 0.3);
  EXPECT_DOUBLE_EQ(ps[0].grad[1], 0.4);
}

TEST(Clip, PreservesDirection) {
  Rng rng(5);
  std::vector<Parameter<double>> ps;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> g;
    for (int j = 0; j < 7; ++j) g.push_back(rng.uniform(-10, 10));
    ps.push_back(param("p" + std::to_string(i), std::vector<double>(7, 0.0), g));
  }
  std::vector<double> before;
  for (auto &p : ps)
    for (double g : p.grad.values()) before.push_back(g);
  auto p = ptrs(ps);
  const double norm = clip_global_norm<double>(p, 0.25);
  std::size_t k = 0;
  for (auto &q : ps)
    for (double g : q.grad.values()) EXPECT_NEAR(g, before[k++] * 0.25 / norm, 1e-12);
}

TEST(Clip, RejectsNonPositiveBound) {
  std::vector<Parameter<double>> ps{param("a", {0}, {1})};
  auto p = ptrs(ps);
  EXPECT_THROW(clip_global_norm<double>(p, 0.0), std::invalid_argument);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<Parameter<double>> ps{param("a", {1.5, -2.0}, {0, 0})};
  auto p = ptrs(ps);
  auto st = AdamState<double>::init(p);
  for (int i = 0; i < 3; ++i) adam_update<double>(st, p, 1e-3);
  EXPECT_DOUBLE_EQ(ps[0].value[0], 1.5);
  EXPECT_DOUBLE_EQ(ps[0].value[1], -2.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Parameter<double>> ps{param("a", {1.0, 1.0}, {0.5, -20.0})};
  auto p = ptrs(ps);
  auto st = AdamState<double>::init(p);
  adam_update<double>(st, p, 1e-3);
  EXPECT_NEAR(ps[0].value[0], 1.0 - 1e-3, 1e-9);
  EXPECT_NEAR(ps[0].value[1], 1.0 + 1e-3, 1e-9);
}

TEST(Adam, ConstantGradientStepsDoNotGrow) {
  std::vector<Parameter<double>> ps{param("a", {0.0}, {0.7})};
  auto p = ptrs(ps);
  auto st = AdamState<double>::init(p);
  double prev = 0, last = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 5; ++i) {
    adam_update<double>(st, p, 1e-2);
    const double step = std::abs(ps[0].value[0] - prev);
    EXPECT_LE(step, last + 1e-15);
    last = step;
    prev = ps[0].value[0];
  }
}

TEST(Adam, MatchesIndependentReference) {
  Rng rng(11);
  std::vector<Parameter<double>> ps{param("a", {0.1, -0.3, 0.7}, {0, 0, 0})};
  auto p = ptrs(ps);
  auto st = AdamState<double>::init(p);
  std::vector<double> theta{0.1, -0.3, 0.7}, m(3, 0.0), v(3, 0.0);
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 20; ++t) {
    for (int j = 0; j < 3; ++j) {
      const double g = rng.uniform(-1, 1);
      ps[0].grad[j] = g;
      m[j] = b1 * m[j] + (1 - b1) * g;
      v[j] = b2 * v[j] + (1 - b2) * g * g;
      const double mh = m[j] / (1 - std::pow(b1, t)), vh = v[j] / (1 - std::pow(b2, t));
      theta[j] -= lr * mh / (std::sqrt(vh) + eps);
    }
    adam_update<double>(st, p, lr);
    for (int j = 0; j < 3; ++j) ASSERT_NEAR(ps[0].value[j], theta[j], 1e-12) << "step " << t;
  }
}

TEST(Adam, UninitializedStateThrows) {
  std::vector<Parameter<double>> ps{param("a", {0.0}, {1.0})};
  auto p = ptrs(ps);
  AdamState<double> st;
  EXPECT_FALSE(st.initialized());
  EXPECT_THROW(adam_update<double>(st, p, 1e-3), std::logic_error);
}

TEST(Adam, HugeGradientsStayFinite) {
  std::vector<Parameter<double>> ps{param("a", {0.0, 0.0}, {1e30, -1e-30})};
  auto p = ptrs(ps);
  auto st = AdamState<double>::init(p);
  adam_update<double>(st, p, 1e-3);
  for (double v : ps[0].value.values()) EXPECT_TRUE(std::isfinite(v));
}

namespace {

struct Fixture {
  TrainConfig cfg;
  std::vector<RankingTriple> train;
  std::vector<EvalGroup> valid;
};

Fixture keyed_fixture(ModelKind kind) {
  Rng rng(21);
  Fixture f;
  f.cfg.model = rhtest::small_config(kind, 40);
  f.cfg.model.embed_dim = 8;
  f.cfg.model.hidden = 8;
  f.cfg.model.chunk_hidden = 8;
  f.cfg.learning_rate = 0.01;
  f.cfg.batch_size = 16;
  f.cfg.epochs = 6;
  f.cfg.patience = 10;
  f.cfg.seed = 4;
  const auto pairs = rhtest::keyed_pairs(120, 10, 40, rng);
  f.train = negative_sample(pairs, 1, rng);
  const auto held = rhtest::keyed_pairs(30, 10, 40, rng);
  f.valid = make_groups(held, 4, rng);
  return f;
}

std::string history_text(const History &h) {
  std::ostringstream os;
  h.write(os);
  return os.str();
}

}  // namespace

TEST(Fit, Deterministic) {
  const auto f = keyed_fixture(ModelKind::kHrdeLtc);
  const auto a = fit<double>(f.cfg, f.train, f.valid);
  const auto b = fit<double>(f.cfg, f.train, f.valid);
  EXPECT_EQ(history_text(a.history), history_text(b.history));
  const auto pa = a.model.parameters(), pb = b.model.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i]->value.size(); ++j) ASSERT_EQ(pa[i]->value[j], pb[i]->value[j]);
}

TEST(Fit, SeedChangesRun) {
  auto f = keyed_fixture(ModelKind::kRde);
  const auto a = fit<double>(f.cfg, f.train, f.valid);
  f.cfg.seed = 5;
  const auto b = fit<double>(f.cfg, f.train, f.valid);
  EXPECT_NE(history_text(a.history), history_text(b.history));
}

TEST(Fit, LossDecreasesOnLearnableTask) {
  for (auto kind : rhtest::all_kinds()) {
    auto f = keyed_fixture(kind);
    f.cfg.epochs = 8;
    const auto r = fit<double>(f.cfg, f.train, {});
    ASSERT_EQ(r.history.epochs.size(), 8u);
    EXPECT_LT(r.history.epochs.back().train_loss, r.history.epochs.front().train_loss)
        << to_string(kind);
  }
}

TEST(Fit, FlatValidationStopsAfterPatience) {
  auto f = keyed_fixture(ModelKind::kRde);
  f.cfg.learning_rate = 1e-12;  // validation recall cannot move
  f.cfg.epochs = 10;
  for (std::size_t patience : {0u, 2u}) {
    f.cfg.patience = patience;
    const auto r = fit<double>(f.cfg, f.train, f.valid);
    EXPECT_TRUE(r.history.stopped_early);
    EXPECT_EQ(r.history.best_epoch, 1u);
    EXPECT_EQ(r.history.epochs.size(), 1u + patience + 1u);
  }
}

TEST(Fit, EarlyStopInvariant) {
  auto f = keyed_fixture(ModelKind::kHrde);
  f.cfg.patience = 1;
  f.cfg.epochs = 12;
  const auto r = fit<double>(f.cfg, f.train, f.valid);
  const auto &e = r.history.epochs;
  double best = -1;
  for (const auto &rec : e) best = std::max(best, *rec.valid_recall);
  EXPECT_EQ(*e[r.history.best_epoch - 1].valid_recall, best);
  for (std::size_t i = 0; i + 1 < r.history.best_epoch; ++i) EXPECT_LT(*e[i].valid_recall, best);
  if (r.history.stopped_early) {
    EXPECT_EQ(e.size(), r.history.best_epoch + f.cfg.patience + 1);
  }
}

TEST(Fit, ReturnsBestSnapshot) {
  auto f = keyed_fixture(ModelKind::kRde);
  f.cfg.patience = 100;
  const auto r = fit<double>(f.cfg, f.train, f.valid);
  const auto scored = score_groups(r.model, f.valid, f.cfg.max_words, f.cfg.max_chunks);
  EXPECT_DOUBLE_EQ(recall_at_k(scored, 1), *r.history.epochs[r.history.best_epoch - 1].valid_recall);
}

TEST(Fit, CallbackSeesEveryEpoch) {
  auto f = keyed_fixture(ModelKind::kRde);
  f.cfg.epochs = 3;
  std::vector<std::size_t> seen;
  fit<double>(f.cfg, f.train, {}, std::nullopt, [&](const EpochRecord &r) { seen.push_back(r.epoch); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Fit, RejectsEmptyTrainingSetAndBadConfig) {
  auto f = keyed_fixture(ModelKind::kRde);
  EXPECT_THROW(fit<double>(f.cfg, {}, {}), std::invalid_argument);
  f.cfg.learning_rate = 0;
  EXPECT_THROW(fit<double>(f.cfg, f.train, {}), ConfigError);
}

TEST(Fit, HistoryFormat) {
  History h;
  h.epochs.push_back({1, 0.5, std::nullopt});
  h.epochs.push_back({2, 0.25, 0.75});
  EXPECT_EQ(history_text(h), "epoch\tloss\tvalid_R@1\n1\t0.5\t-\n2\t0.25\t0.750000\n");
}
