// SPDX-License-Identifier: Apache-2.0
/**
 * @file   autodiff.hpp
 * @brief  Reverse-mode differentiation over dense tensors.
 *
 * A Tape is built during one forward pass. Every operation appends a record
 * holding its output value and, when any input is differentiable, a closure
 * that pushes the output gradient back to its inputs. Parameters are bound to
 * the tape as leaves whose gradient buffer is the Parameter's own `grad`, so
 * a backward pass accumulates straight into the model.
 *
 *   forward:   x ──matmul──> y ──sigmoid──> p ──bce──> loss
 *   backward:  x̄ <───────── ȳ <─────────── p̄ <─────── 1
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rankhier/random.hpp"
#include "rankhier/tensor.hpp"

namespace rankhier {

template <typename T> struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

enum class Op {
  kConstant,
  kParameter,
  kMatMul,
  kLinear,
  kAdd,
  kAddRow,
  kSub,
  kMul,
  kScale,
  kOneMinus,
  kSigmoid,
  kTanh,
  kSoftmax,
  kConcat,
  kDropout,
  kEmbedding,
  kGatherRows,
  kSelectRows,
  kRowDot,
  kAddScalar,
  kSum,
  kBce,
};

enum class Activation { kSigmoid, kTanh };

template <typename T> class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T> struct Var {
  Tape<T> *tape = nullptr;
  std::size_t id = 0;

  const Tensor<T> &value() const { return tape->value(id); }
  const Shape &shape() const { return value().shape(); }
};

namespace detail {

// C[m×n] += A[m×k] · B[k×n]
template <typename T>
void gemm_nn(const T *a, const T *b, T *c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T *ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip == T{0}) continue;
      const T *bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[m×n] += A[m×k] · B[n×k]ᵀ
template <typename T>
void gemm_nt(const T *a, const T *b, T *c, std::size_t m, std::size_t k,
             std::size_t n) {
  constexpr std::size_t L = 8;  // independent partial sums, so the loop vectorizes
  for (std::size_t i = 0; i < m; ++i) {
    const T *ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T *bj = b + j * k;
      T lanes[L] = {};
      std::size_t p = 0;
      for (; p + L <= k; p += L)
        for (std::size_t q = 0; q < L; ++q) lanes[q] += ai[p + q] * bj[p + q];
      T acc{0};
      for (std::size_t q = 0; q < L; ++q) acc += lanes[q];
      for (; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// C[k×n] += A[m×k]ᵀ · B[m×n]
template <typename T>
void gemm_tn(const T *a, const T *b, T *c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T *bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip == T{0}) continue;
      T *cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

template <typename T> T sigmoid(T z) {
  const T y = z >= T{0} ? T{1} / (T{1} + std::exp(-z))
                        : std::exp(z) / (T{1} + std::exp(z));
  // Keep the result inside the open interval even where it rounds to 0 or 1.
  return std::clamp(y, std::numeric_limits<T>::min(),
                    std::nextafter(T{1}, T{0}));
}

template <typename T> T bounded_tanh(T z) {
  const T lim = std::nextafter(T{1}, T{0});
  return std::clamp(std::tanh(z), -lim, lim);
}

inline void require_same(const Shape &a, const Shape &b, const char *op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
}

inline void require_rank(const Shape &s, std::size_t rank, const char *op) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + ", got " + shape_str(s));
}

}  // namespace detail

template <typename T> class Tape {
 public:
  using BackwardFn = std::function<void(Tape &, std::size_t)>;

  struct Node {
    Op op = Op::kConstant;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    const Tensor<T> *ref = nullptr;  // parameter value, when a leaf
    Parameter<T> *param = nullptr;   // set only for differentiable leaves
    bool requires_grad = false;
    bool grad_ready = false;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  Var<T> constant(Tensor<T> value) {
    Node n;
    n.op = Op::kConstant;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Binds a parameter as a differentiable leaf. Binding twice returns the
  /// same node.
  Var<T> param(Parameter<T> &p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return {this, it->second};
    Node n;
    n.op = Op::kParameter;
    n.ref = &p.value;
    n.param = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    bound_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  /// Binds a parameter read-only: its value is used without copying and no
  /// gradient flows back. Used for inference over a const model.
  Var<T> param(const Parameter<T> &p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return {this, it->second};
    Node n;
    n.op = Op::kParameter;
    n.ref = &p.value;
    nodes_.push_back(std::move(n));
    bound_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  Var<T> record(Op op, std::vector<std::size_t> inputs, Tensor<T> value,
                BackwardFn backward) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    for (auto id : inputs) n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T> &value(std::size_t id) const {
    const Node &n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node; parameter leaves write into Parameter::grad.
  Tensor<T> &grad(std::size_t id) {
    Node &n = nodes_[id];
    if (n.param) return n.param->grad;
    if (!n.grad_ready) {
      n.grad = Tensor<T>(value(id).shape());
      n.grad_ready = true;
    }
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  const Node &node(std::size_t id) const { return nodes_[id]; }

  /// Accumulates d(loss)/d(parameter) into every bound parameter's grad.
  /// Intermediate gradients are recomputed on every call; parameter
  /// gradients keep accumulating until the caller resets them.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: foreign node");
    if (value(loss.id).size() != 1)
      throw ShapeError("backward: loss must be a scalar, got " +
                       shape_str(value(loss.id).shape()));
    for (auto &n : nodes_) n.grad_ready = false;
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node &n = nodes_[i];
      if (!n.requires_grad || !n.backward) continue;
      if (!n.grad_ready) continue;
      n.backward(*this, i);
    }
  }

 private:
  std::deque<Node> nodes_;  // deque: node references survive later records
  std::unordered_map<const Parameter<T> *, std::size_t> bound_;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// C = A·B for A [m×k], B [k×n].
template <typename T> Var<T> matmul(Var<T> a, Var<T> b) {
  const auto &A = a.value();
  const auto &B = b.value();
  detail::require_rank(A.shape(), 2, "matmul");
  detail::require_rank(B.shape(), 2, "matmul");
  const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
  if (B.shape()[0] != k)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(A.shape()) +
                     " vs " + shape_str(B.shape()));
  Tensor<T> C({m, n});
  detail::gemm_nn(A.data(), B.data(), C.data(), m, k, n);
  const auto ia = a.id, ib = b.id;
  return a.tape->record(Op::kMatMul, {ia, ib}, std::move(C),
                        [ia, ib, m, k, n](Tape<T> &t, std::size_t out) {
                          const T *g = t.grad(out).data();
                          if (t.requires_grad(ia))
                            detail::gemm_nt(g, t.value(ib).data(),
                                            t.grad(ia).data(), m, n, k);
                          if (t.requires_grad(ib))
                            detail::gemm_tn(t.value(ia).data(), g,
                                            t.grad(ib).data(), m, k, n);
                        });
}

/// Y = X·Wᵀ for X [m×k], W [n×k]: the affine map convention W·x per row.
template <typename T> Var<T> linear(Var<T> x, Var<T> w) {
  const auto &X = x.value();
  const auto &W = w.value();
  detail::require_rank(X.shape(), 2, "linear");
  detail::require_rank(W.shape(), 2, "linear");
  const std::size_t m = X.shape()[0], k = X.shape()[1], n = W.shape()[0];
  if (W.shape()[1] != k)
    throw ShapeError("linear: input width " + shape_str(X.shape()) +
                     " does not match weight " + shape_str(W.shape()));
  Tensor<T> Y({m, n});
  detail::gemm_nt(X.data(), W.data(), Y.data(), m, k, n);
  const auto ix = x.id, iw = w.id;
  return x.tape->record(Op::kLinear, {ix, iw}, std::move(Y),
                        [ix, iw, m, k, n](Tape<T> &t, std::size_t out) {
                          const T *g = t.grad(out).data();
                          if (t.requires_grad(ix))
                            detail::gemm_nn(g, t.value(iw).data(),
                                            t.grad(ix).data(), m, n, k);
                          if (t.requires_grad(iw))
                            detail::gemm_tn(g, t.value(ix).data(),
                                            t.grad(iw).data(), m, n, k);
                        });
}

template <typename T> Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto &B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(Op::kAdd, {ia, ib}, std::move(out),
                        [ia, ib](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          for (auto id : {ia, ib}) {
                            if (!t.requires_grad(id)) continue;
                            auto &gi = t.grad(id);
                            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                          }
                        });
}

template <typename T> Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto &B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(Op::kSub, {ia, ib}, std::move(out),
                        [ia, ib](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          if (t.requires_grad(ia)) {
                            auto &ga = t.grad(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (t.requires_grad(ib)) {
                            auto &gb = t.grad(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          }
                        });
}

/// Elementwise product.
template <typename T> Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto &B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(Op::kMul, {ia, ib}, std::move(out),
                        [ia, ib](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          if (t.requires_grad(ia)) {
                            const auto &vb = t.value(ib);
                            auto &ga = t.grad(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
                          }
                          if (t.requires_grad(ib)) {
                            const auto &va = t.value(ia);
                            auto &gb = t.grad(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
                          }
                        });
}

/// a [m×n] + bias [n] broadcast over rows.
template <typename T> Var<T> add_row(Var<T> a, Var<T> bias) {
  const auto &A = a.value();
  const auto &B = bias.value();
  if (B.size() != A.cols())
    throw ShapeError("add_row: bias " + shape_str(B.shape()) +
                     " does not match " + shape_str(A.shape()));
  Tensor<T> out = A;
  const std::size_t rows = A.rows(), cols = A.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += B[c];
  const auto ia = a.id, ib = bias.id;
  return a.tape->record(Op::kAddRow, {ia, ib}, std::move(out),
                        [ia, ib, rows, cols](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          if (t.requires_grad(ia)) {
                            auto &ga = t.grad(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (t.requires_grad(ib)) {
                            auto &gb = t.grad(ib);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < cols; ++c)
                                gb[c] += g[r * cols + c];
                          }
                        });
}

template <typename T> Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto &v : out.values()) v *= factor;
  const auto ia = a.id;
  return a.tape->record(Op::kScale, {ia}, std::move(out),
                        [ia, factor](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          auto &ga = t.grad(ia);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
                        });
}

/// 1 − a, elementwise.
template <typename T> Var<T> one_minus(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto &v : out.values()) v = T{1} - v;
  const auto ia = a.id;
  return a.tape->record(Op::kOneMinus, {ia}, std::move(out),
                        [ia](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          auto &ga = t.grad(ia);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
                        });
}

template <typename T> Var<T> activate(Var<T> x, Activation kind) {
  Tensor<T> out = x.value();
  if (kind == Activation::kSigmoid)
    for (auto &v : out.values()) v = detail::sigmoid(v);
  else
    for (auto &v : out.values()) v = detail::bounded_tanh(v);
  const auto ix = x.id;
  return x.tape->record(
      kind == Activation::kSigmoid ? Op::kSigmoid : Op::kTanh, {ix},
      std::move(out), [ix, kind](Tape<T> &t, std::size_t o) {
        const auto &g = t.grad(o);
        const auto &y = t.value(o);
        auto &gx = t.grad(ix);
        if (kind == Activation::kSigmoid)
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T{1} - y[i]);
        else
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T{1} - y[i] * y[i]);
      });
}

template <typename T> Var<T> sigmoid(Var<T> x) {
  return activate(x, Activation::kSigmoid);
}
template <typename T> Var<T> tanh(Var<T> x) {
  return activate(x, Activation::kTanh);
}

/// Softmax over the last axis of each row, with max subtraction.
template <typename T> Var<T> softmax(Var<T> z) {
  const auto &Z = z.value();
  if (Z.size() == 0) throw std::invalid_argument("softmax: empty input");
  Tensor<T> out = Z;
  const std::size_t rows = Z.rows(), cols = Z.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r);
    const T mx = *std::max_element(row.begin(), row.end());
    T total{0};
    for (auto &v : row) {
      v = std::exp(v - mx);
      total += v;
    }
    for (auto &v : row) v /= total;
  }
  const auto iz = z.id;
  return z.tape->record(Op::kSoftmax, {iz}, std::move(out),
                        [iz, rows, cols](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          const auto &y = t.value(o);
                          auto &gz = t.grad(iz);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const std::size_t base = r * cols;
                            T dot{0};
                            for (std::size_t c = 0; c < cols; ++c) dot += g[base + c] * y[base + c];
                            for (std::size_t c = 0; c < cols; ++c)
                              gz[base + c] += y[base + c] * (g[base + c] - dot);
                          }
                        });
}

/// Concatenation along the last axis; both operands must have equal rows.
template <typename T> Var<T> concat(Var<T> a, Var<T> b) {
  const auto &A = a.value();
  const auto &B = b.value();
  if (A.rank() != B.rank() || A.rank() == 0 || A.rank() > 2)
    throw ShapeError("concat: incompatible ranks " + shape_str(A.shape()) +
                     " and " + shape_str(B.shape()));
  const std::size_t rows = A.rank() == 1 ? 1 : A.shape()[0];
  if (A.rank() == 2 && B.shape()[0] != rows)
    throw ShapeError("concat: row count differs " + shape_str(A.shape()) +
                     " vs " + shape_str(B.shape()));
  const std::size_t p = A.cols(), q = B.cols();
  Shape shape = A.rank() == 1 ? Shape{p + q} : Shape{rows, p + q};
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(A.data() + r * p, p, out.data() + r * (p + q));
    std::copy_n(B.data() + r * q, q, out.data() + r * (p + q) + p);
  }
  const auto ia = a.id, ib = b.id;
  return a.tape->record(Op::kConcat, {ia, ib}, std::move(out),
                        [ia, ib, rows, p, q](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          if (t.requires_grad(ia)) {
                            auto &ga = t.grad(ia);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < p; ++c) ga[r * p + c] += g[r * (p + q) + c];
                          }
                          if (t.requires_grad(ib)) {
                            auto &gb = t.grad(ib);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < q; ++c)
                                gb[r * q + c] += g[r * (p + q) + p + c];
                          }
                        });
}

/// Inverted dropout with an explicit keep mask (1 = keep). Survivors are
/// scaled by 1/(1−rate).
template <typename T>
Var<T> dropout_with_mask(Var<T> x, std::vector<std::uint8_t> keep, double rate) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " +
                                std::to_string(rate));
  if (keep.size() != x.value().size())
    throw ShapeError("dropout: mask size " + std::to_string(keep.size()) +
                     " for tensor " + shape_str(x.shape()));
  const T factor = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? out[i] * factor : T{0};
  const auto ix = x.id;
  return x.tape->record(Op::kDropout, {ix}, std::move(out),
                        [ix, factor, keep = std::move(keep)](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          auto &gx = t.grad(ix);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            if (keep[i]) gx[i] += g[i] * factor;
                        });
}

/// Identity outside training or at rate 0; otherwise draws a fresh mask.
template <typename T>
Var<T> dropout(Var<T> x, double rate, bool training, Rng &rng) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " +
                                std::to_string(rate));
  if (!training || rate == 0.0) return x;
  std::vector<std::uint8_t> keep(x.value().size());
  for (auto &k : keep) k = rng.bernoulli(1.0 - rate) ? 1 : 0;
  return dropout_with_mask(x, std::move(keep), rate);
}

/// Row lookup: out[i] = table[ids[i]].
template <typename T> Var<T> embedding(Var<T> table, std::vector<int> ids) {
  const auto &E = table.value();
  detail::require_rank(E.shape(), 2, "embedding");
  const std::size_t vocab = E.shape()[0], dim = E.shape()[1];
  Tensor<T> out({ids.size(), dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) +
                              " outside vocabulary of " + std::to_string(vocab));
    std::copy_n(E.data() + ids[i] * dim, dim, out.data() + i * dim);
  }
  const auto ie = table.id;
  return table.tape->record(Op::kEmbedding, {ie}, std::move(out),
                            [ie, dim, ids = std::move(ids)](Tape<T> &t, std::size_t o) {
                              const auto &g = t.grad(o);
                              auto &ge = t.grad(ie);
                              for (std::size_t i = 0; i < ids.size(); ++i) {
                                T *dst = ge.data() + ids[i] * dim;
                                const T *src = g.data() + i * dim;
                                for (std::size_t c = 0; c < dim; ++c) dst[c] += src[c];
                              }
                            });
}

/// out[i] = x[rows[i]] for a matrix x.
template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<std::size_t> rows) {
  const auto &X = x.value();
  detail::require_rank(X.shape(), 2, "gather_rows");
  const std::size_t n = X.shape()[0], dim = X.shape()[1];
  Tensor<T> out({rows.size(), dim});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw std::out_of_range("gather_rows: row index");
    std::copy_n(X.data() + rows[i] * dim, dim, out.data() + i * dim);
  }
  const auto ix = x.id;
  return x.tape->record(Op::kGatherRows, {ix}, std::move(out),
                        [ix, dim, rows = std::move(rows)](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          auto &gx = t.grad(ix);
                          for (std::size_t i = 0; i < rows.size(); ++i)
                            for (std::size_t c = 0; c < dim; ++c)
                              gx[rows[i] * dim + c] += g[i * dim + c];
                        });
}

/// Row-wise select: out[i] = take_a[i] ? a[i] : b[i]. Exact, so masked rows
/// are bit-identical to `b`.
template <typename T>
Var<T> select_rows(std::vector<std::uint8_t> take_a, Var<T> a, Var<T> b) {
  detail::require_same(a.shape(), b.shape(), "select_rows");
  const auto &A = a.value();
  const std::size_t rows = A.rows(), cols = A.cols();
  if (take_a.size() != rows) throw ShapeError("select_rows: mask length");
  Tensor<T> out = b.value();
  for (std::size_t r = 0; r < rows; ++r)
    if (take_a[r]) std::copy_n(A.data() + r * cols, cols, out.data() + r * cols);
  const auto ia = a.id, ib = b.id;
  return a.tape->record(Op::kSelectRows, {ia, ib}, std::move(out),
                        [ia, ib, cols, take_a = std::move(take_a)](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          const bool need_a = t.requires_grad(ia);
                          const bool need_b = t.requires_grad(ib);
                          for (std::size_t r = 0; r < take_a.size(); ++r) {
                            const std::size_t id = take_a[r] ? ia : ib;
                            if (take_a[r] ? !need_a : !need_b) continue;
                            auto &gi = t.grad(id);
                            for (std::size_t c = 0; c < cols; ++c)
                              gi[r * cols + c] += g[r * cols + c];
                          }
                        });
}

/// out[i] = ⟨a[i], b[i]⟩ for equally shaped matrices.
template <typename T> Var<T> row_dot(Var<T> a, Var<T> b) {
  detail::require_same(a.shape(), b.shape(), "row_dot");
  const auto &A = a.value();
  const auto &B = b.value();
  const std::size_t rows = A.rows(), cols = A.cols();
  Tensor<T> out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    T acc{0};
    for (std::size_t c = 0; c < cols; ++c) acc += A[r * cols + c] * B[r * cols + c];
    out[r] = acc;
  }
  const auto ia = a.id, ib = b.id;
  return a.tape->record(Op::kRowDot, {ia, ib}, std::move(out),
                        [ia, ib, rows, cols](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          if (t.requires_grad(ia)) {
                            const auto &vb = t.value(ib);
                            auto &ga = t.grad(ia);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < cols; ++c)
                                ga[r * cols + c] += g[r] * vb[r * cols + c];
                          }
                          if (t.requires_grad(ib)) {
                            const auto &va = t.value(ia);
                            auto &gb = t.grad(ib);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < cols; ++c)
                                gb[r * cols + c] += g[r] * va[r * cols + c];
                          }
                        });
}

/// v + s where s holds a single value.
template <typename T> Var<T> add_scalar(Var<T> v, Var<T> s) {
  if (s.value().size() != 1) throw ShapeError("add_scalar: scalar operand expected");
  Tensor<T> out = v.value();
  const T sv = s.value()[0];
  for (auto &x : out.values()) x += sv;
  const auto iv = v.id, is = s.id;
  return v.tape->record(Op::kAddScalar, {iv, is}, std::move(out),
                        [iv, is](Tape<T> &t, std::size_t o) {
                          const auto &g = t.grad(o);
                          if (t.requires_grad(iv)) {
                            auto &gv = t.grad(iv);
                            for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
                          }
                          if (t.requires_grad(is)) {
                            T total{0};
                            for (std::size_t i = 0; i < g.size(); ++i) total += g[i];
                            t.grad(is)[0] += total;
                          }
                        });
}

template <typename T> Var<T> sum(Var<T> x) {
  T total{0};
  for (auto v : x.value().values()) total += v;
  const auto ix = x.id;
  return x.tape->record(Op::kSum, {ix}, Tensor<T>::scalar(total),
                        [ix](Tape<T> &t, std::size_t o) {
                          const T g = t.grad(o)[0];
                          for (auto &v : t.grad(ix).values()) v += g;
                        });
}

/// Probability clamp used by the cross-entropy loss.
inline constexpr double kProbabilityClamp = 1e-7;

/// Mean binary cross-entropy of probabilities `p` against 0/1 labels. The
/// gradient is evaluated at the clamped probability so saturated mistakes
/// still receive signal.
template <typename T> Var<T> bce(Var<T> p, std::vector<T> labels) {
  const auto &P = p.value();
  if (P.size() != labels.size())
    throw ShapeError("bce: " + std::to_string(P.size()) + " probabilities vs " +
                     std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw std::invalid_argument("bce: empty batch");
  const T lo = static_cast<T>(kProbabilityClamp);
  const T hi = static_cast<T>(1.0 - kProbabilityClamp);
  const T n = static_cast<T>(labels.size());
  T total{0};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const T q = std::clamp(P[i], lo, hi);
    total -= labels[i] * std::log(q) + (T{1} - labels[i]) * std::log(T{1} - q);
  }
  const auto ip = p.id;
  return p.tape->record(Op::kBce, {ip}, Tensor<T>::scalar(total / n),
                        [ip, lo, hi, n, labels = std::move(labels)](Tape<T> &t, std::size_t o) {
                          const T g = t.grad(o)[0];
                          const auto &P = t.value(ip);
                          auto &gp = t.grad(ip);
                          for (std::size_t i = 0; i < labels.size(); ++i) {
                            const T q = std::clamp(P[i], lo, hi);
                            gp[i] += g * (-labels[i] / q + (T{1} - labels[i]) / (T{1} - q)) / n;
                          }
                        });
}

}  // namespace rankhier
