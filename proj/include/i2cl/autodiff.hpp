#pragma once

// Reverse-mode differentiation over a recorded tape of dense matrix ops.
//
// Every value on the tape is a row-major matrix (scalars are 1x1). Nodes are
// appended in evaluation order, so the node vector is already a topological
// order; backward() walks it once in reverse.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "i2cl/error.hpp"
#include "i2cl/tensor.hpp"

namespace i2cl {

/// Handle to a node on a Tape.
struct Var {
  std::size_t index = 0;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = MatrixX<Scalar>;
  /// Receives the gradient flowing into the node and scatters it to inputs.
  using BackwardFn = std::function<void(Tape&, const Mat& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Mat value) { return push_leaf(std::move(value), nullptr, false, "constant"); }
  /// Non-owning constant; `value` must outlive the tape.
  Var constant_ref(const Mat& value) { return push_leaf(Mat(), &value, false, "constant"); }
  Var parameter(Mat value) { return push_leaf(std::move(value), nullptr, true, "parameter"); }
  /// Non-owning trainable leaf; `value` must outlive the tape.
  Var parameter_ref(const Mat& value) { return push_leaf(Mat(), &value, true, "parameter"); }
  Var scalar(Scalar v) { return constant(Mat::Constant(1, 1, v)); }
  Var scalar_parameter(Scalar v) { return parameter(Mat::Constant(1, 1, v)); }

  const Mat& value(Var v) const {
    const Node& n = nodes_.at(v.index);
    return n.external != nullptr ? *n.external : n.value;
  }
  Scalar item(Var v) const {
    const Mat& m = value(v);
    if (m.size() != 1) {
      throw ShapeError("item: node is not a scalar");
    }
    return m(0, 0);
  }
  bool requires_grad(Var v) const { return nodes_.at(v.index).requires_grad; }
  bool is_parameter(Var v) const { return nodes_.at(v.index).is_parameter; }

  /// Gradient of the last backward() target wrt `v`; zero when disconnected.
  Mat grad(Var v) const {
    const Node& n = nodes_.at(v.index);
    if (n.grad.size() == 0) {
      const Mat& val = value(v);
      return Mat::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }
  bool has_grad(Var v) const { return nodes_.at(v.index).grad.size() != 0; }

  /// Appends an op result. `fn` is kept only if some input requires grad.
  Var record(Mat value, std::initializer_list<Var> inputs, BackwardFn fn, const char* op) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn), op);
  }
  Var record(Mat value, std::span<const Var> inputs, BackwardFn fn, const char* op) {
    require_finite(value, op);
    bool needs = false;
    if (grad_enabled_) {
      for (Var in : inputs) {
        needs = needs || nodes_.at(in.index).requires_grad;
      }
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    n.op = op;
    if (needs) {
      n.backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  /// Adds `delta` into the gradient of `v` if it participates in backward.
  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[v.index];
    if (!n.requires_grad) {
      return;
    }
    if (n.grad.size() == 0) {
      n.grad = delta;
    } else {
      n.grad += delta;
    }
  }

  /// Reverse sweep from a scalar node. Clears previous gradients first.
  void backward(Var loss) {
    if (value(loss).size() != 1) {
      throw ShapeError("backward: loss must be a 1x1 scalar node");
    }
    for (Node& n : nodes_) {
      n.grad.resize(0, 0);
    }
    if (!nodes_[loss.index].requires_grad) {
      return;
    }
    nodes_[loss.index].grad = Mat::Ones(1, 1);
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.backward) {
        continue;
      }
      // Move out so accumulate() into earlier nodes cannot alias it.
      const Mat g = n.grad;
      n.backward(*this, g);
    }
    for (const Node& n : nodes_) {
      if (n.is_parameter && n.grad.size() != 0 && !n.grad.allFinite()) {
        throw NumericError("backward: non-finite gradient for a parameter");
      }
    }
  }

 private:
  struct Node {
    Mat value;
    const Mat* external = nullptr;
    Mat grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_parameter = false;
    const char* op = "";
  };

  Var push_leaf(Mat value, const Mat* external, bool trainable, const char* op) {
    if (external != nullptr) {
      require_finite(*external, op);
    } else {
      require_finite(value, op);
    }
    Node n;
    n.value = std::move(value);
    n.external = external;
    n.requires_grad = trainable && grad_enabled_;
    n.is_parameter = trainable;
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// ---------------------------------------------------------------------------
// Primitive ops. Each computes the forward value with Eigen and records the
// vector-Jacobian product as a closure.

template <typename Scalar>
Var matmul(Tape<Scalar>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(av.cols()) + " vs " +
                     std::to_string(bv.rows()) + ")");
  }
  MatrixX<Scalar> out = av * bv;
  return t.record(std::move(out), {a, b},
                  [a, b](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    if (tp.requires_grad(a)) {
                      tp.accumulate(a, g * tp.value(b).transpose());
                    }
                    if (tp.requires_grad(b)) {
                      tp.accumulate(b, tp.value(a).transpose() * g);
                    }
                  },
                  "matmul");
}

template <typename Scalar>
Var add(Tape<Scalar>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
    throw ShapeError("add: shape mismatch");
  }
  return t.record(av + bv, {a, b},
                  [a, b](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    tp.accumulate(a, g);
                    tp.accumulate(b, g);
                  },
                  "add");
}

/// Adds a 1xN row to every row of an MxN matrix.
template <typename Scalar>
Var add_row(Tape<Scalar>& t, Var a, Var row) {
  const auto& av = t.value(a);
  const auto& rv = t.value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("add_row: broadcast row has wrong shape");
  }
  MatrixX<Scalar> out = av.rowwise() + rv.row(0);
  return t.record(std::move(out), {a, row},
                  [a, row](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    tp.accumulate(a, g);
                    if (tp.requires_grad(row)) {
                      tp.accumulate(row, g.colwise().sum());
                    }
                  },
                  "add_row");
}

template <typename Scalar>
Var scale(Tape<Scalar>& t, Var a, Scalar k) {
  return t.record(t.value(a) * k, {a},
                  [a, k](Tape<Scalar>& tp, const MatrixX<Scalar>& g) { tp.accumulate(a, g * k); },
                  "scale");
}

/// Multiplies a matrix by a 1x1 node.
template <typename Scalar>
Var mul_scalar(Tape<Scalar>& t, Var a, Var s) {
  const Scalar k = t.item(s);
  return t.record(t.value(a) * k, {a, s},
                  [a, s, k](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    tp.accumulate(a, g * k);
                    if (tp.requires_grad(s)) {
                      MatrixX<Scalar> ds(1, 1);
                      ds(0, 0) = g.cwiseProduct(tp.value(a)).sum();
                      tp.accumulate(s, ds);
                    }
                  },
                  "mul_scalar");
}

template <typename Scalar>
Var gelu(Tape<Scalar>& t, Var a) {
  MatrixX<Scalar> out = t.value(a).unaryExpr([](Scalar x) { return gelu(x); });
  return t.record(std::move(out), {a},
                  [a](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    tp.accumulate(a, g.cwiseProduct(tp.value(a).unaryExpr(
                                         [](Scalar x) { return gelu_derivative(x); })));
                  },
                  "gelu");
}

template <typename Scalar>
Var softplus(Tape<Scalar>& t, Var a) {
  MatrixX<Scalar> out = t.value(a).unaryExpr([](Scalar x) { return softplus(x); });
  return t.record(std::move(out), {a},
                  [a](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    tp.accumulate(a, g.cwiseProduct(tp.value(a).unaryExpr(
                                         [](Scalar x) { return sigmoid(x); })));
                  },
                  "softplus");
}

/// Per-row layer norm; gain and bias are 1xN.
template <typename Scalar>
Var layer_norm(Tape<Scalar>& t, Var x, Var gain, Var bias, Scalar eps = Scalar(kLayerNormEps)) {
  const auto& xv = t.value(x);
  const auto& gv = t.value(gain);
  const auto& bv = t.value(bias);
  const Eigen::Index rows = xv.rows();
  const Eigen::Index n = xv.cols();
  if (gv.size() != n || bv.size() != n) {
    throw ShapeError("layer_norm: gain/bias length does not match row width");
  }
  MatrixX<Scalar> xhat(rows, n);
  RowVectorX<Scalar> inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Scalar mean = xv.row(r).sum() / Scalar(n);
    xhat.row(r) = (xv.row(r).array() - mean).matrix();
    const Scalar var = xhat.row(r).squaredNorm() / Scalar(n);
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) *= inv_std(r);
  }
  MatrixX<Scalar> out = (xhat.array().rowwise() * gv.row(0).array()).matrix();
  out.rowwise() += bv.row(0);
  return t.record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
        const auto& gv2 = tp.value(gain);
        if (tp.requires_grad(gain)) {
          tp.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        }
        if (tp.requires_grad(bias)) {
          tp.accumulate(bias, g.colwise().sum());
        }
        if (tp.requires_grad(x)) {
          const Scalar n2 = Scalar(xhat.cols());
          MatrixX<Scalar> dxhat = (g.array().rowwise() * gv2.row(0).array()).matrix();
          MatrixX<Scalar> dx(xhat.rows(), xhat.cols());
          for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
            const Scalar mean_d = dxhat.row(r).sum() / n2;
            const Scalar mean_dx = dxhat.row(r).dot(xhat.row(r)) / n2;
            dx.row(r) = inv_std(r) *
                        (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx).matrix();
          }
          tp.accumulate(x, dx);
        }
      },
      "layer_norm");
}

template <typename Scalar>
Var softmax_rows(Tape<Scalar>& t, Var x) {
  MatrixX<Scalar> p = softmax_rows(t.value(x));
  MatrixX<Scalar> saved = p;
  return t.record(std::move(p), {x},
                  [x, p = std::move(saved)](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    const auto dots = g.cwiseProduct(p).rowwise().sum().eval();
                    tp.accumulate(x, (p.array() * (g.array().colwise() - dots.array())).matrix());
                  },
                  "softmax_rows");
}

template <typename Scalar>
Var log_softmax_rows(Tape<Scalar>& t, Var x) {
  MatrixX<Scalar> out = log_softmax_rows(t.value(x));
  MatrixX<Scalar> p = out.array().exp().matrix();
  return t.record(std::move(out), {x},
                  [x, p = std::move(p)](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    const auto sums = g.rowwise().sum().eval();
                    tp.accumulate(x, g - (p.array().colwise() * sums.array()).matrix());
                  },
                  "log_softmax_rows");
}

/// Multi-head causal self-attention core: softmax(QK^T/sqrt(d)) V per head.
/// q, k, v are T x D with heads laid out as contiguous column blocks.
template <typename Scalar>
Var causal_attention(Tape<Scalar>& t, Var q, Var k, Var v, int n_heads) {
  const auto& qv = t.value(q);
  const auto& kv = t.value(k);
  const auto& vv = t.value(v);
  const Eigen::Index T = qv.rows();
  const Eigen::Index D = qv.cols();
  if (kv.rows() != T || vv.rows() != T || kv.cols() != D || vv.cols() != D || n_heads < 1 ||
      D % n_heads != 0) {
    throw ShapeError("causal_attention: inconsistent q/k/v shapes or head count");
  }
  const Eigen::Index hd = D / n_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(hd));
  std::vector<MatrixX<Scalar>> probs(static_cast<std::size_t>(n_heads));
  MatrixX<Scalar> out(T, D);
  for (int h = 0; h < n_heads; ++h) {
    MatrixX<Scalar> s = qv.middleCols(h * hd, hd) * kv.middleCols(h * hd, hd).transpose();
    s *= inv_sqrt;
    MatrixX<Scalar>& p = probs[static_cast<std::size_t>(h)];
    p = MatrixX<Scalar>::Zero(T, T);
    for (Eigen::Index r = 0; r < T; ++r) {
      const auto row = s.row(r).head(r + 1);
      const Scalar peak = row.maxCoeff();
      p.row(r).head(r + 1) = (row.array() - peak).exp().matrix();
      p.row(r).head(r + 1) /= p.row(r).head(r + 1).sum();
    }
    out.middleCols(h * hd, hd).noalias() = p * vv.middleCols(h * hd, hd);
  }
  return t.record(
      std::move(out), {q, k, v},
      [q, k, v, hd, inv_sqrt, probs = std::move(probs)](Tape<Scalar>& tp,
                                                        const MatrixX<Scalar>& g) {
        const auto& qv2 = tp.value(q);
        const auto& kv2 = tp.value(k);
        const auto& vv2 = tp.value(v);
        const Eigen::Index T2 = qv2.rows();
        MatrixX<Scalar> dq = MatrixX<Scalar>::Zero(T2, qv2.cols());
        MatrixX<Scalar> dk = MatrixX<Scalar>::Zero(T2, qv2.cols());
        MatrixX<Scalar> dv = MatrixX<Scalar>::Zero(T2, qv2.cols());
        for (std::size_t h = 0; h < probs.size(); ++h) {
          const Eigen::Index c0 = static_cast<Eigen::Index>(h) * hd;
          const MatrixX<Scalar>& p = probs[h];
          const auto gh = g.middleCols(c0, hd);
          dv.middleCols(c0, hd).noalias() = p.transpose() * gh;
          MatrixX<Scalar> dp = gh * vv2.middleCols(c0, hd).transpose();
          const auto dots = dp.cwiseProduct(p).rowwise().sum().eval();
          MatrixX<Scalar> ds = (p.array() * (dp.array().colwise() - dots.array())).matrix();
          ds *= inv_sqrt;
          dq.middleCols(c0, hd).noalias() = ds * kv2.middleCols(c0, hd);
          dk.middleCols(c0, hd).noalias() = ds.transpose() * qv2.middleCols(c0, hd);
        }
        tp.accumulate(q, dq);
        tp.accumulate(k, dk);
        tp.accumulate(v, dv);
      },
      "causal_attention");
}

/// Selects rows of `table` by index (embedding lookup).
template <typename Scalar>
Var gather_rows(Tape<Scalar>& t, Var table, std::vector<int> ids) {
  const auto& tv = t.value(table);
  MatrixX<Scalar> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[i]) + " out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  return t.record(std::move(out), {table},
                  [table, ids = std::move(ids)](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    const auto& tv2 = tp.value(table);
                    MatrixX<Scalar> d = MatrixX<Scalar>::Zero(tv2.rows(), tv2.cols());
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      d.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
                    }
                    tp.accumulate(table, d);
                  },
                  "gather_rows");
}

template <typename Scalar>
Var slice_rows(Tape<Scalar>& t, Var x, Eigen::Index start, Eigen::Index count) {
  const auto& xv = t.value(x);
  if (start < 0 || count < 0 || start + count > xv.rows()) {
    throw ShapeError("slice_rows: range out of bounds");
  }
  MatrixX<Scalar> out = xv.middleRows(start, count);
  return t.record(std::move(out), {x},
                  [x, start, count](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    const auto& xv2 = tp.value(x);
                    MatrixX<Scalar> d = MatrixX<Scalar>::Zero(xv2.rows(), xv2.cols());
                    d.middleRows(start, count) = g;
                    tp.accumulate(x, d);
                  },
                  "slice_rows");
}

template <typename Scalar>
Var sum(Tape<Scalar>& t, Var x) {
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = t.value(x).sum();
  return t.record(std::move(out), {x},
                  [x](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    const auto& xv = tp.value(x);
                    tp.accumulate(x, MatrixX<Scalar>::Constant(xv.rows(), xv.cols(), g(0, 0)));
                  },
                  "sum");
}

/// Extracts element (row, col) as a 1x1 node.
template <typename Scalar>
Var pick(Tape<Scalar>& t, Var x, Eigen::Index row, Eigen::Index col) {
  const auto& xv = t.value(x);
  if (row < 0 || col < 0 || row >= xv.rows() || col >= xv.cols()) {
    throw ShapeError("pick: index out of range");
  }
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = xv(row, col);
  return t.record(std::move(out), {x},
                  [x, row, col](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    const auto& xv2 = tp.value(x);
                    MatrixX<Scalar> d = MatrixX<Scalar>::Zero(xv2.rows(), xv2.cols());
                    d(row, col) = g(0, 0);
                    tp.accumulate(x, d);
                  },
                  "pick");
}

/// Weighted mean of -log p[row, target[row]] over rows with nonzero weight.
/// Fused log-softmax + NLL; returns a 1x1 node.
template <typename Scalar>
Var cross_entropy_rows(Tape<Scalar>& t, Var logits, std::vector<int> targets,
                       std::vector<Scalar> weights) {
  const auto& lv = t.value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != lv.rows() || weights.size() != targets.size()) {
    throw ShapeError("cross_entropy_rows: one target and weight per row required");
  }
  MatrixX<Scalar> logp = log_softmax_rows(lv);
  Scalar total_w = 0;
  Scalar loss = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] < 0 || targets[r] >= lv.cols()) {
      throw ShapeError("cross_entropy_rows: target out of range");
    }
    total_w += weights[r];
    loss -= weights[r] * logp(static_cast<Eigen::Index>(r), targets[r]);
  }
  if (!(total_w > 0)) {
    throw ShapeError("cross_entropy_rows: total weight must be positive");
  }
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = loss / total_w;
  return t.record(
      std::move(out), {logits},
      [logits, logp = std::move(logp), targets = std::move(targets),
       weights = std::move(weights), total_w](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
        MatrixX<Scalar> d = logp.array().exp().matrix();
        for (std::size_t r = 0; r < targets.size(); ++r) {
          const auto ri = static_cast<Eigen::Index>(r);
          d(ri, targets[r]) -= Scalar(1);
          d.row(ri) *= weights[r] / total_w;
        }
        tp.accumulate(logits, d * g(0, 0));
      },
      "cross_entropy_rows");
}

/// Sum of a list of same-shape nodes, left to right.
template <typename Scalar>
Var add_n(Tape<Scalar>& t, std::span<const Var> terms) {
  if (terms.empty()) {
    throw ShapeError("add_n: no terms");
  }
  MatrixX<Scalar> out = t.value(terms[0]);
  for (std::size_t i = 1; i < terms.size(); ++i) {
    if (t.value(terms[i]).rows() != out.rows() || t.value(terms[i]).cols() != out.cols()) {
      throw ShapeError("add_n: shape mismatch");
    }
    out += t.value(terms[i]);
  }
  std::vector<Var> ins(terms.begin(), terms.end());
  return t.record(std::move(out), std::span<const Var>(ins),
                  [ins](Tape<Scalar>& tp, const MatrixX<Scalar>& g) {
                    for (Var v : ins) {
                      tp.accumulate(v, g);
                    }
                  },
                  "add_n");
}

}  // namespace i2cl
