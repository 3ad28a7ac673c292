// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Var is a shared handle to a graph node. Leaves created with parameter()
// keep their gradient across backward() calls until zero_grad(); interior
// nodes are released together with the last handle that reaches them.
// Nodes whose inputs do not require gradients carry no backward closure and
// hold no references to their inputs, so frozen subgraphs cost nothing on the
// reverse pass.
#pragma once

#include "dispro/core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dispro::ad {

template <class T>
struct Node {
  Mat<T> value;
  Mat<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Mat<T>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Mat<T>& value() const { return node_->value; }
  // Direct write access for optimizers and finite-difference probes.
  Mat<T>& mutable_value() { return node_->value; }

  // Gradient, or zeros of the value's shape if nothing was accumulated.
  Mat<T> grad() const {
    if (node_->grad.size() == 0) return Mat<T>::Zero(rows(), cols());
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  T scalar() const { return node_->value(0, 0); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Mat<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return Var<T>(std::move(n));
}

template <class T>
Var<T> parameter(Mat<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var<T>(std::move(n));
}

// Independent copy of a leaf: same value, same trainability, fresh gradient.
template <class T>
Var<T> clone(const Var<T>& v) {
  return v.requires_grad() ? parameter<T>(v.value()) : constant<T>(v.value());
}

namespace detail {

template <class T>
Var<T> make(Mat<T> value, std::vector<Var<T>> inputs,
            std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.node());
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

template <class T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::ShapeMismatch,
          std::string(op) + ": shape mismatch");
}

}  // namespace detail

/// Runs the reverse pass from a 1x1 root, accumulating into every reachable
/// node that requires a gradient.
template <class T>
void backward(const Var<T>& root) {
  require(root.rows() == 1 && root.cols() == 1, ErrorCode::ShapeMismatch,
          "backward: root must be a scalar");
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Mat<T>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require(a.cols() == b.rows(), ErrorCode::ShapeMismatch, "matmul: inner dims");
  return detail::make<T>(a.value() * b.value(), {a, b}, [](Node<T>& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    if (A.requires_grad) A.accumulate(self.grad * B.value.transpose());
    if (B.requires_grad) B.accumulate(A.value.transpose() * self.grad);
  });
}

/// a * b^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require(a.cols() == b.cols(), ErrorCode::ShapeMismatch, "matmul_nt: inner dims");
  return detail::make<T>(a.value() * b.value().transpose(), {a, b}, [](Node<T>& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    if (A.requires_grad) A.accumulate(self.grad * B.value);
    if (B.requires_grad) B.accumulate(self.grad.transpose() * A.value);
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "add");
  return detail::make<T>(a.value() + b.value(), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->accumulate(self.grad);
  });
}

/// Adds a 1xC row to every row of a.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorCode::ShapeMismatch,
          "add_row: row must be 1 x cols");
  Mat<T> out = a.value().rowwise() + row.value().row(0);
  return detail::make<T>(std::move(out), {a, row}, [](Node<T>& self) {
    auto& A = *self.parents[0];
    auto& R = *self.parents[1];
    if (A.requires_grad) A.accumulate(self.grad);
    if (R.requires_grad) R.accumulate(self.grad.colwise().sum());
  });
}

/// Multiplies row i of a by s(i, 0).
template <class T>
Var<T> row_scale(const Var<T>& a, const Var<T>& s) {
  require(s.cols() == 1 && s.rows() == a.rows(), ErrorCode::ShapeMismatch,
          "row_scale: scale must be rows x 1");
  Mat<T> out = a.value().array().colwise() * s.value().col(0).array();
  return detail::make<T>(std::move(out), {a, s}, [](Node<T>& self) {
    auto& A = *self.parents[0];
    auto& S = *self.parents[1];
    if (A.requires_grad)
      A.accumulate(self.grad.array().colwise() * S.value.col(0).array());
    if (S.requires_grad)
      S.accumulate((self.grad.array() * A.value.array()).rowwise().sum().matrix());
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  return detail::make<T>(a.value() * c, {a}, [c](Node<T>& self) {
    self.parents[0]->accumulate(self.grad * c);
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  Mat<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return detail::make<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& A = *self.parents[0];
    A.accumulate(Mat<T>::Constant(A.value.rows(), A.value.cols(), self.grad(0, 0)));
  });
}

/// Weighted sum of 1x1 terms; used to combine losses.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  require(terms.size() == weights.size() && !terms.empty(), ErrorCode::InvalidArgument,
          "weighted_sum: term/weight count");
  Mat<T> out = Mat<T>::Zero(1, 1);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    require(terms[i].rows() == 1 && terms[i].cols() == 1, ErrorCode::ShapeMismatch,
            "weighted_sum: terms must be scalars");
    out(0, 0) += weights[i] * terms[i].scalar();
  }
  return detail::make<T>(std::move(out), terms, [weights](Node<T>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i)
      if (self.parents[i]->requires_grad)
        self.parents[i]->accumulate(self.grad * weights[i]);
  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

namespace detail {

// df(x, y) returns dy/dx given input x and output y
template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  Mat<T> out = a.value().unaryExpr(f);
  return make<T>(std::move(out), {a}, [df](Node<T>& self) {
    auto& A = *self.parents[0];
    Mat<T> g = self.grad.binaryExpr(
        A.value.binaryExpr(self.value, df), [](T u, T v) { return u * v; });
    A.accumulate(g);
  });
}

}  // namespace detail

template <class T>
Var<T> relu(const Var<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  Mat<T> out = a.value().array().tanh().matrix();
  return detail::make<T>(std::move(out), {a}, [](Node<T>& self) {
    self.parents[0]->accumulate((self.grad.array() * (T(1) - self.value.array().square())).matrix());
  });
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

// Self-normalizing constants (Klambauer et al.)
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;
inline constexpr double kSeluLambda = 1.0507009873554804934193349852946;

template <class T>
Var<T> selu(const Var<T>& a) {
  const T alpha = T(kSeluAlpha), lambda = T(kSeluLambda);
  return detail::unary<T>(
      a,
      [=](T x) { return x > T(0) ? lambda * x : lambda * alpha * (std::exp(x) - T(1)); },
      [=](T x, T) { return x > T(0) ? lambda : lambda * alpha * std::exp(x); });
}

// tanh approximation of GELU
template <class T>
Var<T> gelu(const Var<T>& a) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T k = T(0.044715);
  const auto x = a.value().array();
  Mat<T> t = (c * (x + k * x.cube())).tanh().matrix();
  Mat<T> out = (T(0.5) * x * (T(1) + t.array())).matrix();
  return detail::make<T>(std::move(out), {a}, [t = std::move(t), c, k](Node<T>& self) {
    auto& A = *self.parents[0];
    const auto xv = A.value.array();
    const auto tv = t.array();
    const auto du = c * (T(1) + T(3) * k * xv.square());
    A.accumulate((self.grad.array() *
                  (T(0.5) * (T(1) + tv) + T(0.5) * xv * (T(1) - tv.square()) * du))
                     .matrix());
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives

/// Row-wise layer normalization with a 1xC gain and bias.
template <class T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const auto C = x.cols();
  require(gain.rows() == 1 && gain.cols() == C && bias.rows() == 1 && bias.cols() == C,
          ErrorCode::ShapeMismatch, "layernorm: gain/bias must be 1 x cols");
  const auto R = x.rows();
  Mat<T> xhat(R, C);
  std::vector<T> inv_std(static_cast<std::size_t>(R));
  for (Eigen::Index r = 0; r < R; ++r) {
    const T mu = x.value().row(r).mean();
    const auto centered = x.value().row(r).array() - mu;
    const T var = centered.square().mean();
    inv_std[static_cast<std::size_t>(r)] = T(1) / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std[static_cast<std::size_t>(r)];
  }
  Mat<T> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return detail::make<T>(
      std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& X = *self.parents[0];
        auto& G = *self.parents[1];
        auto& B = *self.parents[2];
        const auto& g = self.grad;
        if (G.requires_grad) G.accumulate((g.array() * xhat.array()).colwise().sum().matrix());
        if (B.requires_grad) B.accumulate(g.colwise().sum());
        if (X.requires_grad) {
          Mat<T> dx(g.rows(), g.cols());
          for (Eigen::Index r = 0; r < g.rows(); ++r) {
            const auto dxhat = (g.row(r).array() * G.value.row(0).array()).eval();
            const T m1 = dxhat.mean();
            const T m2 = (dxhat * xhat.row(r).array()).mean();
            dx.row(r) = (dxhat - m1 - xhat.row(r).array() * m2) *
                        inv_std[static_cast<std::size_t>(r)];
          }
          X.accumulate(dx);
        }
      });
}

/// Row-wise softmax; columns whose key_mask entry is false get probability 0.
/// An empty mask means every column participates.
template <class T>
Var<T> softmax_rows(const Var<T>& x, std::span<const std::uint8_t> key_mask = {}) {
  const auto R = x.rows(), C = x.cols();
  require(key_mask.empty() || static_cast<Eigen::Index>(key_mask.size()) == C,
          ErrorCode::ShapeMismatch, "softmax_rows: mask width");
  auto on = [&](Eigen::Index c) {
    return key_mask.empty() || key_mask[static_cast<std::size_t>(c)] != 0;
  };
  Mat<T> out = Mat<T>::Zero(R, C);
  for (Eigen::Index r = 0; r < R; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (Eigen::Index c = 0; c < C; ++c)
      if (on(c)) mx = std::max(mx, x.value()(r, c));
    T z = 0;
    for (Eigen::Index c = 0; c < C; ++c)
      if (on(c)) {
        out(r, c) = std::exp(x.value()(r, c) - mx);
        z += out(r, c);
      }
    if (z > T(0)) out.row(r) /= z;
  }
  return detail::make<T>(std::move(out), {x}, [](Node<T>& self) {
    const auto& y = self.value;
    const Mat<T> gy = self.grad.cwiseProduct(y);
    Mat<T> dx = gy - (y.array().colwise() * gy.rowwise().sum().array()).matrix();
    self.parents[0]->accumulate(dx);
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> slice_rows(const Var<T>& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), ErrorCode::ShapeMismatch,
          "slice_rows: range");
  Mat<T> out = a.value().middleRows(start, count);
  return detail::make<T>(std::move(out), {a}, [start, count](Node<T>& self) {
    auto& A = *self.parents[0];
    Mat<T> g = Mat<T>::Zero(A.value.rows(), A.value.cols());
    g.middleRows(start, count) = self.grad;
    A.accumulate(g);
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), ErrorCode::ShapeMismatch,
          "slice_cols: range");
  Mat<T> out = a.value().middleCols(start, count);
  return detail::make<T>(std::move(out), {a}, [start, count](Node<T>& self) {
    auto& A = *self.parents[0];
    Mat<T> g = Mat<T>::Zero(A.value.rows(), A.value.cols());
    g.middleCols(start, count) = self.grad;
    A.accumulate(g);
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorCode::InvalidArgument, "concat_rows: no parts");
  const auto C = parts.front().cols();
  Eigen::Index R = 0;
  for (const auto& p : parts) {
    require(p.cols() == C, ErrorCode::ShapeMismatch, "concat_rows: column mismatch");
    R += p.rows();
  }
  Mat<T> out(R, C);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return detail::make<T>(std::move(out), parts, [](Node<T>& self) {
    Eigen::Index at = 0;
    for (auto& p : self.parents) {
      const auto r = p->value.rows();
      if (p->requires_grad) p->accumulate(self.grad.middleRows(at, r));
      at += r;
    }
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorCode::InvalidArgument, "concat_cols: no parts");
  const auto R = parts.front().rows();
  Eigen::Index C = 0;
  for (const auto& p : parts) {
    require(p.rows() == R, ErrorCode::ShapeMismatch, "concat_cols: row mismatch");
    C += p.cols();
  }
  Mat<T> out(R, C);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::make<T>(std::move(out), parts, [](Node<T>& self) {
    Eigen::Index at = 0;
    for (auto& p : self.parents) {
      const auto c = p->value.cols();
      if (p->requires_grad) p->accumulate(self.grad.middleCols(at, c));
      at += c;
    }
  });
}

/// Rows of a at the given indices, in order; gradients scatter-add back.
template <class T>
Var<T> gather_rows(const Var<T>& a, std::vector<Eigen::Index> idx) {
  Mat<T> out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < a.rows(), ErrorCode::ShapeMismatch,
            "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
  }
  return detail::make<T>(std::move(out), {a}, [idx = std::move(idx)](Node<T>& self) {
    auto& A = *self.parents[0];
    Mat<T> g = Mat<T>::Zero(A.value.rows(), A.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    A.accumulate(g);
  });
}

}  // namespace dispro::ad
