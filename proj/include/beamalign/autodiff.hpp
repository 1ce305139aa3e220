#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

// Reverse-mode automatic differentiation over real matrices.
//
// Values are 2-D (rows x cols); by convention rows index the samples of a
// mini-batch and cols the features. Every primitive records its pullback on a
// Tape; Tape::backward() replays them once in reverse order. Complex quantities
// are carried as separate real and imaginary tensors.

namespace beamalign::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Pullback = std::function<void(Tape&, const Matrix& upstream)>;

  Var leaf(Matrix value, bool requires_grad = true) { return push(std::move(value), requires_grad, {}); }
  Var constant(Matrix value) { return push(std::move(value), false, {}); }

  Var push(Matrix value, bool requires_grad, Pullback pullback) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.pullback = std::move(pullback);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  const Matrix& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (!backward_done_) throw std::logic_error("Tape::grad: backward() has not run");
    if (n.grad.size() == 0) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  // Adds `g` into the gradient slot of node `id`.
  void accumulate(std::size_t id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
      throw std::logic_error("Tape::accumulate: gradient shape mismatch");
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void backward(const Var& loss) {
    if (loss.tape() != this) throw std::invalid_argument("Tape::backward: variable from another tape");
    if (backward_done_) throw std::logic_error("Tape::backward: already called; reset() the tape first");
    const Matrix& v = value(loss.id());
    if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("Tape::backward: loss must be a scalar");
    backward_done_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.pullback || n.grad.size() == 0) continue;
      n.pullback(*this, n.grad);
    }
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    mutable Matrix grad;
    bool requires_grad = false;
    Pullback pullback;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline const Matrix& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.tape() != b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
}

inline bool any_grad(const Var& a) { return a.requires_grad(); }
inline bool any_grad(const Var& a, const Var& b) { return a.requires_grad() || b.requires_grad(); }

}  // namespace detail

// ---- elementwise binary ----

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() + b.value(), detail::any_grad(a, b), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() - b.value(), detail::any_grad(a, b), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mul");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->push(a.value().cwiseProduct(b.value()), detail::any_grad(a, b), [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::same_shape(a, b, "div");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->push(a.value().cwiseQuotient(b.value()), detail::any_grad(a, b), [ia, ib](Tape& t, const Matrix& g) {
    const Matrix& bv = t.value(ib);
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseQuotient(bv));
    if (t.requires_grad(ib)) t.accumulate(ib, -g.cwiseProduct(t.value(ia)).cwiseQuotient(bv.cwiseProduct(bv)));
  });
}

// ---- elementwise unary ----

inline Var neg(const Var& a) {
  const auto ia = a.id();
  return a.tape()->push(-a.value(), detail::any_grad(a), [ia](Tape& t, const Matrix& g) { t.accumulate(ia, -g); });
}

inline Var scale(const Var& a, double c) {
  const auto ia = a.id();
  return a.tape()->push(a.value() * c, detail::any_grad(a), [ia, c](Tape& t, const Matrix& g) { t.accumulate(ia, g * c); });
}

inline Var add_scalar(const Var& a, double c) {
  const auto ia = a.id();
  return a.tape()->push(a.value().array() + c, detail::any_grad(a), [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); });
}

inline Var exp(const Var& a) {
  const auto ia = a.id();
  const auto io = a.tape()->size();  // id the output node will receive
  return a.tape()->push(a.value().array().exp(), detail::any_grad(a), [ia, io](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(io)));
  });
}

inline Var log(const Var& a) {
  if ((a.value().array() <= 0.0).any()) throw std::domain_error("log: non-positive input");
  const auto ia = a.id();
  return a.tape()->push(a.value().array().log(), detail::any_grad(a), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseQuotient(t.value(ia)));
  });
}

inline Var sqrt(const Var& a) {
  if ((a.value().array() <= 0.0).any()) throw std::domain_error("sqrt: non-positive input");
  const auto ia = a.id();
  return a.tape()->push(a.value().array().sqrt(), detail::any_grad(a), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, (0.5 * g.array() / t.value(ia).array().sqrt()).matrix());
  });
}

inline Var square(const Var& a) {
  const auto ia = a.id();
  return a.tape()->push(a.value().array().square(), detail::any_grad(a), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, 2.0 * g.cwiseProduct(t.value(ia)));
  });
}

inline Var relu(const Var& a) {
  const auto ia = a.id();
  return a.tape()->push(a.value().cwiseMax(0.0), detail::any_grad(a), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, (t.value(ia).array() > 0.0).select(g, 0.0).matrix());
  });
}

// ---- reductions ----

inline Var sum(const Var& a) {
  const auto ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return a.tape()->push(Matrix::Constant(1, 1, a.value().sum()), detail::any_grad(a), [ia, r, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

// Column sums: (B x n) -> (1 x n).
inline Var sum_rows(const Var& a) {
  const auto ia = a.id();
  const auto r = a.rows();
  return a.tape()->push(a.value().colwise().sum(), detail::any_grad(a), [ia, r](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.replicate(r, 1));
  });
}

// Row sums: (B x n) -> (B x 1).
inline Var sum_cols(const Var& a) {
  const auto ia = a.id();
  const auto c = a.cols();
  return a.tape()->push(a.value().rowwise().sum(), detail::any_grad(a), [ia, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.replicate(1, c));
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// Row-wise max: (B x n) -> (B x 1); the gradient flows only to the arg-max entry
// (first one on ties). `indices`, when given, receives the arg-max per row.
inline Var max_cols(const Var& a, std::vector<Eigen::Index>* indices = nullptr) {
  const Matrix& v = a.value();
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(v.rows()));
  Matrix out(v.rows(), 1);
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < v.cols(); ++c)
      if (v(r, c) > v(r, best)) best = c;
    idx[static_cast<std::size_t>(r)] = best;
    out(r, 0) = v(r, best);
  }
  if (indices) *indices = idx;
  const auto ia = a.id();
  const auto cols = v.cols();
  return a.tape()->push(std::move(out), detail::any_grad(a), [ia, cols, idx = std::move(idx)](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(g.rows(), cols);
    for (Eigen::Index r = 0; r < g.rows(); ++r) d(r, idx[static_cast<std::size_t>(r)]) = g(r, 0);
    t.accumulate(ia, d);
  });
}

// ---- linear algebra and shape ----

inline Var matmul(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("matmul: operands on different tapes");
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() * b.value(), detail::any_grad(a, b), [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

// (1 x n) -> (rows x n)
inline Var broadcast_rows(const Var& a, Eigen::Index rows) {
  if (a.rows() != 1) throw std::invalid_argument("broadcast_rows: expected a row vector");
  const auto ia = a.id();
  return a.tape()->push(a.value().replicate(rows, 1), detail::any_grad(a), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.colwise().sum());
  });
}

// (B x 1) -> (B x cols)
inline Var broadcast_cols(const Var& a, Eigen::Index cols) {
  if (a.cols() != 1) throw std::invalid_argument("broadcast_cols: expected a column vector");
  const auto ia = a.id();
  return a.tape()->push(a.value().replicate(1, cols), detail::any_grad(a), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.rowwise().sum());
  });
}

// Horizontal concatenation of equal-row tensors.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape* tape = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.tape() != tape || p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    rg = rg || p.requires_grad();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), p.cols());
    at += p.cols();
  }
  return tape->push(std::move(out), rg, [spans = std::move(spans)](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const auto& [id, c] : spans) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleCols(off, c));
      off += c;
    }
  });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::invalid_argument("slice_cols: out of range");
  const auto ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return a.tape()->push(a.value().middleCols(start, count), detail::any_grad(a), [ia, r, c, start, count](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(r, c);
    d.middleCols(start, count) = g;
    t.accumulate(ia, d);
  });
}

// ---- operators ----

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }

// ---- composites ----

// Row-wise log-sum-exp with max subtraction: (B x n) -> (B x 1).
inline Var logsumexp_cols(const Var& a) {
  const Var peak = max_cols(a);
  const Var shifted = a - broadcast_cols(peak, a.cols());
  return peak + log(sum_cols(exp(shifted)));
}

// Row-wise log-softmax: a - logsumexp(a).
inline Var log_normalize_cols(const Var& a) { return a - broadcast_cols(logsumexp_cols(a), a.cols()); }

}  // namespace beamalign::ad
