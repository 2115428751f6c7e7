#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every operation applied to Vars; backward() replays the records in reverse
// and accumulates gradients into every node that requires one. Scalars are 1x1 matrices.

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "ibmea/graph.hpp"
#include "ibmea/types.hpp"

namespace ibmea::ad {

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  using Mat = MatrixT<Scalar>;

  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Mat& value() const { return tape_->value(id_); }
  Scalar scalar() const { return value()(0, 0); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  /// Gradient after backward(); a zero matrix when the node was not reached.
  Mat grad() const { return tape_->grad(id_); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

  Tape<Scalar>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = MatrixT<Scalar>;
  using Backward = std::function<void(const Mat&)>;

  /// A non-recording tape evaluates forward values only.
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var<Scalar> constant(Mat v) { return push(std::move(v), false, {}); }
  Var<Scalar> variable(Mat v) { return push(std::move(v), recording_, {}); }

  Var<Scalar> push(Mat v, bool requires_grad, Backward backward) {
    Node node;
    node.value = std::move(v);
    node.requires_grad = recording_ && requires_grad;
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  Mat grad(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Zero-initialized gradient buffer for in-place scatter updates.
  Mat& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <typename Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void backward(const Var<Scalar>& root) {
    if (root.rows() != 1 || root.cols() != 1)
      throw std::invalid_argument("backward() needs a scalar root");
    if (!nodes_[root.id()].requires_grad) return;
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[root.id()].grad = Mat::Ones(1, 1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
  };

  bool recording_;
  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar, typename... V>
bool any_requires_grad(const V&... v) {
  return (v.requires_grad() || ...);
}

template <typename Scalar>
void check_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("Vars from different tapes");
}

template <typename Scalar>
Scalar log1p_exp(Scalar x) {
  return x > Scalar(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_tape(a, b);
  auto* t = a.tape();
  const auto ia = a.id(), ib = b.id();
  return t->push(a.value() * b.value(), detail::any_requires_grad<Scalar>(a, b),
                 [t, ia, ib](const MatrixT<Scalar>& g) {
                   if (t->requires_grad(ia)) t->accumulate(ia, g * t->value(ib).transpose());
                   if (t->requires_grad(ib)) t->accumulate(ib, t->value(ia).transpose() * g);
                 });
}

/// a * b^T
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_tape(a, b);
  auto* t = a.tape();
  const auto ia = a.id(), ib = b.id();
  return t->push(a.value() * b.value().transpose(), detail::any_requires_grad<Scalar>(a, b),
                 [t, ia, ib](const MatrixT<Scalar>& g) {
                   if (t->requires_grad(ia)) t->accumulate(ia, g * t->value(ib));
                   if (t->requires_grad(ib)) t->accumulate(ib, g.transpose() * t->value(ia));
                 });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  auto* t = a.tape();
  const auto ia = a.id();
  return t->push(a.value().transpose(), a.requires_grad(),
                 [t, ia](const MatrixT<Scalar>& g) { t->accumulate(ia, g.transpose()); });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_tape(a, b);
  auto* t = a.tape();
  const auto ia = a.id(), ib = b.id();
  return t->push(a.value() + b.value(), detail::any_requires_grad<Scalar>(a, b),
                 [t, ia, ib](const MatrixT<Scalar>& g) {
                   t->accumulate(ia, g);
                   t->accumulate(ib, g);
                 });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_tape(a, b);
  auto* t = a.tape();
  const auto ia = a.id(), ib = b.id();
  return t->push(a.value() - b.value(), detail::any_requires_grad<Scalar>(a, b),
                 [t, ia, ib](const MatrixT<Scalar>& g) {
                   t->accumulate(ia, g);
                   t->accumulate(ib, -g);
                 });
}

/// a + 1 * bias, bias being a 1 x cols row.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& bias) {
  detail::check_same_tape(a, bias);
  auto* t = a.tape();
  const auto ia = a.id(), ib = bias.id();
  MatrixT<Scalar> out = a.value().rowwise() + bias.value().row(0);
  return t->push(std::move(out), detail::any_requires_grad<Scalar>(a, bias),
                 [t, ia, ib](const MatrixT<Scalar>& g) {
                   t->accumulate(ia, g);
                   t->accumulate(ib, g.colwise().sum());
                 });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  auto* t = a.tape();
  const auto ia = a.id();
  return t->push(a.value() * s, a.requires_grad(),
                 [t, ia, s](const MatrixT<Scalar>& g) { t->accumulate(ia, g * s); });
}

template <typename Scalar>
Var<Scalar> cwise_mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_tape(a, b);
  auto* t = a.tape();
  const auto ia = a.id(), ib = b.id();
  return t->push(a.value().cwiseProduct(b.value()), detail::any_requires_grad<Scalar>(a, b),
                 [t, ia, ib](const MatrixT<Scalar>& g) {
                   if (t->requires_grad(ia)) t->accumulate(ia, g.cwiseProduct(t->value(ib)));
                   if (t->requires_grad(ib)) t->accumulate(ib, g.cwiseProduct(t->value(ia)));
                 });
}

/// Rows of `a` scaled by the matching entry of the column vector `w`.
template <typename Scalar>
Var<Scalar> scale_rows(const Var<Scalar>& a, const Var<Scalar>& w) {
  detail::check_same_tape(a, w);
  auto* t = a.tape();
  const auto ia = a.id(), iw = w.id();
  MatrixT<Scalar> out = a.value().array().colwise() * w.value().col(0).array();
  return t->push(std::move(out), detail::any_requires_grad<Scalar>(a, w),
                 [t, ia, iw](const MatrixT<Scalar>& g) {
                   if (t->requires_grad(ia))
                     t->accumulate(ia, (g.array().colwise() * t->value(iw).col(0).array()).matrix());
                   if (t->requires_grad(iw))
                     t->accumulate(iw, g.cwiseProduct(t->value(ia)).rowwise().sum());
                 });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  auto* t = a.tape();
  const auto ia = a.id();
  MatrixT<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return t->push(std::move(out), a.requires_grad(), [t, ia](const MatrixT<Scalar>& g) {
    const auto& v = t->value(ia);
    t->accumulate(ia, MatrixT<Scalar>::Constant(v.rows(), v.cols(), g(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) {
  return scale(a, s);
}

// ---------------------------------------------------------------------------------------------
// Structural

template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& a, std::span<const int> rows) {
  auto* t = a.tape();
  const auto ia = a.id();
  MatrixT<Scalar> out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(k) = a.value().row(rows[k]);
  std::vector<int> idx(rows.begin(), rows.end());
  return t->push(std::move(out), a.requires_grad(),
                 [t, ia, idx = std::move(idx)](const MatrixT<Scalar>& g) {
                   auto& ga = t->grad_buffer(ia);
                   for (std::size_t k = 0; k < idx.size(); ++k) ga.row(idx[k]) += g.row(k);
                 });
}

template <typename Scalar>
Var<Scalar> column(const Var<Scalar>& a, Index j) {
  auto* t = a.tape();
  const auto ia = a.id();
  return t->push(a.value().col(j), a.requires_grad(), [t, ia, j](const MatrixT<Scalar>& g) {
    t->grad_buffer(ia).col(j) += g.col(0);
  });
}

template <typename Scalar>
Var<Scalar> hconcat(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw std::invalid_argument("hconcat of nothing");
  auto* t = parts.front().tape();
  Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::check_same_tape(parts.front(), p);
    cols += p.cols();
    rg = rg || p.requires_grad();
  }
  MatrixT<Scalar> out(parts.front().rows(), cols);
  std::vector<std::pair<std::size_t, Index>> ids;  // (node, first column)
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    ids.emplace_back(p.id(), c);
    c += p.cols();
  }
  return t->push(std::move(out), rg, [t, ids = std::move(ids)](const MatrixT<Scalar>& g) {
    for (auto [id, first] : ids) t->accumulate(id, g.middleCols(first, t->value(id).cols()));
  });
}

// ---------------------------------------------------------------------------------------------
// Elementwise nonlinearities

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  auto* t = a.tape();
  const auto ia = a.id();
  return t->push(a.value().cwiseMax(Scalar(0)), a.requires_grad(),
                 [t, ia](const MatrixT<Scalar>& g) {
                   t->accumulate(ia, (t->value(ia).array() > Scalar(0)).select(g, Scalar(0)));
                 });
}

template <typename Scalar>
Var<Scalar> elu(const Var<Scalar>& a) {
  auto* t = a.tape();
  const auto ia = a.id();
  MatrixT<Scalar> out = a.value().unaryExpr(
      [](Scalar x) { return x > Scalar(0) ? x : std::expm1(x); });
  return t->push(std::move(out), a.requires_grad(), [t, ia](const MatrixT<Scalar>& g) {
    const auto& x = t->value(ia);
    t->accumulate(ia, g.cwiseProduct(x.unaryExpr(
                          [](Scalar v) { return v > Scalar(0) ? Scalar(1) : std::exp(v); })));
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
  auto* t = a.tape();
  const auto ia = a.id();
  auto y = std::make_shared<MatrixT<Scalar>>(a.value().array().tanh().matrix());
  MatrixT<Scalar> out = *y;
  return t->push(std::move(out), a.requires_grad(), [t, ia, y](const MatrixT<Scalar>& g) {
    t->accumulate(ia, (g.array() * (Scalar(1) - y->array().square())).matrix());
  });
}

/// softplus(a) + floor; strictly positive whenever floor > 0.
template <typename Scalar>
Var<Scalar> softplus(const Var<Scalar>& a, Scalar floor = Scalar(0)) {
  auto* t = a.tape();
  const auto ia = a.id();
  MatrixT<Scalar> out =
      a.value().unaryExpr([floor](Scalar x) { return detail::log1p_exp(x) + floor; });
  return t->push(std::move(out), a.requires_grad(), [t, ia](const MatrixT<Scalar>& g) {
    t->accumulate(ia, g.cwiseProduct(t->value(ia).unaryExpr(
                          [](Scalar x) { return detail::sigmoid(x); })));
  });
}

/// Row-wise softmax.
template <typename Scalar>
Var<Scalar> row_softmax(const Var<Scalar>& a) {
  auto* t = a.tape();
  const auto ia = a.id();
  MatrixT<Scalar> y = a.value();
  for (Index i = 0; i < y.rows(); ++i) {
    const Scalar mx = y.row(i).maxCoeff();
    y.row(i) = (y.row(i).array() - mx).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  auto ys = std::make_shared<MatrixT<Scalar>>(y);
  return t->push(std::move(y), a.requires_grad(), [t, ia, ys](const MatrixT<Scalar>& g) {
    const auto& y = *ys;
    MatrixT<Scalar> dot = g.cwiseProduct(y).rowwise().sum();
    t->accumulate(ia, (y.array() * (g.array().colwise() - dot.col(0).array())).matrix());
  });
}

/// Divides every row by its L2 norm. A zero row stays zero with zero gradient, matching the
/// similarity-0 convention used at evaluation. Non-finite rows propagate.
template <typename Scalar>
Var<Scalar> row_normalize(const Var<Scalar>& a) {
  auto* t = a.tape();
  const auto ia = a.id();
  VectorT<Scalar> norms = a.value().rowwise().norm();
  VectorT<Scalar> inv(norms.size());
  for (Index i = 0; i < norms.size(); ++i) inv(i) = norms(i) == Scalar(0) ? Scalar(0) : Scalar(1) / norms(i);
  MatrixT<Scalar> y = a.value().array().colwise() * inv.array();
  auto ys = std::make_shared<MatrixT<Scalar>>(y);
  return t->push(std::move(y), a.requires_grad(),
                 [t, ia, ys, inv](const MatrixT<Scalar>& g) {
                   const auto& y = *ys;
                   VectorT<Scalar> dot = g.cwiseProduct(y).rowwise().sum();
                   MatrixT<Scalar> d = g - (y.array().colwise() * dot.array()).matrix();
                   t->accumulate(ia, (d.array().colwise() * inv.array()).matrix());
                 });
}

// ---------------------------------------------------------------------------------------------
// Fused losses

/// Mean over rows of KL(N(mu, diag(sigma^2)) || N(0, I)).
template <typename Scalar>
Var<Scalar> kl_standard_normal(const Var<Scalar>& mu, const Var<Scalar>& sigma) {
  detail::check_same_tape(mu, sigma);
  auto* t = mu.tape();
  const auto im = mu.id(), is = sigma.id();
  const auto& m = mu.value();
  const auto& s = sigma.value();
  const Scalar rows = static_cast<Scalar>(m.rows());
  MatrixT<Scalar> out(1, 1);
  out(0, 0) = Scalar(0.5) *
              (m.array().square() + s.array().square() - Scalar(2) * s.array().log() - Scalar(1))
                  .sum() /
              rows;
  return t->push(std::move(out), detail::any_requires_grad<Scalar>(mu, sigma),
                 [t, im, is, rows](const MatrixT<Scalar>& g) {
                   const Scalar c = g(0, 0) / rows;
                   if (t->requires_grad(im)) t->accumulate(im, t->value(im) * c);
                   if (t->requires_grad(is)) {
                     const auto& s = t->value(is);
                     t->accumulate(is, ((s.array() - s.array().inverse()) * c).matrix());
                   }
                 });
}

/// Mean over rows i of -log softmax(logits.row(i))[i]: cross-entropy with the diagonal as target.
template <typename Scalar>
Var<Scalar> softmax_xent_diag(const Var<Scalar>& logits) {
  auto* t = logits.tape();
  const auto il = logits.id();
  const auto& l = logits.value();
  if (l.rows() == 0 || l.rows() > l.cols())
    throw std::invalid_argument("softmax_xent_diag needs 1 <= rows <= cols");
  auto probs = std::make_shared<MatrixT<Scalar>>(l.rows(), l.cols());
  Scalar total = 0;
  for (Index i = 0; i < l.rows(); ++i) {
    const Scalar mx = l.row(i).maxCoeff();
    auto e = (l.row(i).array() - mx).exp();
    const Scalar z = e.sum();
    probs->row(i) = (e / z).matrix();
    total += (mx + std::log(z)) - l(i, i);
  }
  const Scalar rows = static_cast<Scalar>(l.rows());
  MatrixT<Scalar> out(1, 1);
  out(0, 0) = total / rows;
  return t->push(std::move(out), logits.requires_grad(),
                 [t, il, probs, rows](const MatrixT<Scalar>& g) {
                   MatrixT<Scalar> d = *probs;
                   for (Index i = 0; i < d.rows(); ++i) d(i, i) -= Scalar(1);
                   t->accumulate(il, d * (g(0, 0) / rows));
                 });
}

struct MultiSimilarityParams {
  double alpha_pos = 2.0;
  double beta_neg = 50.0;
  double lambda_margin = 0.5;
  double epsilon_mine = 0.1;
};

struct MultiSimilarityStats {
  int anchors = 0;
  int skipped = 0;  // anchors left with neither a mined positive nor a mined negative
};

/// Multi-similarity loss over a similarity matrix whose diagonal holds the positive pair of
/// each anchor row; all off-diagonal entries of the row are negative candidates. Batch mean
/// over rows.
template <typename Scalar>
Var<Scalar> multi_similarity_diag(const Var<Scalar>& sim, const MultiSimilarityParams& p,
                                  MultiSimilarityStats* stats = nullptr) {
  auto* t = sim.tape();
  const auto is = sim.id();
  const auto& s = sim.value();
  if (s.rows() == 0 || s.rows() > s.cols())
    throw std::invalid_argument("multi_similarity_diag needs 1 <= rows <= cols");
  const Scalar a = p.alpha_pos, b = p.beta_neg, lam = p.lambda_margin, eps = p.epsilon_mine;
  auto dsim = std::make_shared<MatrixT<Scalar>>(MatrixT<Scalar>::Zero(s.rows(), s.cols()));
  Scalar total = s.allFinite() ? Scalar(0) : std::numeric_limits<Scalar>::quiet_NaN();
  for (Index i = 0; i < s.rows(); ++i) {
    const Scalar pos = s(i, i);
    Scalar max_neg = -std::numeric_limits<Scalar>::infinity();
    bool any_neg = false;
    for (Index j = 0; j < s.cols(); ++j)
      if (j != i) {
        max_neg = std::max(max_neg, s(i, j));
        any_neg = true;
      }
    // Hard negatives score above the positive minus the margin; the positive is hard when it
    // scores below the hardest negative plus the margin.
    std::vector<Index> hard_neg;
    for (Index j = 0; j < s.cols(); ++j)
      if (j != i && s(i, j) + eps > pos) hard_neg.push_back(j);
    const bool keep_pos = !any_neg || pos - eps < max_neg;

    if (keep_pos) {
      const Scalar x = -a * (pos - lam);
      total += detail::log1p_exp(x) / a;
      (*dsim)(i, i) = -detail::sigmoid(x);
    }
    if (!hard_neg.empty()) {
      // log(1 + sum exp(x_j)) via a shifted log-sum-exp that includes the constant term.
      Scalar mx = 0;
      for (Index j : hard_neg) mx = std::max(mx, b * (s(i, j) - lam));
      Scalar z = std::exp(-mx);
      for (Index j : hard_neg) z += std::exp(b * (s(i, j) - lam) - mx);
      total += (mx + std::log(z)) / b;
      for (Index j : hard_neg) (*dsim)(i, j) = std::exp(b * (s(i, j) - lam) - mx) / z;
    }
    if (stats) {
      ++stats->anchors;
      if (!keep_pos && hard_neg.empty()) ++stats->skipped;
    }
  }
  const Scalar rows = static_cast<Scalar>(s.rows());
  MatrixT<Scalar> out(1, 1);
  out(0, 0) = total / rows;
  return t->push(std::move(out), sim.requires_grad(),
                 [t, is, dsim, rows](const MatrixT<Scalar>& g) {
                   t->accumulate(is, *dsim * (g(0, 0) / rows));
                 });
}

/// Negative binary-cross-entropy bound with a sigmoid discriminator over raw inner products:
/// -(1/B) * [sum_i log D(ii) + (1/(C-1)) sum_{i != j} log(1 - D(ij))].
template <typename Scalar>
Var<Scalar> discriminator_bce_diag(const Var<Scalar>& logits) {
  auto* t = logits.tape();
  const auto il = logits.id();
  const auto& l = logits.value();
  if (l.rows() == 0 || l.rows() > l.cols())
    throw std::invalid_argument("discriminator_bce_diag needs 1 <= rows <= cols");
  const Scalar rows = static_cast<Scalar>(l.rows());
  const Scalar neg_w = l.cols() > 1 ? Scalar(1) / static_cast<Scalar>(l.cols() - 1) : Scalar(0);
  Scalar total = 0;
  MatrixT<Scalar> d(l.rows(), l.cols());
  for (Index i = 0; i < l.rows(); ++i)
    for (Index j = 0; j < l.cols(); ++j) {
      const Scalar x = l(i, j);
      if (i == j) {
        total += detail::log1p_exp(-x);  // -log sigmoid(x)
        d(i, j) = -detail::sigmoid(-x);
      } else {
        total += neg_w * detail::log1p_exp(x);  // -log(1 - sigmoid(x))
        d(i, j) = neg_w * detail::sigmoid(x);
      }
    }
  MatrixT<Scalar> out(1, 1);
  out(0, 0) = total / rows;
  auto ds = std::make_shared<MatrixT<Scalar>>(std::move(d));
  return t->push(std::move(out), logits.requires_grad(),
                 [t, il, ds, rows](const MatrixT<Scalar>& g) {
                   t->accumulate(il, *ds * (g(0, 0) / rows));
                 });
}

// ---------------------------------------------------------------------------------------------
// Graph attention

/// Per-edge attention weights of one additive attention head, laid out like adj.neighbors.
/// For node i and neighbor j: e_ij = LeakyReLU(src.h_i + dst.h_j), softmax over j.
template <typename Scalar>
std::vector<Scalar> gat_attention_weights(const MatrixT<Scalar>& h, const MatrixT<Scalar>& src,
                                          const MatrixT<Scalar>& dst, const Adjacency& adj,
                                          Scalar slope, std::vector<Scalar>* pre = nullptr) {
  const VectorT<Scalar> u = h * src.col(0);
  const VectorT<Scalar> v = h * dst.col(0);
  std::vector<Scalar> w(adj.num_entries());
  if (pre) pre->resize(adj.num_entries());
  for (int i = 0; i < adj.n; ++i) {
    const int lo = adj.offsets[i], hi = adj.offsets[i + 1];
    if (lo == hi) throw std::logic_error("node " + std::to_string(i) + " has no neighbors");
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (int k = lo; k < hi; ++k) {
      const Scalar x = u(i) + v(adj.neighbors[k]);
      if (pre) (*pre)[k] = x;
      w[k] = x > Scalar(0) ? x : slope * x;
      mx = std::max(mx, w[k]);
    }
    Scalar z = 0;
    for (int k = lo; k < hi; ++k) z += (w[k] = std::exp(w[k] - mx));
    for (int k = lo; k < hi; ++k) w[k] /= z;
  }
  return w;
}

/// out_i = sum_j alpha_ij h_j over the neighborhood of i.
template <typename Scalar>
Var<Scalar> gat_aggregate(const Var<Scalar>& h, const Var<Scalar>& attn_src,
                          const Var<Scalar>& attn_dst, const Adjacency& adj, Scalar slope) {
  detail::check_same_tape(h, attn_src);
  detail::check_same_tape(h, attn_dst);
  if (h.rows() != adj.n) throw std::invalid_argument("gat_aggregate: row count != graph size");
  auto* t = h.tape();
  const auto ih = h.id(), isrc = attn_src.id(), idst = attn_dst.id();
  auto pre = std::make_shared<std::vector<Scalar>>();
  auto w = std::make_shared<std::vector<Scalar>>(
      gat_attention_weights(h.value(), attn_src.value(), attn_dst.value(), adj, slope, pre.get()));
  // Node vectors are handled as contiguous columns of the transposed matrices.
  const MatrixT<Scalar> ht = h.value().transpose();
  MatrixT<Scalar> out_t = MatrixT<Scalar>::Zero(ht.rows(), ht.cols());
  for (int i = 0; i < adj.n; ++i)
    for (int k = adj.offsets[i]; k < adj.offsets[i + 1]; ++k)
      out_t.col(i) += (*w)[k] * ht.col(adj.neighbors[k]);
  MatrixT<Scalar> out = out_t.transpose();

  // The adjacency outlives the tape in every caller; capture by pointer.
  const Adjacency* ap = &adj;
  return t->push(
      std::move(out), detail::any_requires_grad<Scalar>(h, attn_src, attn_dst),
      [t, ih, isrc, idst, ap, w, pre, slope](const MatrixT<Scalar>& g) {
        const auto& adj = *ap;
        const auto& hv = t->value(ih);
        const MatrixT<Scalar> ht = hv.transpose();
        const MatrixT<Scalar> gt = g.transpose();
        MatrixT<Scalar> dh_t = MatrixT<Scalar>::Zero(ht.rows(), ht.cols());
        VectorT<Scalar> du = VectorT<Scalar>::Zero(hv.rows());
        VectorT<Scalar> dv = VectorT<Scalar>::Zero(hv.rows());
        std::vector<Scalar> dalpha;
        for (int i = 0; i < adj.n; ++i) {
          const int lo = adj.offsets[i], hi = adj.offsets[i + 1];
          Scalar dot = 0;
          dalpha.resize(hi - lo);
          for (int k = lo; k < hi; ++k) {
            const int j = adj.neighbors[k];
            dh_t.col(j) += (*w)[k] * gt.col(i);
            dalpha[k - lo] = gt.col(i).dot(ht.col(j));
            dot += (*w)[k] * dalpha[k - lo];
          }
          for (int k = lo; k < hi; ++k) {
            const Scalar de = (*w)[k] * (dalpha[k - lo] - dot);
            const Scalar dpre = (*pre)[k] > Scalar(0) ? de : slope * de;
            du(i) += dpre;
            dv(adj.neighbors[k]) += dpre;
          }
        }
        const auto& src = t->value(isrc);
        const auto& dst = t->value(idst);
        if (t->requires_grad(ih)) {
          MatrixT<Scalar> dh = dh_t.transpose();
          dh += du * src.col(0).transpose();
          dh += dv * dst.col(0).transpose();
          t->accumulate(ih, dh);
        }
        if (t->requires_grad(isrc)) t->accumulate(isrc, hv.transpose() * du);
        if (t->requires_grad(idst)) t->accumulate(idst, hv.transpose() * dv);
      });
}

}  // namespace ibmea::ad
