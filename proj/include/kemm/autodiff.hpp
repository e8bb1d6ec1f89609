#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Tape records one forward pass. Every op pushes a node holding its value
// and a closure that propagates the node's gradient to its parents. Nodes
// are created in topological order, so backward() walks them in reverse.
// Parameters enter as leaves and receive accumulated gradients through
// accumulate_parameter_grads().

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "kemm/survival.hpp"

namespace kemm::nn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ParamGroup { pathology_adapter, other };

template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  ParamGroup group = ParamGroup::other;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Matrix<Scalar>& value() const { return tape->value(id); }
  const Matrix<Scalar>& grad() const { return tape->grad(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using V = Var<Scalar>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  V constant(Mat value) { return push(std::move(value), false, nullptr); }

  /// Leaf whose gradient is wanted (inputs under gradient checks).
  V input(Mat value) { return push(std::move(value), grad_enabled_, nullptr); }

  V param(Parameter<Scalar>& p) {
    V v = push(p.value, grad_enabled_, nullptr);
    if (grad_enabled_) bindings_.push_back({v.id, &p});
    return v;
  }

  V push(Mat value, bool requires_grad, std::function<void(int)> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return V{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  const Mat& grad(int id) const {
    if (nodes_[id].grad.size() == 0) {
      zero_scratch_.setZero(nodes_[id].value.rows(), nodes_[id].value.cols());
      return zero_scratch_;
    }
    return nodes_[id].grad;
  }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  template <typename Derived>
  void add_grad(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void backward(V loss) {
    if (!grad_enabled_) throw std::logic_error("backward on a tape without gradients");
    if (loss.rows() != 1 || loss.cols() != 1) throw std::invalid_argument("backward: loss must be 1x1");
    add_grad(loss.id, Mat::Ones(1, 1));
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.requires_grad && n.backward && n.grad.size() != 0) n.backward(id);
    }
  }

  void accumulate_parameter_grads() const {
    for (const auto& b : bindings_) {
      const Node& n = nodes_[b.node];
      if (n.grad.size() == 0) continue;
      if (b.param->grad.size() == 0) b.param->zero_grad();
      b.param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::function<void(int)> backward;
  };
  struct Binding {
    int node;
    Parameter<Scalar>* param;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<Binding> bindings_;
  mutable Mat zero_scratch_;
};

// ---------------------------------------------------------------------------
// Ops

namespace detail {
template <typename Scalar>
Tape<Scalar>* same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape != b.tape) throw std::logic_error("ops across different tapes");
  return a.tape;
}
inline void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}
}  // namespace detail

/// a * b
template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>* t = detail::same_tape(a, b);
  detail::require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Matrix<Scalar> out;
  out.noalias() = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return t->push(std::move(out), a.requires_grad() || b.requires_grad(), [t, ia, ib](int self) {
    const auto& g = t->grad(self);
    if (t->requires_grad(ia)) t->add_grad(ia, g * t->value(ib).transpose());
    if (t->requires_grad(ib)) t->add_grad(ib, t->value(ia).transpose() * g);
  });
}

/// a * b^T
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>* t = detail::same_tape(a, b);
  detail::require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  Matrix<Scalar> out;
  out.noalias() = a.value() * b.value().transpose();
  const int ia = a.id, ib = b.id;
  return t->push(std::move(out), a.requires_grad() || b.requires_grad(), [t, ia, ib](int self) {
    const auto& g = t->grad(self);
    if (t->requires_grad(ia)) t->add_grad(ia, g * t->value(ib));
    if (t->requires_grad(ib)) t->add_grad(ib, g.transpose() * t->value(ia));
  });
}

/// x * W^T + bias, with W of shape out x in and bias 1 x out.
template <typename Scalar>
Var<Scalar> affine(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias) {
  Tape<Scalar>* t = detail::same_tape(x, weight);
  detail::same_tape(x, bias);
  detail::require(x.cols() == weight.cols(), "affine: input width mismatch");
  detail::require(bias.rows() == 1 && bias.cols() == weight.rows(), "affine: bias shape mismatch");
  Matrix<Scalar> out;
  out.noalias() = x.value() * weight.value().transpose();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id, iw = weight.id, ib = bias.id;
  const bool rg = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
  return t->push(std::move(out), rg, [t, ix, iw, ib](int self) {
    const auto& g = t->grad(self);
    if (t->requires_grad(ix)) t->add_grad(ix, g * t->value(iw));
    if (t->requires_grad(iw)) t->add_grad(iw, g.transpose() * t->value(ix));
    if (t->requires_grad(ib)) t->add_grad(ib, g.colwise().sum());
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>* t = detail::same_tape(a, b);
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Matrix<Scalar> out = a.value() + b.value();
  const int ia = a.id, ib = b.id;
  return t->push(std::move(out), a.requires_grad() || b.requires_grad(), [t, ia, ib](int self) {
    const auto& g = t->grad(self);
    t->add_grad(ia, g);
    t->add_grad(ib, g);
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar factor) {
  Tape<Scalar>* t = a.tape;
  Matrix<Scalar> out = a.value() * factor;
  const int ia = a.id;
  return t->push(std::move(out), a.requires_grad(),
                 [t, ia, factor](int self) { t->add_grad(ia, t->grad(self) * factor); });
}

namespace detail {
template <typename Scalar>
constexpr Scalar kGeluC = Scalar(0.7978845608028654);  // sqrt(2/pi)
template <typename Scalar>
constexpr Scalar kGeluA = Scalar(0.044715);
}  // namespace detail

/// tanh-approximated GELU, elementwise.
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  Tape<Scalar>* t = a.tape;
  const auto& x = a.value();
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const Scalar v = x.data()[i];
    const Scalar th = std::tanh(detail::kGeluC<Scalar> * (v + detail::kGeluA<Scalar> * v * v * v));
    out.data()[i] = Scalar(0.5) * v * (Scalar(1) + th);
  }
  const int ia = a.id;
  return t->push(std::move(out), a.requires_grad(), [t, ia](int self) {
    const auto& g = t->grad(self);
    const auto& x = t->value(ia);
    Matrix<Scalar> dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const Scalar v = x.data()[i];
      const Scalar th = std::tanh(detail::kGeluC<Scalar> * (v + detail::kGeluA<Scalar> * v * v * v));
      const Scalar dinner = detail::kGeluC<Scalar> * (Scalar(1) + Scalar(3) * detail::kGeluA<Scalar> * v * v);
      const Scalar d = Scalar(0.5) * (Scalar(1) + th) + Scalar(0.5) * v * (Scalar(1) - th * th) * dinner;
      dx.data()[i] = g.data()[i] * d;
    }
    t->add_grad(ia, dx);
  });
}

/// Row-wise layer normalization. gamma and beta are 1 x cols (per feature)
/// or 1 x 1 (one affine pair shared by the whole row, used when the row
/// length varies between calls).
template <typename Scalar>
Var<Scalar> layer_norm_rows(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Scalar eps) {
  Tape<Scalar>* t = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const bool shared = gamma.cols() == 1;
  detail::require(gamma.rows() == 1 && beta.rows() == 1 && gamma.cols() == beta.cols(),
                  "layer_norm_rows: gamma/beta shape mismatch");
  detail::require(shared || gamma.cols() == x.cols(), "layer_norm_rows: gamma width mismatch");
  const auto& xv = x.value();
  const Eigen::Index n = xv.cols();
  detail::require(n > 0, "layer_norm_rows: empty row");
  auto xhat = std::make_shared<Matrix<Scalar>>(xv.rows(), n);
  auto inv_std = std::make_shared<std::vector<Scalar>>(xv.rows());
  Matrix<Scalar> out(xv.rows(), n);
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const Scalar mu = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mu).square().mean();
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    xhat->row(r) = (xv.row(r).array() - mu) * is;
    if (shared)
      out.row(r) = xhat->row(r).array() * gamma.value()(0, 0) + beta.value()(0, 0);
    else
      out.row(r) = xhat->row(r).array() * gamma.value().row(0).array() + beta.value().row(0).array();
  }
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return t->push(std::move(out), rg, [t, ix, ig, ib, xhat, inv_std, shared](int self) {
    const auto& g = t->grad(self);
    const auto& gm = t->value(ig);
    if (t->requires_grad(ig)) {
      if (shared)
        t->add_grad(ig, Matrix<Scalar>::Constant(1, 1, (g.array() * xhat->array()).sum()));
      else
        t->add_grad(ig, (g.array() * xhat->array()).colwise().sum().matrix());
    }
    if (t->requires_grad(ib)) {
      if (shared)
        t->add_grad(ib, Matrix<Scalar>::Constant(1, 1, g.sum()));
      else
        t->add_grad(ib, g.colwise().sum());
    }
    if (t->requires_grad(ix)) {
      Matrix<Scalar> dx(g.rows(), g.cols());
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        Eigen::Array<Scalar, 1, Eigen::Dynamic> dxhat =
            shared ? (g.row(r).array() * gm(0, 0)).eval() : (g.row(r).array() * gm.row(0).array()).eval();
        const Scalar m1 = dxhat.mean();
        const Scalar m2 = (dxhat * xhat->row(r).array()).mean();
        dx.row(r) = ((dxhat - m1 - xhat->row(r).array() * m2) * (*inv_std)[r]).matrix();
      }
      t->add_grad(ix, dx);
    }
  });
}

/// Softmax over each row, with per-row max subtraction.
template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a) {
  Tape<Scalar>* t = a.tape;
  const auto& x = a.value();
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  const int ia = a.id;
  return t->push(std::move(out), a.requires_grad(), [t, ia](int self) {
    const auto& g = t->grad(self);
    const auto& y = t->value(self);
    Matrix<Scalar> dx = y.array() * g.array();
    const auto dots = dx.rowwise().sum().eval();
    dx -= (y.array().colwise() * dots.array()).matrix();
    t->add_grad(ia, dx);
  });
}

/// Feature-wise concatenation of equal-height blocks.
template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  Tape<Scalar>* t = parts.front().tape;
  Eigen::Index rows = parts.front().rows(), cols = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    detail::same_tape(parts.front(), p);
    detail::require(p.rows() == rows, "concat_cols: row count mismatch");
    cols += p.cols();
    rg = rg || p.requires_grad();
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Matrix<Scalar> out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t->push(std::move(out), rg, [t, ids, widths](int self) {
    const auto& g = t->grad(self);
    Eigen::Index c = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t->requires_grad(ids[k])) t->add_grad(ids[k], g.middleCols(c, widths[k]));
      c += widths[k];
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  detail::require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  Tape<Scalar>* t = a.tape;
  Matrix<Scalar> out = a.value().middleCols(start, count);
  const int ia = a.id;
  return t->push(std::move(out), a.requires_grad(), [t, ia, start, count](int self) {
    Matrix<Scalar> g = Matrix<Scalar>::Zero(t->value(ia).rows(), t->value(ia).cols());
    g.middleCols(start, count) = t->grad(self);
    t->add_grad(ia, g);
  });
}

namespace detail {
/// Column mean computed as a sum over the distinct values in ascending
/// order, each weighted by count / n. The result depends only on the value
/// multiset up to a common scaling of the counts, so it is bit-for-bit
/// invariant to permuting rows and to repeating every row k times.
template <typename Scalar>
Scalar multiset_mean(std::vector<Scalar>& column) {
  for (Scalar x : column)
    if (!std::isfinite(static_cast<double>(x))) {
      double s = 0.0;
      for (Scalar y : column) s += static_cast<double>(y);
      return static_cast<Scalar>(s / static_cast<double>(column.size()));
    }
  std::sort(column.begin(), column.end());
  const double n = static_cast<double>(column.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < column.size();) {
    std::size_t j = i;
    while (j < column.size() && column[j] == column[i]) ++j;
    sum += static_cast<double>(column[i]) * (static_cast<double>(j - i) / n);
    i = j;
  }
  return static_cast<Scalar>(sum);
}
}  // namespace detail

/// Arithmetic mean over rows: n x c -> 1 x c (see detail::multiset_mean).
template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> a) {
  detail::require(a.rows() > 0, "mean_rows: empty token axis");
  Tape<Scalar>* t = a.tape;
  const auto& x = a.value();
  Matrix<Scalar> out(1, x.cols());
  std::vector<Scalar> column(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) column[static_cast<std::size_t>(r)] = x(r, c);
    out(0, c) = detail::multiset_mean(column);
  }
  const int ia = a.id;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(a.rows());
  const Eigen::Index rows = a.rows();
  return t->push(std::move(out), a.requires_grad(), [t, ia, inv, rows](int self) {
    t->add_grad(ia, t->grad(self).replicate(rows, 1) * inv);
  });
}

/// Discrete-time survival NLL of one patient from a 1 x T row of logits.
template <typename Scalar>
Var<Scalar> surv_nll(Var<Scalar> logits, const survival::SurvivalLabel& label) {
  detail::require(logits.rows() == 1, "surv_nll: logits must be a single row");
  Tape<Scalar>* t = logits.tape;
  const auto& u = logits.value();
  auto grad = std::make_shared<std::vector<Scalar>>(u.cols());
  const Scalar loss = survival::nll_surv_loss<Scalar>(std::span<const Scalar>(u.data(), u.cols()), label,
                                                      std::span<Scalar>(*grad));
  const int il = logits.id;
  return t->push(Matrix<Scalar>::Constant(1, 1, loss), logits.requires_grad(), [t, il, grad](int self) {
    const Scalar up = t->grad(self)(0, 0);
    Matrix<Scalar> g(1, static_cast<Eigen::Index>(grad->size()));
    for (std::size_t k = 0; k < grad->size(); ++k) g(0, static_cast<Eigen::Index>(k)) = (*grad)[k] * up;
    t->add_grad(il, g);
  });
}

}  // namespace kemm::nn
