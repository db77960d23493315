#pragma once

// Minimal reverse-mode automatic differentiation over row-major Eigen
// matrices. A sequence tensor [B x T x C] is stored as a (B*T) x C matrix
// whose row index is b*T + t.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "stcn/errors.hpp"

namespace stcn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
struct Parameter {
  std::string name;
  Mat<S> value;
};

/// Named, ordered collection of trainable tensors.
template <typename S>
class ParamSet {
 public:
  std::size_t add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw UsageError("duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.push_back({name, Mat<S>::Zero(rows, cols)});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<S>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<S>& operator[](std::size_t i) const { return params_[i]; }

  const Parameter<S>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter<S>> params_;
  std::map<std::string, std::size_t> index_;
};

/// One gradient matrix per parameter, aligned with a ParamSet.
template <typename S>
using Gradients = std::vector<Mat<S>>;

template <typename S>
Gradients<S> zero_gradients(const ParamSet<S>& ps) {
  Gradients<S> g;
  g.reserve(ps.size());
  for (const auto& p : ps) g.push_back(Mat<S>::Zero(p.value.rows(), p.value.cols()));
  return g;
}

/// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename S>
class Tape {
 public:
  /// Called during the reverse sweep with the node's own handle.
  using Backward = std::function<void(Tape&, Var)>;

  explicit Tape(const ParamSet<S>* params = nullptr) : params_(params) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const ParamSet<S>* params() const { return params_; }

  Var constant(Mat<S> value) { return push(std::move(value), false, {}); }

  Var param(std::size_t pid) {
    if (!params_) throw UsageError("tape has no parameter set");
    auto it = param_nodes_.find(pid);
    if (it != param_nodes_.end()) return Var{it->second};
    Var v = push((*params_)[pid].value, true, {});
    param_nodes_[pid] = v.id;
    return v;
  }

  Var push(Mat<S> value, bool needs_grad, Backward back) {
    nodes_.push_back(Node{std::move(value), Mat<S>(), needs_grad, std::move(back)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<S>& value(Var v) const { return node(v).value; }
  bool needs_grad(Var v) const { return node(v).needs_grad; }
  const Mat<S>& grad(Var v) const { return node(v).grad; }

  template <typename Expr>
  void accumulate(Var v, const Expr& g) {
    auto& n = node(v);
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Reverse sweep from a 1x1 root.
  void backward(Var root, S seed = S(1)) {
    const auto& rv = value(root);
    if (rv.rows() != 1 || rv.cols() != 1) throw ShapeError("backward root must be 1x1");
    node(root).grad = Mat<S>::Constant(1, 1, seed);
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.size() == 0 || !n.back) continue;
      n.back(*this, Var{i});
    }
  }

  /// Parameter gradients gathered after backward(); untouched parameters are zero.
  Gradients<S> param_grads() const {
    Gradients<S> g = zero_gradients(*params_);
    add_param_grads(g);
    return g;
  }

  void add_param_grads(Gradients<S>& g) const {
    for (const auto& [pid, nid] : param_nodes_) {
      const auto& n = nodes_[static_cast<std::size_t>(nid)];
      if (n.grad.size() > 0) g[pid] += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    bool needs_grad;
    Backward back;
  };

  Node& node(Var v) { return nodes_.at(static_cast<std::size_t>(v.id)); }
  const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }

  const ParamSet<S>* params_;
  std::vector<Node> nodes_;
  std::map<std::size_t, int> param_nodes_;
};

/// Differentiable primitives. All shapes are checked eagerly.
namespace ad {

namespace detail {

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
}

}  // namespace detail

/// Elementwise map y = f(x) with derivative df(x, y).
template <typename S, typename F, typename DF>
Var unary(Tape<S>& t, Var a, F f, DF df) {
  Mat<S> y = t.value(a).unaryExpr(f);
  if (!t.needs_grad(a)) return t.constant(std::move(y));
  return t.push(std::move(y), true, [a, df](Tape<S>& tp, Var self) {
    Mat<S> d = tp.value(a).binaryExpr(tp.value(self), df);
    tp.accumulate(a, tp.grad(self).cwiseProduct(d));
  });
}

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  detail::require_same_shape(t.value(a), t.value(b), "add");
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(t.value(a) + t.value(b), ng, [a, b](Tape<S>& tp, Var self) {
    tp.accumulate(a, tp.grad(self));
    tp.accumulate(b, tp.grad(self));
  });
}

template <typename S>
Var sub(Tape<S>& t, Var a, Var b) {
  detail::require_same_shape(t.value(a), t.value(b), "sub");
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(t.value(a) - t.value(b), ng, [a, b](Tape<S>& tp, Var self) {
    tp.accumulate(a, tp.grad(self));
    tp.accumulate(b, -tp.grad(self));
  });
}

/// Hadamard product.
template <typename S>
Var mul(Tape<S>& t, Var a, Var b) {
  detail::require_same_shape(t.value(a), t.value(b), "mul");
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(t.value(a).cwiseProduct(t.value(b)), ng, [a, b](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
    if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
  });
}

template <typename S>
Var scale(Tape<S>& t, Var a, S s) {
  return t.push(t.value(a) * s, t.needs_grad(a),
                [a, s](Tape<S>& tp, Var self) { tp.accumulate(a, tp.grad(self) * s); });
}

template <typename S>
Var add_scalar(Tape<S>& t, Var a, S s) {
  Mat<S> y = t.value(a).array() + s;
  return t.push(std::move(y), t.needs_grad(a),
                [a](Tape<S>& tp, Var self) { tp.accumulate(a, tp.grad(self)); });
}

/// a [N x K] times w [K x M].
template <typename S>
Var matmul(Tape<S>& t, Var a, Var w) {
  const auto& av = t.value(a);
  const auto& wv = t.value(w);
  if (av.cols() != wv.rows())
    throw ShapeError("matmul: inner dimension mismatch (" + std::to_string(av.cols()) + " vs " +
                     std::to_string(wv.rows()) + ")");
  bool ng = t.needs_grad(a) || t.needs_grad(w);
  Mat<S> y = av * wv;
  return t.push(std::move(y), ng, [a, w](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(w).transpose());
    if (tp.needs_grad(w)) tp.accumulate(w, tp.value(a).transpose() * g);
  });
}

/// a [N x M] plus row vector b [1 x M] broadcast over rows.
template <typename S>
Var add_row(Tape<S>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (bv.rows() != 1 || bv.cols() != av.cols()) throw ShapeError("add_row: bias width mismatch");
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  Mat<S> y = av.rowwise() + bv.row(0);
  return t.push(std::move(y), ng, [a, b](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    tp.accumulate(a, g);
    if (tp.needs_grad(b)) tp.accumulate(b, g.colwise().sum());
  });
}

template <typename S>
Var tanh(Tape<S>& t, Var a) {
  return unary(t, a, [](S x) { return std::tanh(x); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Var sigmoid(Tape<S>& t, Var a) {
  return unary(
      t, a,
      [](S x) {
        return x >= 0 ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
      },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Var relu(Tape<S>& t, Var a) {
  return unary(
      t, a, [](S x) { return x > 0 ? x : S(0); }, [](S x, S) { return x > 0 ? S(1) : S(0); });
}

template <typename S>
S softplus_value(S x) {
  return x > S(20) ? x : std::log1p(std::exp(x));
}

/// softplus followed by a hard clamp to [lo, hi]; zero gradient where clamped.
template <typename S>
Var softplus_clamp(Tape<S>& t, Var a, S lo, S hi) {
  return unary(
      t, a, [lo, hi](S x) { return std::clamp(softplus_value(x), lo, hi); },
      [lo, hi](S x, S) {
        S sp = softplus_value(x);
        if (sp < lo || sp > hi) return S(0);
        return x >= 0 ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
      });
}

template <typename S>
Var clamp(Tape<S>& t, Var a, S lo, S hi) {
  return unary(
      t, a, [lo, hi](S x) { return std::clamp(x, lo, hi); },
      [lo, hi](S x, S) { return (x < lo || x > hi) ? S(0) : S(1); });
}

template <typename S>
Var log(Tape<S>& t, Var a) {
  return unary(t, a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <typename S>
Var square(Tape<S>& t, Var a) {
  return unary(t, a, [](S x) { return x * x; }, [](S x, S) { return S(2) * x; });
}

template <typename S>
Var sqrt(Tape<S>& t, Var a) {
  return unary(t, a, [](S x) { return std::sqrt(x); }, [](S, S y) { return S(0.5) / y; });
}

template <typename S>
Var reciprocal(Tape<S>& t, Var a) {
  return unary(t, a, [](S x) { return S(1) / x; }, [](S, S y) { return -y * y; });
}

/// Shift every length-T sequence block down by `steps` rows, zero-filling the
/// first rows of each block. Row t of the result holds row t-steps of the input.
template <typename S>
Var time_shift(Tape<S>& t, Var a, Eigen::Index steps, Eigen::Index T) {
  const auto& av = t.value(a);
  if (T <= 0 || av.rows() % T != 0) throw ShapeError("time_shift: rows not a multiple of T");
  const Eigen::Index B = av.rows() / T;
  Mat<S> y = Mat<S>::Zero(av.rows(), av.cols());
  const Eigen::Index keep = T - steps;
  if (keep > 0)
    for (Eigen::Index b = 0; b < B; ++b)
      y.middleRows(b * T + steps, keep) = av.middleRows(b * T, keep);
  return t.push(std::move(y), t.needs_grad(a), [a, steps, T, B, keep](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    Mat<S> ga = Mat<S>::Zero(g.rows(), g.cols());
    if (keep > 0)
      for (Eigen::Index b = 0; b < B; ++b)
        ga.middleRows(b * T, keep) = g.middleRows(b * T + steps, keep);
    tp.accumulate(a, ga);
  });
}

/// Column-wise concatenation.
template <typename S>
Var concat_cols(Tape<S>& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool ng = false;
  for (Var p : parts) {
    if (t.value(p).rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += t.value(p).cols();
    ng = ng || t.needs_grad(p);
  }
  Mat<S> y(rows, cols);
  Eigen::Index off = 0;
  for (Var p : parts) {
    const auto& pv = t.value(p);
    y.middleCols(off, pv.cols()) = pv;
    off += pv.cols();
  }
  return t.push(std::move(y), ng, [parts](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    Eigen::Index o = 0;
    for (Var p : parts) {
      const Eigen::Index c = tp.value(p).cols();
      if (tp.needs_grad(p)) tp.accumulate(p, g.middleCols(o, c));
      o += c;
    }
  });
}

template <typename S>
Var slice_cols(Tape<S>& t, Var a, Eigen::Index start, Eigen::Index n) {
  const auto& av = t.value(a);
  if (start < 0 || n < 0 || start + n > av.cols()) throw ShapeError("slice_cols: out of range");
  Mat<S> y = av.middleCols(start, n);
  return t.push(std::move(y), t.needs_grad(a), [a, start, n](Tape<S>& tp, Var self) {
    const auto& av2 = tp.value(a);
    Mat<S> ga = Mat<S>::Zero(av2.rows(), av2.cols());
    ga.middleCols(start, n) = tp.grad(self);
    tp.accumulate(a, ga);
  });
}

/// Rows [start, start+n).
template <typename S>
Var slice_rows(Tape<S>& t, Var a, Eigen::Index start, Eigen::Index n) {
  const auto& av = t.value(a);
  if (start < 0 || n < 0 || start + n > av.rows()) throw ShapeError("slice_rows: out of range");
  Mat<S> y = av.middleRows(start, n);
  return t.push(std::move(y), t.needs_grad(a), [a, start, n](Tape<S>& tp, Var self) {
    const auto& av2 = tp.value(a);
    Mat<S> ga = Mat<S>::Zero(av2.rows(), av2.cols());
    ga.middleRows(start, n) = tp.grad(self);
    tp.accumulate(a, ga);
  });
}

/// Sum across columns: [N x M] -> [N x 1].
template <typename S>
Var row_sum(Tape<S>& t, Var a) {
  Mat<S> y = t.value(a).rowwise().sum();
  return t.push(std::move(y), t.needs_grad(a), [a](Tape<S>& tp, Var self) {
    const auto& av = tp.value(a);
    Mat<S> ga = tp.grad(self).col(0).replicate(1, av.cols());
    tp.accumulate(a, ga);
  });
}

/// Elementwise product with a constant weight matrix of the same shape.
template <typename S>
Var weight(Tape<S>& t, Var a, const Mat<S>& w) {
  detail::require_same_shape(t.value(a), w, "weight");
  return t.push(t.value(a).cwiseProduct(w), t.needs_grad(a), [a, w](Tape<S>& tp, Var self) {
    tp.accumulate(a, tp.grad(self).cwiseProduct(w));
  });
}

/// Total sum to a 1x1 node.
template <typename S>
Var sum(Tape<S>& t, Var a) {
  Mat<S> y = Mat<S>::Constant(1, 1, t.value(a).sum());
  return t.push(std::move(y), t.needs_grad(a), [a](Tape<S>& tp, Var self) {
    const auto& av = tp.value(a);
    tp.accumulate(a, Mat<S>::Constant(av.rows(), av.cols(), tp.grad(self)(0, 0)));
  });
}

}  // namespace ad

}  // namespace stcn
