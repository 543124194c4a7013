#pragma once

// Reverse-mode differentiation tape. Nodes are appended in creation order,
// which is already a topological order, so backward is a single reverse scan.

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dann/random.hpp"
#include "dann/tensor.hpp"

namespace dann {

/// A named trainable tensor. Gradients accumulate across backward passes until
/// zero_grad() is called.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool is_trainable = true)
      : name(std::move(n)),
        value(std::move(v)),
        grad(value.shape()),
        trainable(is_trainable) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) {
      grad = Tensor(value.shape());
    } else {
      grad.fill(0.0);
    }
  }
};

class Graph;

class Var {
 public:
  Var() = default;

  Graph* graph() const noexcept { return graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

struct BackwardCtx {
  const Graph& graph;
  const Tensor& out;
  const Tensor& grad_out;
  std::span<const std::size_t> inputs;
  /// Null for inputs that do not require a gradient. Contributions must be
  /// accumulated, never assigned.
  std::span<Tensor* const> grad_in;

  const Tensor& in(std::size_t i) const;
};

using BackwardFn = std::function<void(const BackwardCtx&)>;

class Graph {
 public:
  explicit Graph(bool training = true) : training_(training) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const noexcept { return training_; }
  void set_training(bool t) noexcept { training_ = t; }

  /// When set, every op output is scanned for NaN/Inf.
  bool checked() const noexcept { return checked_; }
  void set_checked(bool c) noexcept { checked_ = c; }

  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor t, std::string op = "const") {
    return push(std::move(op), std::move(t), {}, nullptr, false, nullptr);
  }

  /// Leaf for a parameter; the same Parameter always maps to the same node.
  Var param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var(this, it->second);
    Var v = push("param:" + p.name, p.value, {}, nullptr, p.trainable, &p);
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  Var make(std::string op, Tensor value, const std::vector<Var>& inputs,
           BackwardFn fn) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    bool needs = false;
    for (const Var& v : inputs) {
      if (v.graph_ != this) {
        throw Error(op + ": input belongs to a different graph");
      }
      ids.push_back(v.id_);
      needs = needs || nodes_[v.id_].requires_grad;
    }
    if (checked_ && !value.all_finite()) {
      throw Error(op + ": non-finite value in output " +
                  shape_str(value.shape()));
    }
    return push(std::move(op), std::move(value), std::move(ids),
                needs ? std::move(fn) : nullptr, needs, nullptr);
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id_).value; }
  const std::string& op(Var v) const { return nodes_.at(v.id_).op; }
  bool requires_grad(Var v) const { return nodes_.at(v.id_).requires_grad; }

  /// Gradient of the most recent backward pass with respect to a node.
  const Tensor& grad(Var v) const {
    if (v.id_ >= grads_.size() || grads_[v.id_].empty()) {
      throw Error("graph: no gradient recorded for node " +
                  std::to_string(v.id_) + " (" + nodes_.at(v.id_).op + ")");
    }
    return grads_[v.id_];
  }

  /// Propagates d(loss)/d(node) to every reachable node and accumulates the
  /// result into Parameter::grad. Returns the parameters that were reached.
  std::vector<Parameter*> backward(Var loss) {
    if (loss.graph_ != this) throw Error("backward: loss from another graph");
    const Node& root = nodes_.at(loss.id_);
    if (root.value.size() != 1) {
      throw Error("backward: loss must be scalar, got shape " +
                  shape_str(root.value.shape()));
    }
    grads_.assign(nodes_.size(), Tensor());
    grads_[loss.id_] = Tensor(root.value.shape(), 1.0);

    std::vector<Tensor*> grad_in;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (!node.requires_grad || grads_[i].empty() || !node.backward) continue;
      grad_in.assign(node.inputs.size(), nullptr);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t j = node.inputs[k];
        if (!nodes_[j].requires_grad) continue;
        if (grads_[j].empty()) grads_[j] = Tensor(nodes_[j].value.shape());
        grad_in[k] = &grads_[j];
      }
      BackwardCtx ctx{*this, node.value, grads_[i], node.inputs, grad_in};
      node.backward(ctx);
    }

    std::vector<Parameter*> reached;
    for (std::size_t i = 0; i <= loss.id_; ++i) {
      Parameter* p = nodes_[i].param;
      if (p == nullptr || grads_[i].empty()) continue;
      if (p->grad.shape() != p->value.shape()) p->zero_grad();
      p->grad += grads_[i];
      reached.push_back(p);
    }
    return reached;
  }

  /// Text adjacency list, one node per line: "id op shape <- inputs".
  std::string dump() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      os << i << ' ' << n.op << ' ' << shape_str(n.value.shape());
      if (n.requires_grad) os << " *";
      if (!n.inputs.empty()) {
        os << " <-";
        for (std::size_t j : n.inputs) os << ' ' << j;
      }
      os << '\n';
    }
    return os.str();
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };

  friend struct BackwardCtx;

  Var push(std::string op, Tensor value, std::vector<std::size_t> inputs,
           BackwardFn fn, bool requires_grad, Parameter* p) {
    nodes_.push_back(Node{std::move(op), std::move(value), std::move(inputs),
                          std::move(fn), requires_grad, p});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool training_ = true;
  bool checked_ = false;
};

inline const Tensor& Var::value() const {
  if (graph_ == nullptr) throw Error("var: uninitialised handle");
  return graph_->value(*this);
}

inline const Tensor& BackwardCtx::in(std::size_t i) const {
  return graph.nodes_[inputs[i]].value;
}

namespace detail {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

inline CMatMap cmat(const Tensor& t) {
  return CMatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                 static_cast<Eigen::Index>(t.cols()));
}

inline MatMap mat(Tensor& t) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

inline Graph& graph_of(std::string_view op, std::initializer_list<Var> vars) {
  Graph* g = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw Error(std::string(op) + ": uninitialised input");
    if (g != nullptr && v.graph() != g) {
      throw Error(std::string(op) + ": inputs from different graphs");
    }
    g = v.graph();
  }
  return *g;
}

[[noreturn]] inline void shape_fail(std::string_view op, const Shape& a,
                                    const Shape& b) {
  throw Error(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
              shape_str(b));
}

enum class Broadcast { kSame, kRow, kCol, kScalar };

inline Broadcast broadcast_kind(std::string_view op, const Tensor& a,
                                const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.size() == 1) return Broadcast::kScalar;
  if (a.rank() <= 2 && b.rank() <= 2) {
    if (b.size() == a.cols() && (b.rank() == 1 || b.rows() == 1)) {
      return Broadcast::kRow;
    }
    if (a.rank() == 2 && b.rank() == 2 && b.cols() == 1 &&
        b.rows() == a.rows()) {
      return Broadcast::kCol;
    }
  }
  shape_fail(op, a.shape(), b.shape());
}

inline std::size_t bindex(Broadcast kind, std::size_t i, std::size_t cols) {
  switch (kind) {
    case Broadcast::kSame: return i;
    case Broadcast::kRow: return i % cols;
    case Broadcast::kCol: return i / cols;
    case Broadcast::kScalar: return 0;
  }
  return 0;
}

template <typename Fwd, typename Bwd>
Var unary(std::string op, Var x, Fwd fwd, Bwd dfdx) {
  Graph& g = graph_of(op, {x});
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return g.make(std::move(op), std::move(out), {x},
                [dfdx](const BackwardCtx& c) {
                  Tensor* gx = c.grad_in[0];
                  if (!gx) return;
                  const Tensor& xin = c.in(0);
                  for (std::size_t i = 0; i < xin.size(); ++i) {
                    (*gx)[i] += c.grad_out[i] * dfdx(xin[i], c.out[i]);
                  }
                });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

/// Matrix product. A rank-1 left operand is treated as a single row and the
/// result is rank-1 as well.
inline Var matmul(Var a, Var b) {
  Graph& g = detail::graph_of("matmul", {a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() > 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    detail::shape_fail("matmul", av.shape(), bv.shape());
  }
  Shape out_shape = av.rank() == 2 ? Shape{av.rows(), bv.cols()}
                                   : Shape{bv.cols()};
  Tensor out(out_shape);
  detail::mat(out).noalias() = detail::cmat(av) * detail::cmat(bv);
  return g.make("matmul", std::move(out), {a, b}, [](const BackwardCtx& c) {
    auto gout = detail::cmat(c.grad_out);
    if (c.grad_in[0]) {
      detail::mat(*c.grad_in[0]).noalias() +=
          gout * detail::cmat(c.in(1)).transpose();
    }
    if (c.grad_in[1]) {
      detail::mat(*c.grad_in[1]).noalias() +=
          detail::cmat(c.in(0)).transpose() * gout;
    }
  });
}

/// Elementwise a + b; b may broadcast as a row over the trailing axis, as a
/// column ([rows x 1]) or as a scalar.
inline Var add(Var a, Var b) {
  Graph& g = detail::graph_of("add", {a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const auto kind = detail::broadcast_kind("add", av, bv);
  const std::size_t cols = av.rank() <= 2 ? av.cols() : 1;
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = av[i] + bv[detail::bindex(kind, i, cols)];
  }
  return g.make("add", std::move(out), {a, b}, [kind, cols](const BackwardCtx& c) {
    if (c.grad_in[0]) *c.grad_in[0] += c.grad_out;
    if (Tensor* gb = c.grad_in[1]) {
      for (std::size_t i = 0; i < c.grad_out.size(); ++i) {
        (*gb)[detail::bindex(kind, i, cols)] += c.grad_out[i];
      }
    }
  });
}

inline Var sub(Var a, Var b) {
  Graph& g = detail::graph_of("sub", {a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const auto kind = detail::broadcast_kind("sub", av, bv);
  const std::size_t cols = av.rank() <= 2 ? av.cols() : 1;
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = av[i] - bv[detail::bindex(kind, i, cols)];
  }
  return g.make("sub", std::move(out), {a, b}, [kind, cols](const BackwardCtx& c) {
    if (c.grad_in[0]) *c.grad_in[0] += c.grad_out;
    if (Tensor* gb = c.grad_in[1]) {
      for (std::size_t i = 0; i < c.grad_out.size(); ++i) {
        (*gb)[detail::bindex(kind, i, cols)] -= c.grad_out[i];
      }
    }
  });
}

/// Elementwise product with the same broadcasting rules as add().
inline Var mul(Var a, Var b) {
  Graph& g = detail::graph_of("mul", {a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const auto kind = detail::broadcast_kind("mul", av, bv);
  const std::size_t cols = av.rank() <= 2 ? av.cols() : 1;
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = av[i] * bv[detail::bindex(kind, i, cols)];
  }
  return g.make("mul", std::move(out), {a, b}, [kind, cols](const BackwardCtx& c) {
    const Tensor& ain = c.in(0);
    const Tensor& bin = c.in(1);
    if (Tensor* ga = c.grad_in[0]) {
      for (std::size_t i = 0; i < ain.size(); ++i) {
        (*ga)[i] += c.grad_out[i] * bin[detail::bindex(kind, i, cols)];
      }
    }
    if (Tensor* gb = c.grad_in[1]) {
      for (std::size_t i = 0; i < ain.size(); ++i) {
        (*gb)[detail::bindex(kind, i, cols)] += c.grad_out[i] * ain[i];
      }
    }
  });
}

inline Var scale(Var x, double s) {
  return detail::unary(
      "scale", x, [s](double v) { return s * v; },
      [s](double, double) { return s; });
}

inline Var relu(Var x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(Var x) {
  return detail::unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var x) {
  return detail::unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

/// 1 - x, elementwise.
inline Var one_minus(Var x) {
  return detail::unary(
      "one_minus", x, [](double v) { return 1.0 - v; },
      [](double, double) { return -1.0; });
}

namespace detail {

// Visits independent softmax/mean slices: (offset, stride, count).
template <typename F>
void for_each_slice(std::string_view op, const Tensor& x, int axis, F f) {
  if (x.rank() == 0 || x.rank() > 2) {
    throw Error(std::string(op) + ": expects rank 1 or 2, got " +
                shape_str(x.shape()));
  }
  if (x.rank() == 1) {
    if (axis != 0 && axis != -1) throw Error(std::string(op) + ": bad axis");
    if (x.size() == 0) throw Error(std::string(op) + ": empty axis");
    f(0, 1, x.size());
    return;
  }
  const std::size_t r = x.rows();
  const std::size_t cdim = x.cols();
  if (axis == 1 || axis == -1) {
    if (cdim == 0) throw Error(std::string(op) + ": empty axis");
    for (std::size_t i = 0; i < r; ++i) f(i * cdim, 1, cdim);
  } else if (axis == 0) {
    if (r == 0) throw Error(std::string(op) + ": empty axis");
    for (std::size_t j = 0; j < cdim; ++j) f(j, cdim, r);
  } else {
    throw Error(std::string(op) + ": bad axis " + std::to_string(axis));
  }
}

inline void softmax_backward(const BackwardCtx& c, Tensor& gx, int axis) {
  for_each_slice("softmax", c.out, axis,
                 [&](std::size_t off, std::size_t stride, std::size_t n) {
                   double dot = 0.0;
                   for (std::size_t k = 0; k < n; ++k) {
                     const std::size_t i = off + k * stride;
                     dot += c.grad_out[i] * c.out[i];
                   }
                   for (std::size_t k = 0; k < n; ++k) {
                     const std::size_t i = off + k * stride;
                     gx[i] += c.out[i] * (c.grad_out[i] - dot);
                   }
                 });
}

}  // namespace detail

/// Softmax along `axis` (-1 means the last axis).
inline Var softmax(Var x, int axis = -1) {
  Graph& g = detail::graph_of("softmax", {x});
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  detail::for_each_slice("softmax", xv, axis,
                         [&](std::size_t off, std::size_t stride, std::size_t n) {
                           double mx = xv[off];
                           for (std::size_t k = 1; k < n; ++k) {
                             mx = std::max(mx, xv[off + k * stride]);
                           }
                           double z = 0.0;
                           for (std::size_t k = 0; k < n; ++k) {
                             const std::size_t i = off + k * stride;
                             out[i] = std::exp(xv[i] - mx);
                             z += out[i];
                           }
                           for (std::size_t k = 0; k < n; ++k) {
                             out[off + k * stride] /= z;
                           }
                         });
  return g.make("softmax", std::move(out), {x}, [axis](const BackwardCtx& c) {
    if (c.grad_in[0]) detail::softmax_backward(c, *c.grad_in[0], axis);
  });
}

/// Row-wise softmax of a [rows x cols] matrix restricted to entries where
/// `mask` is non-zero; masked entries get probability exactly 0.
inline Var masked_softmax(Var x, const Tensor& mask) {
  Graph& g = detail::graph_of("masked_softmax", {x});
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || mask.shape() != xv.shape()) {
    detail::shape_fail("masked_softmax", xv.shape(), mask.shape());
  }
  const std::size_t r = xv.rows();
  const std::size_t n = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      if (mask[i * n + k] != 0.0) mx = std::max(mx, xv[i * n + k]);
    }
    if (!std::isfinite(mx)) throw Error("masked_softmax: row with empty mask");
    double z = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t j = i * n + k;
      out[j] = mask[j] != 0.0 ? std::exp(xv[j] - mx) : 0.0;
      z += out[j];
    }
    for (std::size_t k = 0; k < n; ++k) out[i * n + k] /= z;
  }
  return g.make("masked_softmax", std::move(out), {x}, [](const BackwardCtx& c) {
    if (c.grad_in[0]) detail::softmax_backward(c, *c.grad_in[0], 1);
  });
}

/// Mean along an axis (numpy semantics without keepdims).
inline Var mean(Var x, int axis) {
  Graph& g = detail::graph_of("mean", {x});
  const Tensor& xv = x.value();
  Shape out_shape;
  if (xv.rank() == 2) {
    out_shape = (axis == 0) ? Shape{xv.cols()} : Shape{xv.rows()};
  }
  Tensor out(out_shape);
  std::size_t slot = 0;
  detail::for_each_slice("mean", xv, axis,
                         [&](std::size_t off, std::size_t stride, std::size_t n) {
                           double s = 0.0;
                           for (std::size_t k = 0; k < n; ++k) s += xv[off + k * stride];
                           out[slot++] = s / static_cast<double>(n);
                         });
  return g.make("mean", std::move(out), {x}, [axis](const BackwardCtx& c) {
    Tensor* gx = c.grad_in[0];
    if (!gx) return;
    std::size_t slot = 0;
    detail::for_each_slice("mean", c.in(0), axis,
                           [&](std::size_t off, std::size_t stride, std::size_t n) {
                             const double gv = c.grad_out[slot++] / static_cast<double>(n);
                             for (std::size_t k = 0; k < n; ++k) (*gx)[off + k * stride] += gv;
                           });
  });
}

/// Mean over all elements, returning a scalar.
inline Var mean(Var x) {
  Graph& g = detail::graph_of("mean", {x});
  const Tensor& xv = x.value();
  if (xv.size() == 0) throw Error("mean: empty tensor");
  double s = 0.0;
  for (double v : xv.data()) s += v;
  return g.make("mean_all", Tensor::scalar(s / static_cast<double>(xv.size())),
                {x}, [](const BackwardCtx& c) {
                  Tensor* gx = c.grad_in[0];
                  if (!gx) return;
                  const double gv = c.grad_out[0] / static_cast<double>(gx->size());
                  for (double& v : gx->data()) v += gv;
                });
}

inline Var sum(Var x) {
  Graph& g = detail::graph_of("sum", {x});
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return g.make("sum", Tensor::scalar(s), {x}, [](const BackwardCtx& c) {
    Tensor* gx = c.grad_in[0];
    if (!gx) return;
    for (double& v : gx->data()) v += c.grad_out[0];
  });
}

/// Max over the time (row) axis. With groups > 1 the rows are split into
/// `groups` consecutive blocks of equal length and each block is pooled
/// separately, giving [groups x channels]; otherwise the result is [channels].
/// Ties route the gradient to the earliest row.
inline Var max_over_time(Var x, std::size_t groups = 1) {
  Graph& g = detail::graph_of("max_over_time", {x});
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || groups == 0 || xv.rows() % groups != 0 ||
      xv.rows() == 0) {
    throw Error("max_over_time: cannot pool " + shape_str(xv.shape()) +
                " into " + std::to_string(groups) + " groups");
  }
  const std::size_t steps = xv.rows() / groups;
  const std::size_t ch = xv.cols();
  Tensor out(groups == 1 ? Shape{ch} : Shape{groups, ch});
  std::vector<std::size_t> argmax(groups * ch);
  for (std::size_t b = 0; b < groups; ++b) {
    for (std::size_t j = 0; j < ch; ++j) {
      std::size_t best = b * steps;
      for (std::size_t t = 1; t < steps; ++t) {
        const std::size_t r = b * steps + t;
        if (xv[r * ch + j] > xv[best * ch + j]) best = r;
      }
      argmax[b * ch + j] = best * ch + j;
      out[b * ch + j] = xv[best * ch + j];
    }
  }
  return g.make("max_over_time", std::move(out), {x},
                [argmax = std::move(argmax)](const BackwardCtx& c) {
                  Tensor* gx = c.grad_in[0];
                  if (!gx) return;
                  for (std::size_t k = 0; k < argmax.size(); ++k) {
                    (*gx)[argmax[k]] += c.grad_out[k];
                  }
                });
}

/// Concatenation of rank-1 or rank-2 tensors along `axis`.
inline Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw Error("concat: no inputs");
  Graph& g = detail::graph_of("concat", {xs.front()});
  const Tensor& first = xs.front().value();
  const std::size_t rank = first.rank();
  if (rank == 0 || rank > 2 || axis < 0 || static_cast<std::size_t>(axis) >= rank) {
    throw Error("concat: bad axis " + std::to_string(axis) + " for " +
                shape_str(first.shape()));
  }
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const Var& v : xs) {
    const Tensor& t = v.value();
    if (v.graph() != &g) throw Error("concat: inputs from different graphs");
    if (t.rank() != rank || (rank == 2 && t.shape()[1 - axis] != first.shape()[1 - axis])) {
      detail::shape_fail("concat", first.shape(), t.shape());
    }
    extents.push_back(t.shape()[axis]);
    total += t.shape()[axis];
  }
  Shape out_shape = first.shape();
  out_shape[axis] = total;
  Tensor out(out_shape);
  const std::size_t rows = rank == 2 ? out_shape[0] : 1;
  const std::size_t cols = rank == 2 ? out_shape[1] : out_shape[0];
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Tensor& t = xs[k].value();
    if (rank == 2 && axis == 0) {
      std::copy(t.data().begin(), t.data().end(), out.data().begin() + offset * cols);
    } else {
      const std::size_t tc = extents[k];
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(t.data().begin() + r * tc, tc,
                    out.data().begin() + r * cols + offset);
      }
    }
    offset += extents[k];
  }
  return g.make("concat", std::move(out), xs,
                [extents, axis, rank, rows, cols](const BackwardCtx& c) {
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < extents.size(); ++k) {
                    if (Tensor* gx = c.grad_in[k]) {
                      if (rank == 2 && axis == 0) {
                        for (std::size_t i = 0; i < gx->size(); ++i) {
                          (*gx)[i] += c.grad_out[off * cols + i];
                        }
                      } else {
                        const std::size_t tc = extents[k];
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t j = 0; j < tc; ++j) {
                            (*gx)[r * tc + j] += c.grad_out[r * cols + off + j];
                          }
                        }
                      }
                    }
                    off += extents[k];
                  }
                });
}

/// Inverted dropout: kept activations are scaled by 1/(1-p). Identity when the
/// graph is in evaluation mode or p == 0.
inline Var dropout(Var x, double p, Rng& rng) {
  Graph& g = detail::graph_of("dropout", {x});
  if (p < 0.0 || p >= 1.0) throw Error("dropout: rate must lie in [0, 1)");
  if (!g.training() || p == 0.0) return x;
  const Tensor& xv = x.value();
  Tensor mask(xv.shape());
  const double keep_scale = 1.0 / (1.0 - p);
  for (double& m : mask.data()) m = uniform(rng, 0.0, 1.0) >= p ? keep_scale : 0.0;
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * mask[i];
  return g.make("dropout", std::move(out), {x},
                [mask = std::move(mask)](const BackwardCtx& c) {
                  Tensor* gx = c.grad_in[0];
                  if (!gx) return;
                  for (std::size_t i = 0; i < mask.size(); ++i) {
                    (*gx)[i] += c.grad_out[i] * mask[i];
                  }
                });
}

/// Selects rows of a matrix (repeats allowed); backward scatter-adds.
inline Var gather_rows(Var x, std::vector<std::size_t> indices) {
  Graph& g = detail::graph_of("gather_rows", {x});
  const Tensor& xv = x.value();
  if (xv.rank() != 2) {
    throw Error("gather_rows: expects a matrix, got " + shape_str(xv.shape()));
  }
  const std::size_t c = xv.cols();
  Tensor out(Shape{indices.size(), c});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= xv.rows()) {
      throw Error("gather_rows: row " + std::to_string(indices[k]) +
                  " out of range for " + shape_str(xv.shape()));
    }
    std::copy_n(xv.data().begin() + indices[k] * c, c, out.data().begin() + k * c);
  }
  return g.make("gather_rows", std::move(out), {x},
                [indices = std::move(indices), c](const BackwardCtx& ctx) {
                  Tensor* gx = ctx.grad_in[0];
                  if (!gx) return;
                  for (std::size_t k = 0; k < indices.size(); ++k) {
                    for (std::size_t j = 0; j < c; ++j) {
                      (*gx)[indices[k] * c + j] += ctx.grad_out[k * c + j];
                    }
                  }
                });
}

inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  if (begin > end || end > x.value().rows()) {
    throw Error("slice_rows: range [" + std::to_string(begin) + ", " +
                std::to_string(end) + ") outside " + shape_str(x.shape()));
  }
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(x, std::move(idx));
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  Graph& g = detail::graph_of("slice_cols", {x});
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || begin > end || end > xv.cols()) {
    throw Error("slice_cols: range [" + std::to_string(begin) + ", " +
                std::to_string(end) + ") outside " + shape_str(xv.shape()));
  }
  const std::size_t r = xv.rows();
  const std::size_t c = xv.cols();
  const std::size_t w = end - begin;
  Tensor out(Shape{r, w});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(xv.data().begin() + i * c + begin, w, out.data().begin() + i * w);
  }
  return g.make("slice_cols", std::move(out), {x},
                [begin, c, w, r](const BackwardCtx& ctx) {
                  Tensor* gx = ctx.grad_in[0];
                  if (!gx) return;
                  for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < w; ++j) {
                      (*gx)[i * c + begin + j] += ctx.grad_out[i * w + j];
                    }
                  }
                });
}

inline Var transpose(Var x) {
  Graph& g = detail::graph_of("transpose", {x});
  const Tensor& xv = x.value();
  if (xv.rank() != 2) {
    throw Error("transpose: expects a matrix, got " + shape_str(xv.shape()));
  }
  Tensor out(Shape{xv.cols(), xv.rows()});
  detail::mat(out) = detail::cmat(xv).transpose();
  return g.make("transpose", std::move(out), {x}, [](const BackwardCtx& c) {
    if (c.grad_in[0]) {
      detail::mat(*c.grad_in[0]) += detail::cmat(c.grad_out).transpose();
    }
  });
}

inline Var reshape(Var x, Shape shape) {
  Graph& g = detail::graph_of("reshape", {x});
  Tensor out = x.value().reshaped(std::move(shape));
  return g.make("reshape", std::move(out), {x}, [](const BackwardCtx& c) {
    Tensor* gx = c.grad_in[0];
    if (!gx) return;
    for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += c.grad_out[i];
  });
}

/// Copy of the value with no path back to x.
inline Var detach(Var x) {
  Graph& g = detail::graph_of("detach", {x});
  return g.constant(x.value(), "detach");
}

// ---------------------------------------------------------------------------
// Gradient reversal and losses
// ---------------------------------------------------------------------------

struct GrlConfig {
  double lambda = 1.0;
};

/// Identity forward; backward multiplies the upstream gradient by -lambda.
inline Var grl(Var x, GrlConfig cfg) {
  Graph& g = detail::graph_of("grl", {x});
  if (!(cfg.lambda >= 0.0)) throw Error("grl: lambda must be >= 0");
  const double factor = -cfg.lambda;
  return g.make("grl", x.value(), {x}, [factor](const BackwardCtx& c) {
    Tensor* gx = c.grad_in[0];
    if (!gx) return;
    for (std::size_t i = 0; i < gx->size(); ++i) {
      (*gx)[i] += factor * c.grad_out[i];
    }
  });
}

/// Mean over the batch of -log softmax(logits)[label]. Logits are
/// [batch x classes] or a single rank-1 row.
inline Var cross_entropy(Var logits, std::span<const int> labels) {
  Graph& g = detail::graph_of("cross_entropy", {logits});
  const Tensor& lv = logits.value();
  if (lv.rank() == 0 || lv.rank() > 2) {
    throw Error("cross_entropy: logits must be rank 1 or 2, got " +
                shape_str(lv.shape()));
  }
  const std::size_t batch = lv.rows();
  const std::size_t classes = lv.cols();
  if (labels.size() != batch) {
    throw Error("cross_entropy: " + std::to_string(labels.size()) +
                " labels for batch of " + std::to_string(batch));
  }
  if (batch == 0 || classes == 0) throw Error("cross_entropy: empty logits");
  Tensor probs(Shape{batch, classes});
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw Error("cross_entropy: label " + std::to_string(y) +
                  " outside [0, " + std::to_string(classes) + ")");
    }
    const double* row = lv.data().data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t k = 0; k < classes; ++k) z += std::exp(row[k] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t k = 0; k < classes; ++k) {
      probs[b * classes + k] = std::exp(row[k] - log_z);
    }
    loss += log_z - row[y];
  }
  loss /= static_cast<double>(batch);
  std::vector<int> ys(labels.begin(), labels.end());
  return g.make("cross_entropy", Tensor::scalar(loss), {logits},
                [probs = std::move(probs), ys = std::move(ys), batch,
                 classes](const BackwardCtx& c) {
                  Tensor* gl = c.grad_in[0];
                  if (!gl) return;
                  const double s = c.grad_out[0] / static_cast<double>(batch);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t k = 0; k < classes; ++k) {
                      const double onehot = static_cast<int>(k) == ys[b] ? 1.0 : 0.0;
                      (*gl)[b * classes + k] += s * (probs[b * classes + k] - onehot);
                    }
                  }
                });
}

inline Var cross_entropy(Var logits, int label) {
  const int labels[1] = {label};
  return cross_entropy(logits, std::span<const int>(labels, 1));
}

/// Empirical Kantorovich-Rubinstein estimate mean(src) - mean(tgt). The critic
/// maximises this quantity.
inline Var wasserstein_loss(Var scores_src, Var scores_tgt) {
  if (scores_src.value().size() == 0 || scores_tgt.value().size() == 0) {
    throw Error("wasserstein_loss: empty batch on " +
                std::string(scores_src.value().size() == 0 ? "source" : "target") +
                " side");
  }
  return sub(mean(scores_src), mean(scores_tgt));
}

}  // namespace dann
