#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "vlbm/tensor.hpp"

namespace vlbm {

enum class OpKind {
  Leaf,
  Constant,
  Matmul,
  Add,
  Sub,
  Mul,
  Concat,
  Slice,
  Sum,
  Mean,
  Square,
  Exp,
  Log,
  Sigmoid,
  Tanh,
  Softplus,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::Matmul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Square: return "square";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Tanh: return "tanh";
    case OpKind::Softplus: return "softplus";
  }
  return "?";
}

/// Handle into a Tape. Valid only for the tape that produced it.
struct Ref {
  int id = -1;
};

/// Gradients of a scalar loss w.r.t. tracked leaves, keyed by leaf id.
/// Leaves the loss does not depend on read as zero.
class GradMap {
 public:
  void set(int leaf_id, Tensor g) { grads_[leaf_id] = std::move(g); }
  bool has(int leaf_id) const { return grads_.count(leaf_id) != 0; }

  Tensor get(Ref leaf, const std::vector<int>& shape) const {
    auto it = grads_.find(leaf.id);
    if (it != grads_.end()) return it->second;
    return Tensor(shape);
  }

  const std::unordered_map<int, Tensor>& entries() const { return grads_; }

 private:
  std::unordered_map<int, Tensor> grads_;
};

/// Append-only record of a forward computation (define-by-run). Nodes only
/// reference earlier nodes, so a reverse sweep visits them in valid order.
class Tape {
 public:
  Tape() { nodes_.reserve(1024); }

  /// Tracked parameter entry point; appears in the GradMap after backward().
  Ref leaf(Tensor value) { return push(OpKind::Leaf, {-1, -1}, std::move(value)); }

  /// Untracked input (data, noise, numeric constants).
  Ref constant(Tensor value) { return push(OpKind::Constant, {-1, -1}, std::move(value)); }
  Ref constant(double v) { return constant(Tensor::scalar(v)); }

  Ref matmul(Ref a, Ref b) {
    const Tensor& x = value(a);
    const Tensor& w = value(b);
    if (x.rank() == 1 && w.rank() == 2) {
      check(x.size() == w.rows(), OpKind::Matmul, x, w);
      Tensor out({w.cols()});
      gemv_t(w, x, out);
      return push(OpKind::Matmul, {a.id, b.id}, std::move(out));
    }
    if (x.rank() == 2 && w.rank() == 2) {
      check(x.cols() == w.rows(), OpKind::Matmul, x, w);
      Tensor out({x.rows(), w.cols()});
      for (int i = 0; i < x.rows(); ++i)
        for (int k = 0; k < x.cols(); ++k) {
          double xv = x.at(i, k);
          for (int j = 0; j < w.cols(); ++j) out.at(i, j) += xv * w.at(k, j);
        }
      return push(OpKind::Matmul, {a.id, b.id}, std::move(out));
    }
    throw std::invalid_argument(std::string("matmul: unsupported ranks for shapes ") + x.shape_str() +
                                " and " + w.shape_str());
  }

  Ref add(Ref a, Ref b) { return elementwise(OpKind::Add, a, b); }
  Ref sub(Ref a, Ref b) { return elementwise(OpKind::Sub, a, b); }
  Ref mul(Ref a, Ref b) { return elementwise(OpKind::Mul, a, b); }

  Ref concat(Ref a, Ref b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    if (x.rank() != 1 || y.rank() != 1)
      throw std::invalid_argument(std::string("concat: rank-1 operands required, got ") +
                                  x.shape_str() + " and " + y.shape_str());
    Tensor out({x.size() + y.size()});
    for (int i = 0; i < x.size(); ++i) out[i] = x[i];
    for (int i = 0; i < y.size(); ++i) out[x.size() + i] = y[i];
    return push(OpKind::Concat, {a.id, b.id}, std::move(out));
  }

  /// Half-open range [begin, end) of a rank-1 tensor.
  Ref slice(Ref a, int begin, int end) {
    const Tensor& x = value(a);
    if (x.rank() != 1) throw std::invalid_argument("slice: rank-1 operand required, got " + x.shape_str());
    if (begin < 0 || end > x.size() || begin > end)
      throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                  ") out of bounds for " + x.shape_str());
    Tensor out({end - begin});
    for (int i = begin; i < end; ++i) out[i - begin] = x[i];
    Ref r = push(OpKind::Slice, {a.id, -1}, std::move(out));
    nodes_[r.id].aux0 = begin;
    return r;
  }

  Ref sum(Ref a) {
    const Tensor& x = value(a);
    double s = 0;
    for (int i = 0; i < x.size(); ++i) s += x[i];
    return push(OpKind::Sum, {a.id, -1}, Tensor::scalar(s));
  }

  Ref mean(Ref a) {
    const Tensor& x = value(a);
    if (x.size() == 0) throw std::invalid_argument("mean: empty operand");
    double s = 0;
    for (int i = 0; i < x.size(); ++i) s += x[i];
    return push(OpKind::Mean, {a.id, -1}, Tensor::scalar(s / x.size()));
  }

  Ref square(Ref a) { return unary(OpKind::Square, a, [](double v) { return v * v; }); }
  Ref exp(Ref a) { return unary(OpKind::Exp, a, [](double v) { return std::exp(v); }); }

  Ref log(Ref a) {
    const Tensor& x = value(a);
    for (int i = 0; i < x.size(); ++i)
      if (!(x[i] > 0.0))
        throw std::invalid_argument("log: operand must be strictly positive, got " + std::to_string(x[i]));
    return unary(OpKind::Log, a, [](double v) { return std::log(v); });
  }

  Ref sigmoid(Ref a) {
    return unary(OpKind::Sigmoid, a, [](double v) {
      return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    });
  }

  Ref tanh(Ref a) { return unary(OpKind::Tanh, a, [](double v) { return std::tanh(v); }); }

  Ref softplus(Ref a) {
    return unary(OpKind::Softplus, a,
                 [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); });
  }

  const Tensor& value(Ref r) const { return nodes_[r.id].value; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  /// Reverse sweep from a scalar loss node. Gradients of untracked constants
  /// are computed internally but not reported.
  GradMap backward(Ref loss) {
    if (value(loss).size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " + value(loss).shape_str());
    grads_.assign(nodes_.size(), Tensor());
    grads_[loss.id] = Tensor::scalar(1.0);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (grads_[id].size() == 0) continue;
      propagate(id, n);
    }
    GradMap out;
    for (int id = 0; id <= loss.id; ++id)
      if (nodes_[id].op == OpKind::Leaf && grads_[id].size() != 0) out.set(id, std::move(grads_[id]));
    grads_.clear();
    return out;
  }

 private:
  struct Node {
    OpKind op;
    std::array<int, 2> in;
    Tensor value;
    int aux0 = 0;  // slice begin
  };

  template <typename F>
  Ref unary(OpKind k, Ref a, F f) {
    const Tensor& x = value(a);
    Tensor out(x.shape());
    for (int i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return push(k, {a.id, -1}, std::move(out));
  }

  // Equal shapes, or one operand of size 1 broadcast over the other.
  Ref elementwise(OpKind k, Ref a, Ref b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    check(x.same_shape(y) || x.size() == 1 || y.size() == 1, k, x, y);
    const bool xb = x.size() == 1 && !x.same_shape(y);
    const bool yb = y.size() == 1 && !x.same_shape(y);
    Tensor out(xb ? y.shape() : x.shape());
    for (int i = 0; i < out.size(); ++i) {
      double xv = x[xb ? 0 : i];
      double yv = y[yb ? 0 : i];
      switch (k) {
        case OpKind::Add: out[i] = xv + yv; break;
        case OpKind::Sub: out[i] = xv - yv; break;
        case OpKind::Mul: out[i] = xv * yv; break;
        default: throw std::logic_error("elementwise: bad op");
      }
    }
    return push(k, {a.id, b.id}, std::move(out));
  }

  static void check(bool ok, OpKind k, const Tensor& a, const Tensor& b) {
    if (!ok)
      throw std::invalid_argument(std::string(op_name(k)) + ": incompatible shapes " + a.shape_str() +
                                  " and " + b.shape_str());
  }

  // y = x^T W for rank-1 x
  static void gemv_t(const Tensor& w, const Tensor& x, Tensor& out) {
    const int r = w.rows(), c = w.cols();
    const double* wd = w.data();
    for (int k = 0; k < r; ++k) {
      double xv = x[k];
      const double* row = wd + static_cast<size_t>(k) * c;
      for (int j = 0; j < c; ++j) out[j] += xv * row[j];
    }
  }

  Ref push(OpKind k, std::array<int, 2> in, Tensor value) {
    if (!value.all_finite())
      throw std::runtime_error(std::string("non-finite result in op ") + op_name(k));
    nodes_.push_back(Node{k, in, std::move(value), 0});
    return Ref{static_cast<int>(nodes_.size()) - 1};
  }

  Tensor& grad_buf(int id) {
    if (grads_[id].size() == 0) grads_[id] = Tensor(nodes_[id].value.shape());
    return grads_[id];
  }

  void propagate(int id, Node& n) {
    const Tensor& g = grads_[id];
    switch (n.op) {
      case OpKind::Leaf:
      case OpKind::Constant:
        break;
      case OpKind::Matmul: {
        const Tensor& x = nodes_[n.in[0]].value;
        const Tensor& w = nodes_[n.in[1]].value;
        Tensor& gx = grad_buf(n.in[0]);
        Tensor& gw = grad_buf(n.in[1]);
        if (x.rank() == 1) {
          // gx = W g, gw += outer(x, g)
          for (int k = 0; k < w.rows(); ++k) {
            double acc = 0;
            for (int j = 0; j < w.cols(); ++j) acc += w.at(k, j) * g[j];
            gx[k] += acc;
            double xv = x[k];
            for (int j = 0; j < w.cols(); ++j) gw.at(k, j) += xv * g[j];
          }
        } else {
          for (int i = 0; i < x.rows(); ++i)
            for (int k = 0; k < x.cols(); ++k) {
              double acc = 0;
              for (int j = 0; j < w.cols(); ++j) acc += w.at(k, j) * g.at(i, j);
              gx.at(i, k) += acc;
            }
          for (int k = 0; k < w.rows(); ++k)
            for (int i = 0; i < x.rows(); ++i) {
              double xv = x.at(i, k);
              for (int j = 0; j < w.cols(); ++j) gw.at(k, j) += xv * g.at(i, j);
            }
        }
        break;
      }
      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul: {
        const Tensor& x = nodes_[n.in[0]].value;
        const Tensor& y = nodes_[n.in[1]].value;
        Tensor& ga = grad_buf(n.in[0]);
        Tensor& gb = grad_buf(n.in[1]);
        const bool xb = ga.size() == 1 && g.size() != 1;
        const bool yb = gb.size() == 1 && g.size() != 1;
        for (int i = 0; i < g.size(); ++i) {
          double da = g[i], db = g[i];
          if (n.op == OpKind::Sub) db = -g[i];
          if (n.op == OpKind::Mul) {
            da = g[i] * y[yb ? 0 : i];
            db = g[i] * x[xb ? 0 : i];
          }
          ga[xb ? 0 : i] += da;
          gb[yb ? 0 : i] += db;
        }
        break;
      }
      case OpKind::Concat: {
        const Tensor& x = nodes_[n.in[0]].value;
        Tensor& ga = grad_buf(n.in[0]);
        Tensor& gb = grad_buf(n.in[1]);
        for (int i = 0; i < x.size(); ++i) ga[i] += g[i];
        for (int i = 0; i < gb.size(); ++i) gb[i] += g[x.size() + i];
        break;
      }
      case OpKind::Slice: {
        Tensor& ga = grad_buf(n.in[0]);
        for (int i = 0; i < g.size(); ++i) ga[n.aux0 + i] += g[i];
        break;
      }
      case OpKind::Sum: {
        Tensor& ga = grad_buf(n.in[0]);
        for (int i = 0; i < ga.size(); ++i) ga[i] += g[0];
        break;
      }
      case OpKind::Mean: {
        Tensor& ga = grad_buf(n.in[0]);
        double gm = g[0] / ga.size();
        for (int i = 0; i < ga.size(); ++i) ga[i] += gm;
        break;
      }
      case OpKind::Square: {
        const Tensor& x = nodes_[n.in[0]].value;
        Tensor& ga = grad_buf(n.in[0]);
        for (int i = 0; i < g.size(); ++i) ga[i] += 2.0 * x[i] * g[i];
        break;
      }
      case OpKind::Exp: {
        Tensor& ga = grad_buf(n.in[0]);
        for (int i = 0; i < g.size(); ++i) ga[i] += n.value[i] * g[i];
        break;
      }
      case OpKind::Log: {
        const Tensor& x = nodes_[n.in[0]].value;
        Tensor& ga = grad_buf(n.in[0]);
        for (int i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
        break;
      }
      case OpKind::Sigmoid: {
        Tensor& ga = grad_buf(n.in[0]);
        for (int i = 0; i < g.size(); ++i) ga[i] += n.value[i] * (1.0 - n.value[i]) * g[i];
        break;
      }
      case OpKind::Tanh: {
        Tensor& ga = grad_buf(n.in[0]);
        for (int i = 0; i < g.size(); ++i) ga[i] += (1.0 - n.value[i] * n.value[i]) * g[i];
        break;
      }
      case OpKind::Softplus: {
        const Tensor& x = nodes_[n.in[0]].value;
        Tensor& ga = grad_buf(n.in[0]);
        for (int i = 0; i < g.size(); ++i) {
          double s = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
          ga[i] += s * g[i];
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

}  // namespace vlbm
