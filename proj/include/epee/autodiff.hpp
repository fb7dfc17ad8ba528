#pragma once

// Tape-based reverse-mode differentiation over Matrix values.
//
// A Graph records one forward pass. Nodes are appended in evaluation order,
// so walking the tape backwards visits every node after all of its
// consumers. Parameters enter the tape by reference: their values are read
// in place and backward() accumulates into Parameter::grad.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <iostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "epee/tensor.hpp"

namespace epee {

/// A trainable matrix and its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(0.0); }
};

/// Probability floor applied inside cross_entropy.
inline constexpr double kLogFloor = 1e-12;

class Graph {
 public:
  /// Handle to a node on the tape.
  struct Var {
    std::size_t id;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Matrix value) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Trainable leaf: gradients flow into p.grad on backward().
  Var param(Parameter& p) {
    Node n;
    n.op = Op::Leaf;
    n.external = &p.value;
    n.sink = &p.grad;
    return push(std::move(n));
  }

  /// Read-only parameter leaf (inference).
  Var param(const Parameter& p) {
    Node n;
    n.op = Op::Leaf;
    n.external = &p.value;
    return push(std::move(n));
  }

  const Matrix& value(Var v) const { return value_of(nodes_[v.id]); }

  /// Gradient of the last backward() root with respect to v.
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }

  double scalar(Var v) const {
    const Matrix& m = value(v);
    if (m.rows() != 1 || m.cols() != 1) throw DimensionError("scalar: node is " + m.shape());
    return m(0, 0);
  }

  Var matmul(Var a, Var b) { return push_op(Op::MatMul, epee::matmul(value(a), value(b)), {a, b}); }

  Var transpose(Var a) { return push_op(Op::Transpose, epee::transpose(value(a)), {a}); }

  Var add(Var a, Var b) { return push_op(Op::Add, epee::add(value(a), value(b)), {a, b}); }

  Var mul(Var a, Var b) { return push_op(Op::Mul, hadamard(value(a), value(b)), {a, b}); }

  Var scale(Var a, double s) {
    Var out = push_op(Op::Scale, epee::scale(value(a), s), {a});
    nodes_[out.id].scalar = s;
    return out;
  }

  /// x (n x d) plus a 1 x d bias broadcast over rows.
  Var add_bias(Var x, Var bias) {
    return push_op(Op::AddBias, add_row_bias(value(x), value(bias)), {x, bias});
  }

  Var relu(Var x) { return push_op(Op::Relu, epee::relu(value(x)), {x}); }

  Var softmax_rows(Var x) { return push_op(Op::Softmax, epee::softmax_rows(value(x)), {x}); }

  /// Per-row normalisation to zero mean and unit variance, then gain and shift.
  Var layer_norm(Var x, Var gain, Var shift, double eps = 1e-5) {
    const Matrix& xv = value(x);
    const Matrix& g = value(gain);
    const Matrix& b = value(shift);
    if (g.rows() != 1 || g.cols() != xv.cols() || !g.same_shape(b)) {
      throw DimensionError("layer_norm: shape mismatch " + xv.shape() + " with gain " + g.shape() +
                           " and shift " + b.shape());
    }
    const std::size_t d = xv.cols();
    Matrix normed(xv.rows(), d);
    Matrix inv_std(xv.rows(), 1);
    Matrix out(xv.rows(), d);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      const auto in = xv.row(r);
      double mean = 0.0;
      for (double v : in) mean += v;
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (double v : in) var += (v - mean) * (v - mean);
      var /= static_cast<double>(d);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std(r, 0) = is;
      for (std::size_t c = 0; c < d; ++c) {
        normed(r, c) = (in[c] - mean) * is;
        out(r, c) = normed(r, c) * g(0, c) + b(0, c);
      }
    }
    Var res = push_op(Op::LayerNorm, std::move(out), {x, gain, shift});
    nodes_[res.id].cache = std::move(normed);
    nodes_[res.id].cache2 = std::move(inv_std);
    return res;
  }

  /// Rows of `table` selected by `indices`, in order.
  Var gather_rows(Var table, std::span<const std::size_t> indices) {
    const Matrix& t = value(table);
    Matrix out(indices.size(), t.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= t.rows()) {
        throw DimensionError("gather_rows: index " + std::to_string(indices[i]) + " outside table " +
                             t.shape());
      }
      const auto src = t.row(indices[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    Var res = push_op(Op::Gather, std::move(out), {table});
    nodes_[res.id].indices.assign(indices.begin(), indices.end());
    return res;
  }

  /// Columns [begin, end) of x.
  Var slice_cols(Var x, std::size_t begin, std::size_t end) {
    const Matrix& xv = value(x);
    if (begin > end || end > xv.cols()) {
      throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                           ") outside " + xv.shape());
    }
    Matrix out(xv.rows(), end - begin);
    for (std::size_t r = 0; r < xv.rows(); ++r)
      for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = xv(r, c);
    Var res = push_op(Op::SliceCols, std::move(out), {x});
    nodes_[res.id].offset = begin;
    return res;
  }

  /// Side-by-side concatenation of matrices with equal row counts.
  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t rows = value(parts[0]).rows();
    std::size_t cols = 0;
    for (Var p : parts) {
      if (value(p).rows() != rows) {
        throw DimensionError("concat_cols: shape mismatch " + value(parts[0]).shape() + " vs " +
                             value(p).shape());
      }
      cols += value(p).cols();
    }
    Matrix out(rows, cols);
    std::size_t at = 0;
    for (Var p : parts) {
      const Matrix& pv = value(p);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < pv.cols(); ++c) out(r, at + c) = pv(r, c);
      at += pv.cols();
    }
    Node n;
    n.op = Op::ConcatCols;
    n.value = std::move(out);
    for (Var p : parts) n.parents.push_back(p.id);
    return push(std::move(n));
  }

  /// Row r of x as a 1 x cols matrix.
  Var row(Var x, std::size_t r) {
    const Matrix& xv = value(x);
    if (r >= xv.rows()) throw DimensionError("row: index " + std::to_string(r) + " outside " + xv.shape());
    Var res = push_op(Op::Row, Matrix::row_vector(xv.row(r)), {x});
    nodes_[res.id].offset = r;
    return res;
  }

  /// Sum of all entries, as a 1 x 1 node.
  Var sum(Var x) {
    double total = 0.0;
    for (double v : value(x).data()) total += v;
    return push_op(Op::Sum, Matrix(1, 1, total), {x});
  }

  /// -log(p[label]) for a 1 x K probability row. Probabilities below
  /// kLogFloor are clamped; a non-positive target probability is reported.
  Var cross_entropy(Var probs, std::size_t label) {
    const Matrix& p = value(probs);
    if (p.rows() != 1) throw DimensionError("cross_entropy: expected one row, got " + p.shape());
    if (label >= p.cols()) {
      throw DimensionError("cross_entropy: label " + std::to_string(label) + " outside " + p.shape());
    }
    const double target = p(0, label);
    if (target <= 0.0) {
      std::cerr << "warning: cross_entropy target probability " << target << " clamped to " << kLogFloor
                << "\n";
    }
    Var res = push_op(Op::CrossEntropy, Matrix(1, 1, -std::log(std::max(target, kLogFloor))), {probs});
    nodes_[res.id].offset = label;
    return res;
  }

  /// Seeds d(root)/d(root) = 1 and propagates to every reachable node.
  /// Parameter gradients are accumulated, not overwritten.
  void backward(Var root) {
    if (value(root).size() != 1) throw DimensionError("backward: root must be 1x1, got " + value(root).shape());
    for (Node& n : nodes_) {
      const Matrix& v = value_of(n);
      n.grad = Matrix(v.rows(), v.cols());
    }
    nodes_[root.id].grad(0, 0) = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) propagate(i);
    for (Node& n : nodes_) {
      if (n.sink == nullptr) continue;
      auto dst = n.sink->data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Mul,
    Scale,
    AddBias,
    Relu,
    Softmax,
    LayerNorm,
    Gather,
    SliceCols,
    ConcatCols,
    Row,
    Sum,
    CrossEntropy,
  };

  struct Node {
    Op op = Op::Leaf;
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> parents;
    const Matrix* external = nullptr;
    Matrix* sink = nullptr;
    double scalar = 0.0;
    std::size_t offset = 0;
    std::vector<std::size_t> indices;
    Matrix cache;
    Matrix cache2;
  };

  static const Matrix& value_of(const Node& n) { return n.external != nullptr ? *n.external : n.value; }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var push_op(Op op, Matrix value, std::initializer_list<Var> parents) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    for (Var p : parents) n.parents.push_back(p.id);
    return push(std::move(n));
  }

  static void accumulate(Matrix& dst, const Matrix& src) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] += s[k];
  }

  void propagate(std::size_t id) {
    Node& n = nodes_[id];
    const Matrix& g = n.grad;
    const Matrix& out = value_of(n);
    auto parent = [&](std::size_t k) -> Node& { return nodes_[n.parents[k]]; };
    auto pval = [&](std::size_t k) -> const Matrix& { return value_of(parent(k)); };

    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::MatMul:
        accumulate(parent(0).grad, matmul_transposed(g, pval(1)));
        accumulate(parent(1).grad, transposed_matmul(pval(0), g));
        break;
      case Op::Transpose:
        accumulate(parent(0).grad, epee::transpose(g));
        break;
      case Op::Add:
        accumulate(parent(0).grad, g);
        accumulate(parent(1).grad, g);
        break;
      case Op::Mul:
        accumulate(parent(0).grad, hadamard(g, pval(1)));
        accumulate(parent(1).grad, hadamard(g, pval(0)));
        break;
      case Op::Scale:
        accumulate(parent(0).grad, epee::scale(g, n.scalar));
        break;
      case Op::AddBias: {
        accumulate(parent(0).grad, g);
        Matrix& bg = parent(1).grad;
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) bg(0, c) += g(r, c);
        break;
      }
      case Op::Relu: {
        // Subgradient 0 at the kink.
        Matrix& pg = parent(0).grad;
        const Matrix& x = pval(0);
        for (std::size_t k = 0; k < x.size(); ++k) {
          if (x.data()[k] > 0.0) pg.data()[k] += g.data()[k];
        }
        break;
      }
      case Op::Softmax: {
        Matrix& pg = parent(0).grad;
        for (std::size_t r = 0; r < out.rows(); ++r) {
          const auto y = out.row(r);
          const auto gr = g.row(r);
          double dot = 0.0;
          for (std::size_t c = 0; c < y.size(); ++c) dot += gr[c] * y[c];
          auto dst = pg.row(r);
          for (std::size_t c = 0; c < y.size(); ++c) dst[c] += y[c] * (gr[c] - dot);
        }
        break;
      }
      case Op::LayerNorm: {
        const Matrix& normed = n.cache;
        const Matrix& inv_std = n.cache2;
        const Matrix& gain = pval(1);
        Matrix& xg = parent(0).grad;
        Matrix& gg = parent(1).grad;
        Matrix& sg = parent(2).grad;
        const std::size_t d = normed.cols();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < normed.rows(); ++r) {
          double sum_dn = 0.0;
          double sum_dn_n = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double dn = g(r, c) * gain(0, c);
            sum_dn += dn;
            sum_dn_n += dn * normed(r, c);
            gg(0, c) += g(r, c) * normed(r, c);
            sg(0, c) += g(r, c);
          }
          for (std::size_t c = 0; c < d; ++c) {
            const double dn = g(r, c) * gain(0, c);
            xg(r, c) += inv_std(r, 0) * (dn - inv_d * sum_dn - normed(r, c) * inv_d * sum_dn_n);
          }
        }
        break;
      }
      case Op::Gather: {
        Matrix& tg = parent(0).grad;
        for (std::size_t i = 0; i < n.indices.size(); ++i) {
          auto dst = tg.row(n.indices[i]);
          const auto src = g.row(i);
          for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
        break;
      }
      case Op::SliceCols: {
        Matrix& pg = parent(0).grad;
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) pg(r, n.offset + c) += g(r, c);
        break;
      }
      case Op::ConcatCols: {
        std::size_t at = 0;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          Matrix& pg = parent(k).grad;
          for (std::size_t r = 0; r < pg.rows(); ++r)
            for (std::size_t c = 0; c < pg.cols(); ++c) pg(r, c) += g(r, at + c);
          at += pg.cols();
        }
        break;
      }
      case Op::Row: {
        auto dst = parent(0).grad.row(n.offset);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += g(0, c);
        break;
      }
      case Op::Sum:
        for (double& v : parent(0).grad.data()) v += g(0, 0);
        break;
      case Op::CrossEntropy: {
        const double target = pval(0)(0, n.offset);
        if (target >= kLogFloor) parent(0).grad(0, n.offset) += -g(0, 0) / target;
        break;
      }
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace epee
