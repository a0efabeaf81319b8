#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "poslab/matrix.hpp"

namespace poslab {

// Reverse-mode autodiff over the matrix primitives the encoder needs.
// Every operation records a node holding its inputs and forward value;
// backward() replays the tape in reverse, accumulating adjoints. One tape
// per training step, single-threaded.
class Tape {
 public:
  using VarId = int;

  enum class Op {
    kLeaf,
    kMatmul,      // a * b
    kMatmulNT,    // a * b^T
    kAdd,
    kSub,
    kAddRowVec,   // a + broadcast row vector b (1 x cols)
    kScale,       // a * scalar
    kHadamardConst,
    kSoftmaxRows, // masked, mask in aux
    kLayerNorm,   // a, gain, bias
    kGelu,
    kGatherRows,  // rows of a at idx
    kConcatRows,
    kSliceCols,
    kConcatCols,
    kRelScoresQ,  // S_ij = a_i . table[off_ij]
    kRelScoresK,  // S_ij = a_j . table[off_ij]
    kRelSelf,     // S_ij = |table[off_ij]|^2
    kBucketBias,  // S_ij = b[off_ij]
    kOverwriteRow0Col0,
    kCrossEntropyMean,
    kSum,
    kSumSq,
  };

  VarId leaf(const Matrix& m) {
    Node n;
    n.op = Op::kLeaf;
    n.value = m;
    return push(std::move(n));
  }

  VarId matmul(VarId a, VarId b) {
    Node n;
    n.op = Op::kMatmul;
    n.a = a;
    n.b = b;
    n.value = poslab::matmul(val(a), val(b));
    return push(std::move(n));
  }

  VarId matmul_nt(VarId a, VarId b) {
    Node n;
    n.op = Op::kMatmulNT;
    n.a = a;
    n.b = b;
    n.value = poslab::matmul_nt(val(a), val(b));
    return push(std::move(n));
  }

  VarId add(VarId a, VarId b) {
    Node n;
    n.op = Op::kAdd;
    n.a = a;
    n.b = b;
    n.value = poslab::add(val(a), val(b));
    return push(std::move(n));
  }

  VarId sub(VarId a, VarId b) {
    Node n;
    n.op = Op::kSub;
    n.a = a;
    n.b = b;
    n.value = poslab::sub(val(a), val(b));
    return push(std::move(n));
  }

  VarId add_rowvec(VarId a, VarId v) {
    const Matrix& av = val(a);
    const Matrix& vv = val(v);
    if (vv.rows != 1 || vv.cols != av.cols)
      throw std::invalid_argument("add_rowvec: vector must be 1x" + std::to_string(av.cols));
    Node n;
    n.op = Op::kAddRowVec;
    n.a = a;
    n.b = v;
    n.value = av;
    for (int i = 0; i < av.rows; ++i)
      for (int j = 0; j < av.cols; ++j) n.value.at(i, j) += vv.at(0, j);
    return push(std::move(n));
  }

  VarId scale(VarId a, double s) {
    Node n;
    n.op = Op::kScale;
    n.a = a;
    n.scalar = s;
    n.value = poslab::scale(val(a), s);
    return push(std::move(n));
  }

  VarId hadamard_const(VarId a, Matrix m) {
    Node n;
    n.op = Op::kHadamardConst;
    n.a = a;
    n.value = poslab::hadamard(val(a), m);
    n.aux = std::move(m);
    return push(std::move(n));
  }

  VarId softmax_rows(VarId a, Matrix mask) {
    Node n;
    n.op = Op::kSoftmaxRows;
    n.a = a;
    n.value = poslab::softmax_rows(val(a), mask);
    n.aux = std::move(mask);
    return push(std::move(n));
  }

  VarId softmax_rows(VarId a) {
    const Matrix& av = val(a);
    return softmax_rows(a, Matrix::filled(av.rows, av.cols, 1.0));
  }

  VarId layer_norm(VarId a, VarId gain, VarId bias, double eps) {
    const Matrix& x = val(a);
    Node n;
    n.op = Op::kLayerNorm;
    n.a = a;
    n.b = gain;
    n.c = bias;
    n.scalar = eps;
    n.value = poslab::layer_norm(x, val(gain), val(bias), eps);
    // stash per-row mean and inverse stddev for backward
    n.aux = Matrix(x.rows, 2);
    for (int i = 0; i < x.rows; ++i) {
      double mu = 0.0;
      for (int j = 0; j < x.cols; ++j) mu += x.at(i, j);
      mu /= x.cols;
      double var = 0.0;
      for (int j = 0; j < x.cols; ++j) {
        double d = x.at(i, j) - mu;
        var += d * d;
      }
      var /= x.cols;
      n.aux.at(i, 0) = mu;
      n.aux.at(i, 1) = 1.0 / std::sqrt(var + eps);
    }
    return push(std::move(n));
  }

  VarId gelu(VarId a) {
    Node n;
    n.op = Op::kGelu;
    n.a = a;
    n.value = val(a);
    for (double& v : n.value.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    return push(std::move(n));
  }

  VarId gather_rows(VarId table, std::vector<int> idx) {
    const Matrix& t = val(table);
    Node n;
    n.op = Op::kGatherRows;
    n.a = table;
    n.value = Matrix(static_cast<int>(idx.size()), t.cols);
    for (size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= t.rows)
        throw std::out_of_range("gather_rows: index " + std::to_string(idx[i]) +
                                " out of range for " + t.shape_str());
      for (int j = 0; j < t.cols; ++j)
        n.value.at(static_cast<int>(i), j) = t.at(idx[i], j);
    }
    n.rows_idx = std::move(idx);
    return push(std::move(n));
  }

  VarId concat_rows(std::vector<VarId> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    int cols = val(parts[0]).cols;
    int rows = 0;
    for (VarId p : parts) {
      if (val(p).cols != cols) throw std::invalid_argument("concat_rows: column mismatch");
      rows += val(p).rows;
    }
    Node n;
    n.op = Op::kConcatRows;
    n.value = Matrix(rows, cols);
    int at = 0;
    for (VarId p : parts) {
      const Matrix& m = val(p);
      std::copy(m.data.begin(), m.data.end(),
                n.value.data.begin() + static_cast<size_t>(at) * cols);
      at += m.rows;
    }
    n.multi = std::move(parts);
    return push(std::move(n));
  }

  VarId slice_cols(VarId a, int lo, int hi) {
    const Matrix& m = val(a);
    if (lo < 0 || hi > m.cols || lo >= hi)
      throw std::out_of_range("slice_cols: bad range");
    Node n;
    n.op = Op::kSliceCols;
    n.a = a;
    n.lo = lo;
    n.hi = hi;
    n.value = Matrix(m.rows, hi - lo);
    for (int i = 0; i < m.rows; ++i)
      for (int j = lo; j < hi; ++j) n.value.at(i, j - lo) = m.at(i, j);
    return push(std::move(n));
  }

  VarId concat_cols(std::vector<VarId> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    int rows = val(parts[0]).rows;
    int cols = 0;
    for (VarId p : parts) {
      if (val(p).rows != rows) throw std::invalid_argument("concat_cols: row mismatch");
      cols += val(p).cols;
    }
    Node n;
    n.op = Op::kConcatCols;
    n.value = Matrix(rows, cols);
    int at = 0;
    for (VarId p : parts) {
      const Matrix& m = val(p);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < m.cols; ++j) n.value.at(i, at + j) = m.at(i, j);
      at += m.cols;
    }
    n.multi = std::move(parts);
    return push(std::move(n));
  }

  // S_ij = dot(a_i, table[off_ij]) — query-side relative attention term.
  VarId rel_scores_q(VarId a, VarId table, IntMat off) {
    const Matrix& x = val(a);
    const Matrix& t = val(table);
    check_offsets(off, x.rows, t.rows);
    Node n;
    n.op = Op::kRelScoresQ;
    n.a = a;
    n.b = table;
    n.value = Matrix(off.rows, off.cols);
    for (int i = 0; i < off.rows; ++i)
      for (int j = 0; j < off.cols; ++j) {
        double s = 0.0;
        const double* xi = &x.data[static_cast<size_t>(i) * x.cols];
        const double* tr = &t.data[static_cast<size_t>(off.at(i, j)) * t.cols];
        for (int d = 0; d < x.cols; ++d) s += xi[d] * tr[d];
        n.value.at(i, j) = s;
      }
    n.off = std::move(off);
    return push(std::move(n));
  }

  // S_ij = dot(a_j, table[off_ij]) — key-side relative attention term.
  VarId rel_scores_k(VarId a, VarId table, IntMat off) {
    const Matrix& x = val(a);
    const Matrix& t = val(table);
    check_offsets(off, x.rows, t.rows);
    Node n;
    n.op = Op::kRelScoresK;
    n.a = a;
    n.b = table;
    n.value = Matrix(off.rows, off.cols);
    for (int i = 0; i < off.rows; ++i)
      for (int j = 0; j < off.cols; ++j) {
        double s = 0.0;
        const double* xj = &x.data[static_cast<size_t>(j) * x.cols];
        const double* tr = &t.data[static_cast<size_t>(off.at(i, j)) * t.cols];
        for (int d = 0; d < x.cols; ++d) s += xj[d] * tr[d];
        n.value.at(i, j) = s;
      }
    n.off = std::move(off);
    return push(std::move(n));
  }

  // S_ij = |table[off_ij]|^2 — offset-offset term of the key/query variant.
  VarId rel_self(VarId table, IntMat off) {
    const Matrix& t = val(table);
    Node n;
    n.op = Op::kRelSelf;
    n.a = table;
    n.value = Matrix(off.rows, off.cols);
    for (int i = 0; i < off.rows; ++i)
      for (int j = 0; j < off.cols; ++j) {
        if (off.at(i, j) < 0 || off.at(i, j) >= t.rows)
          throw std::out_of_range("rel_self: offset index out of range");
        double s = 0.0;
        const double* tr = &t.data[static_cast<size_t>(off.at(i, j)) * t.cols];
        for (int d = 0; d < t.cols; ++d) s += tr[d] * tr[d];
        n.value.at(i, j) = s;
      }
    n.off = std::move(off);
    return push(std::move(n));
  }

  // S_ij = b[off_ij], b a column vector of per-bucket scalars.
  VarId bucket_bias(VarId b, IntMat off) {
    const Matrix& bv = val(b);
    if (bv.cols != 1) throw std::invalid_argument("bucket_bias: expected column vector");
    Node n;
    n.op = Op::kBucketBias;
    n.a = b;
    n.value = Matrix(off.rows, off.cols);
    for (int i = 0; i < off.rows; ++i)
      for (int j = 0; j < off.cols; ++j) {
        if (off.at(i, j) < 0 || off.at(i, j) >= bv.rows)
          throw std::out_of_range("bucket_bias: bucket index out of range");
        n.value.at(i, j) = bv.at(off.at(i, j), 0);
      }
    n.off = std::move(off);
    return push(std::move(n));
  }

  // y = a with row 0 set to theta1 and column 0 set to theta2 (both 1x1);
  // the corner takes theta2. Used to untie [CLS] from positions.
  VarId overwrite_row0_col0(VarId a, VarId theta1, VarId theta2) {
    const Matrix& m = val(a);
    if (val(theta1).size() != 1 || val(theta2).size() != 1)
      throw std::invalid_argument("overwrite_row0_col0: thetas must be 1x1");
    Node n;
    n.op = Op::kOverwriteRow0Col0;
    n.a = a;
    n.b = theta1;
    n.c = theta2;
    n.value = m;
    double t1 = val(theta1).data[0], t2 = val(theta2).data[0];
    for (int j = 0; j < m.cols; ++j) n.value.at(0, j) = t1;
    for (int i = 0; i < m.rows; ++i) n.value.at(i, 0) = t2;
    return push(std::move(n));
  }

  // Mean cross-entropy of logit rows against integer labels.
  VarId cross_entropy_mean(VarId logits, std::vector<int> labels) {
    const Matrix& x = val(logits);
    if (static_cast<int>(labels.size()) != x.rows)
      throw std::invalid_argument("cross_entropy_mean: one label per row required");
    if (labels.empty()) throw std::invalid_argument("cross_entropy_mean: empty batch");
    Node n;
    n.op = Op::kCrossEntropyMean;
    n.a = logits;
    n.aux = Matrix(x.rows, 1);  // per-row logsumexp for backward
    double total = 0.0;
    for (int i = 0; i < x.rows; ++i) {
      if (labels[i] < 0 || labels[i] >= x.cols)
        throw std::out_of_range("cross_entropy_mean: label out of range");
      double mx = x.at(i, 0);
      for (int j = 1; j < x.cols; ++j) mx = std::max(mx, x.at(i, j));
      double z = 0.0;
      for (int j = 0; j < x.cols; ++j) z += std::exp(x.at(i, j) - mx);
      double lse = mx + std::log(z);
      n.aux.at(i, 0) = lse;
      total += lse - x.at(i, labels[i]);
    }
    n.value = Matrix(1, 1);
    n.value.data[0] = total / x.rows;
    if (!std::isfinite(n.value.data[0]))
      throw std::runtime_error("cross_entropy_mean: non-finite loss");
    n.rows_idx = std::move(labels);
    return push(std::move(n));
  }

  VarId sum(VarId a) {
    Node n;
    n.op = Op::kSum;
    n.a = a;
    n.value = Matrix(1, 1);
    for (double v : val(a).data) n.value.data[0] += v;
    return push(std::move(n));
  }

  VarId sum_sq(VarId a) {
    Node n;
    n.op = Op::kSumSq;
    n.a = a;
    n.value = Matrix(1, 1);
    n.value.data[0] = frobenius_sq(val(a));
    return push(std::move(n));
  }

  const Matrix& val(VarId id) const { return node(id).value; }

  // Runs the backward sweep from a scalar variable.
  void backward(VarId loss) {
    const Matrix& lv = val(loss);
    if (lv.rows != 1 || lv.cols != 1)
      throw std::invalid_argument("backward: loss must be scalar (1x1)");
    grads_.assign(nodes_.size(), Matrix());
    accum(loss, Matrix::filled(1, 1, 1.0));
    for (int id = loss; id >= 0; --id) {
      if (grads_[id].data.empty()) continue;
      back_node(id, grads_[id]);
    }
    has_grads_ = true;
  }

  // Adjoint of a recorded variable; zero matrix if the variable did not
  // influence the loss.
  const Matrix& grad(VarId id) {
    node(id);  // range check
    if (!has_grads_) throw std::runtime_error("grad: backward() has not run");
    if (grads_[id].data.empty()) grads_[id] = Matrix(val(id).rows, val(id).cols);
    return grads_[id];
  }

  size_t size() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    grads_.clear();
    has_grads_ = false;
  }

 private:
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;

  struct Node {
    Op op = Op::kLeaf;
    VarId a = -1, b = -1, c = -1;
    double scalar = 0.0;
    Matrix value;
    Matrix aux;
    IntMat off;
    std::vector<int> rows_idx;
    std::vector<VarId> multi;
    int lo = 0, hi = 0;
  };

  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
  bool has_grads_ = false;

  VarId push(Node n) {
    nodes_.push_back(std::move(n));
    has_grads_ = false;
    return static_cast<VarId>(nodes_.size()) - 1;
  }

  const Node& node(VarId id) const {
    if (id < 0 || id >= static_cast<VarId>(nodes_.size()))
      throw std::out_of_range("tape: unrecorded variable " + std::to_string(id));
    return nodes_[id];
  }

  static void check_offsets(const IntMat& off, int qlen, int table_rows) {
    (void)qlen;
    for (int v : off.data)
      if (v < 0 || v >= table_rows)
        throw std::out_of_range("relative scores: offset index out of range");
  }

  void accum(VarId id, const Matrix& g) {
    Matrix& slot = grads_[id];
    if (slot.data.empty()) {
      slot = g;
      return;
    }
    for (size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += g.data[i];
  }

  // Zero-initialized adjoint buffer for in-place scatter accumulation
  // (embedding tables and offset tables are large; per-node temporaries
  // would dominate the backward pass).
  Matrix& grad_slot(VarId id) {
    Matrix& slot = grads_[id];
    if (slot.data.empty()) slot = Matrix(nodes_[id].value.rows, nodes_[id].value.cols);
    return slot;
  }

  void back_node(VarId id, const Matrix& gy) {
    const Node& n = nodes_[id];
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kMatmul:
        accum(n.a, poslab::matmul_nt(gy, val(n.b)));
        accum(n.b, poslab::matmul_tn(val(n.a), gy));
        break;
      case Op::kMatmulNT:
        accum(n.a, poslab::matmul(gy, val(n.b)));
        accum(n.b, poslab::matmul_tn(gy, val(n.a)));
        break;
      case Op::kAdd:
        accum(n.a, gy);
        accum(n.b, gy);
        break;
      case Op::kSub:
        accum(n.a, gy);
        accum(n.b, poslab::scale(gy, -1.0));
        break;
      case Op::kAddRowVec: {
        accum(n.a, gy);
        Matrix gv(1, gy.cols);
        for (int i = 0; i < gy.rows; ++i)
          for (int j = 0; j < gy.cols; ++j) gv.at(0, j) += gy.at(i, j);
        accum(n.b, gv);
        break;
      }
      case Op::kScale:
        accum(n.a, poslab::scale(gy, n.scalar));
        break;
      case Op::kHadamardConst:
        accum(n.a, poslab::hadamard(gy, n.aux));
        break;
      case Op::kSoftmaxRows: {
        const Matrix& y = n.value;
        Matrix gx(y.rows, y.cols);
        for (int i = 0; i < y.rows; ++i) {
          double inner = 0.0;
          for (int j = 0; j < y.cols; ++j) inner += gy.at(i, j) * y.at(i, j);
          for (int j = 0; j < y.cols; ++j)
            gx.at(i, j) = y.at(i, j) * (gy.at(i, j) - inner);
        }
        accum(n.a, gx);
        break;
      }
      case Op::kLayerNorm: {
        const Matrix& x = val(n.a);
        const Matrix& g = val(n.b);
        const int ncols = x.cols;
        Matrix gx(x.rows, ncols), gg(1, ncols), gb(1, ncols);
        for (int i = 0; i < x.rows; ++i) {
          double mu = n.aux.at(i, 0), inv = n.aux.at(i, 1);
          double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
          for (int j = 0; j < ncols; ++j) {
            double xhat = (x.at(i, j) - mu) * inv;
            double dxhat = gy.at(i, j) * g.at(0, j);
            gg.at(0, j) += gy.at(i, j) * xhat;
            gb.at(0, j) += gy.at(i, j);
            m1 += dxhat;
            m2 += dxhat * xhat;
          }
          m1 /= ncols;
          m2 /= ncols;
          for (int j = 0; j < ncols; ++j) {
            double xhat = (x.at(i, j) - mu) * inv;
            double dxhat = gy.at(i, j) * g.at(0, j);
            gx.at(i, j) = inv * (dxhat - m1 - xhat * m2);
          }
        }
        accum(n.a, gx);
        accum(n.b, gg);
        accum(n.c, gb);
        break;
      }
      case Op::kGelu: {
        const Matrix& x = val(n.a);
        Matrix gx = gy;
        for (size_t i = 0; i < gx.data.size(); ++i) {
          double v = x.data[i];
          double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
          double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          gx.data[i] *= cdf + v * pdf;
        }
        accum(n.a, gx);
        break;
      }
      case Op::kGatherRows: {
        const Matrix& t = val(n.a);
        Matrix& gt = grad_slot(n.a);
        for (size_t i = 0; i < n.rows_idx.size(); ++i)
          for (int j = 0; j < t.cols; ++j)
            gt.at(n.rows_idx[i], j) += gy.at(static_cast<int>(i), j);
        break;
      }
      case Op::kConcatRows: {
        int at = 0;
        for (VarId p : n.multi) {
          const Matrix& m = val(p);
          Matrix gp(m.rows, m.cols);
          std::copy_n(gy.data.begin() + static_cast<size_t>(at) * gy.cols,
                      gp.data.size(), gp.data.begin());
          accum(p, gp);
          at += m.rows;
        }
        break;
      }
      case Op::kSliceCols: {
        const Matrix& x = val(n.a);
        Matrix gx(x.rows, x.cols);
        for (int i = 0; i < gy.rows; ++i)
          for (int j = 0; j < gy.cols; ++j) gx.at(i, n.lo + j) = gy.at(i, j);
        accum(n.a, gx);
        break;
      }
      case Op::kConcatCols: {
        int at = 0;
        for (VarId p : n.multi) {
          const Matrix& m = val(p);
          Matrix gp(m.rows, m.cols);
          for (int i = 0; i < m.rows; ++i)
            for (int j = 0; j < m.cols; ++j) gp.at(i, j) = gy.at(i, at + j);
          accum(p, gp);
          at += m.cols;
        }
        break;
      }
      case Op::kRelScoresQ: {
        const Matrix& x = val(n.a);
        const Matrix& t = val(n.b);
        Matrix gx(x.rows, x.cols);
        Matrix& gt = grad_slot(n.b);
        for (int i = 0; i < n.off.rows; ++i)
          for (int j = 0; j < n.off.cols; ++j) {
            double gij = gy.at(i, j);
            if (gij == 0.0) continue;
            const double* tr = &t.data[static_cast<size_t>(n.off.at(i, j)) * t.cols];
            double* gxr = &gx.data[static_cast<size_t>(i) * x.cols];
            double* gtr = &gt.data[static_cast<size_t>(n.off.at(i, j)) * t.cols];
            const double* xr = &x.data[static_cast<size_t>(i) * x.cols];
            for (int d = 0; d < x.cols; ++d) {
              gxr[d] += gij * tr[d];
              gtr[d] += gij * xr[d];
            }
          }
        accum(n.a, gx);
        break;
      }
      case Op::kRelScoresK: {
        const Matrix& x = val(n.a);
        const Matrix& t = val(n.b);
        Matrix gx(x.rows, x.cols);
        Matrix& gt = grad_slot(n.b);
        for (int i = 0; i < n.off.rows; ++i)
          for (int j = 0; j < n.off.cols; ++j) {
            double gij = gy.at(i, j);
            if (gij == 0.0) continue;
            const double* tr = &t.data[static_cast<size_t>(n.off.at(i, j)) * t.cols];
            double* gxr = &gx.data[static_cast<size_t>(j) * x.cols];
            double* gtr = &gt.data[static_cast<size_t>(n.off.at(i, j)) * t.cols];
            const double* xr = &x.data[static_cast<size_t>(j) * x.cols];
            for (int d = 0; d < x.cols; ++d) {
              gxr[d] += gij * tr[d];
              gtr[d] += gij * xr[d];
            }
          }
        accum(n.a, gx);
        break;
      }
      case Op::kRelSelf: {
        const Matrix& t = val(n.a);
        Matrix& gt = grad_slot(n.a);
        for (int i = 0; i < n.off.rows; ++i)
          for (int j = 0; j < n.off.cols; ++j) {
            double gij = gy.at(i, j);
            if (gij == 0.0) continue;
            const double* tr = &t.data[static_cast<size_t>(n.off.at(i, j)) * t.cols];
            double* gtr = &gt.data[static_cast<size_t>(n.off.at(i, j)) * t.cols];
            for (int d = 0; d < t.cols; ++d) gtr[d] += 2.0 * gij * tr[d];
          }
        break;
      }
      case Op::kBucketBias: {
        Matrix& gb = grad_slot(n.a);
        for (int i = 0; i < n.off.rows; ++i)
          for (int j = 0; j < n.off.cols; ++j) gb.at(n.off.at(i, j), 0) += gy.at(i, j);
        break;
      }
      case Op::kOverwriteRow0Col0: {
        Matrix gx(gy.rows, gy.cols);
        double g1 = 0.0, g2 = 0.0;
        for (int i = 0; i < gy.rows; ++i)
          for (int j = 0; j < gy.cols; ++j) {
            if (i == 0 && j == 0) {
              g2 += gy.at(i, j);
            } else if (i == 0) {
              g1 += gy.at(i, j);
            } else if (j == 0) {
              g2 += gy.at(i, j);
            } else {
              gx.at(i, j) = gy.at(i, j);
            }
          }
        accum(n.a, gx);
        accum(n.b, Matrix::filled(1, 1, g1));
        accum(n.c, Matrix::filled(1, 1, g2));
        break;
      }
      case Op::kCrossEntropyMean: {
        const Matrix& x = val(n.a);
        double s = gy.data[0] / x.rows;
        Matrix gx(x.rows, x.cols);
        for (int i = 0; i < x.rows; ++i) {
          double lse = n.aux.at(i, 0);
          for (int j = 0; j < x.cols; ++j)
            gx.at(i, j) = s * std::exp(x.at(i, j) - lse);
          gx.at(i, n.rows_idx[i]) -= s;
        }
        accum(n.a, gx);
        break;
      }
      case Op::kSum:
        accum(n.a, Matrix::filled(val(n.a).rows, val(n.a).cols, gy.data[0]));
        break;
      case Op::kSumSq: {
        Matrix gx = val(n.a);
        for (double& v : gx.data) v *= 2.0 * gy.data[0];
        accum(n.a, gx);
        break;
      }
    }
  }
};

// Gradient of a scalar variable with respect to a set of recorded leaves.
inline std::vector<Matrix> gradient(Tape& tape, Tape::VarId loss,
                                    const std::vector<Tape::VarId>& leaves) {
  tape.backward(loss);
  std::vector<Matrix> out;
  out.reserve(leaves.size());
  for (Tape::VarId id : leaves) out.push_back(tape.grad(id));
  return out;
}

}  // namespace poslab
