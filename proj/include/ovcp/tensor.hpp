#pragma once
// A small reverse-mode autodiff tape over row-major matrices, templated on
// the scalar type so the same graph code runs in 32-bit (training) and
// 64-bit (verification) precision. Nodes are appended in evaluation order,
// which makes reverse creation order a valid reverse-topological order for
// the backward sweep. Every op validates its output for NaN/Inf so numeric
// corruption surfaces at the op that produced it, not three modules later.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ovcp/common.hpp"
#include "ovcp/weightspace.hpp"

namespace ovcp {

template <typename S>
struct MatT {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<S> v;

  MatT() = default;
  MatT(int64_t r, int64_t c) : rows(r), cols(c), v(static_cast<size_t>(r * c), S(0)) {
    if (r <= 0 || c <= 0) {
      throw InvariantError("Mat: dims must be positive, got [" + std::to_string(r) + ", " +
                           std::to_string(c) + "]");
    }
  }
  MatT(int64_t r, int64_t c, std::vector<S> data) : rows(r), cols(c), v(std::move(data)) {
    if (r <= 0 || c <= 0) {
      throw InvariantError("Mat: dims must be positive, got [" + std::to_string(r) + ", " +
                           std::to_string(c) + "]");
    }
    if (static_cast<int64_t>(v.size()) != r * c) {
      throw InvariantError("Mat: data size " + std::to_string(v.size()) + " does not match [" +
                           std::to_string(r) + ", " + std::to_string(c) + "]");
    }
  }

  int64_t numel() const { return rows * cols; }
  S& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
  S at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }
  std::string shape_str() const {
    return "[" + std::to_string(rows) + ", " + std::to_string(cols) + "]";
  }
};

using Mat = MatT<float>;
using MatD = MatT<double>;

enum class Op : uint8_t {
  kLeaf,
  kMatmul,
  kAdd,
  kAddRow,
  kMulRow,
  kMul,
  kScale,
  kSoftmax,
  kLayerNormRows,
  kGelu,
  kL2NormalizeRows,
  kTranspose,
  kConcatRows,
  kConcatCols,
  kSliceRows,
  kSliceCols,
  kMeanRows,
  kSumAll,
  kCrossEntropy,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kAddRow: return "add_row";
    case Op::kMulRow: return "mul_row";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kSoftmax: return "softmax";
    case Op::kLayerNormRows: return "layer_norm";
    case Op::kGelu: return "gelu";
    case Op::kL2NormalizeRows: return "l2_normalize_rows";
    case Op::kTranspose: return "transpose";
    case Op::kConcatRows: return "concat_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceRows: return "slice_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kMeanRows: return "mean_rows";
    case Op::kSumAll: return "sum_all";
    case Op::kCrossEntropy: return "cross_entropy";
  }
  return "?";
}

template <typename S>
class TapeT {
 public:
  using Node = int32_t;
  static constexpr S kLnEps = static_cast<S>(1e-5);

  // --- graph construction -------------------------------------------------

  Node leaf(MatT<S> value, bool requires_grad = false) {
    Rec r;
    r.op = Op::kLeaf;
    r.val = std::move(value);
    r.needs_grad = requires_grad;
    return push(std::move(r));
  }

  Node constant(MatT<S> value) { return leaf(std::move(value), false); }

  Node matmul(Node a, Node b) {
    const MatT<S>& A = val(a);
    const MatT<S>& B = val(b);
    if (A.cols != B.rows) {
      throw InvariantError(std::string("matmul: inner dims mismatch ") + A.shape_str() + " x " +
                           B.shape_str());
    }
    Rec r = unary_shell(Op::kMatmul, {a, b});
    r.val = MatT<S>(A.rows, B.cols);
    matmul_kernel(A, B, r.val);
    return push(std::move(r));
  }

  Node add(Node a, Node b) {
    const MatT<S>& A = val(a);
    const MatT<S>& B = val(b);
    require_same_shape(A, B, "add");
    Rec r = unary_shell(Op::kAdd, {a, b});
    r.val = A;
    for (int64_t i = 0; i < A.numel(); ++i) r.val.v[i] += B.v[i];
    return push(std::move(r));
  }

  // m + v with v a 1 x cols row vector broadcast over the rows of m.
  Node add_row(Node m, Node vrow) {
    const MatT<S>& M = val(m);
    const MatT<S>& V = val(vrow);
    require_row_broadcast(M, V, "add_row");
    Rec r = unary_shell(Op::kAddRow, {m, vrow});
    r.val = M;
    for (int64_t i = 0; i < M.rows; ++i) {
      for (int64_t j = 0; j < M.cols; ++j) r.val.at(i, j) += V.v[static_cast<size_t>(j)];
    }
    return push(std::move(r));
  }

  Node mul_row(Node m, Node vrow) {
    const MatT<S>& M = val(m);
    const MatT<S>& V = val(vrow);
    require_row_broadcast(M, V, "mul_row");
    Rec r = unary_shell(Op::kMulRow, {m, vrow});
    r.val = M;
    for (int64_t i = 0; i < M.rows; ++i) {
      for (int64_t j = 0; j < M.cols; ++j) r.val.at(i, j) *= V.v[static_cast<size_t>(j)];
    }
    return push(std::move(r));
  }

  Node mul(Node a, Node b) {
    const MatT<S>& A = val(a);
    const MatT<S>& B = val(b);
    require_same_shape(A, B, "mul");
    Rec r = unary_shell(Op::kMul, {a, b});
    r.val = A;
    for (int64_t i = 0; i < A.numel(); ++i) r.val.v[i] *= B.v[i];
    return push(std::move(r));
  }

  Node scale(Node a, S c) {
    Rec r = unary_shell(Op::kScale, {a});
    r.scalar = c;
    r.val = val(a);
    for (auto& x : r.val.v) x *= c;
    return push(std::move(r));
  }

  // Softmax along `axis` (0 = down columns, 1 = across rows), with the usual
  // max subtraction for stability.
  Node softmax(Node a, int axis) {
    if (axis != 0 && axis != 1) {
      throw UsageError("softmax: axis must be 0 or 1 for a matrix, got " + std::to_string(axis));
    }
    const MatT<S>& A = val(a);
    Rec r = unary_shell(Op::kSoftmax, {a});
    r.axis = axis;
    r.val = A;
    if (axis == 1) {
      for (int64_t i = 0; i < A.rows; ++i) softmax_span(&r.val.v[static_cast<size_t>(i * A.cols)], A.cols, 1);
    } else {
      for (int64_t j = 0; j < A.cols; ++j) softmax_span(&r.val.v[static_cast<size_t>(j)], A.rows, A.cols);
    }
    return push(std::move(r));
  }

  // Per-row normalization (x - mean) / sqrt(var + eps); gain/bias are applied
  // by composing with mul_row/add_row so this primitive stays affine-free.
  Node layer_norm_rows(Node a) {
    const MatT<S>& A = val(a);
    Rec r = unary_shell(Op::kLayerNormRows, {a});
    r.val = A;
    for (int64_t i = 0; i < A.rows; ++i) {
      S* row = &r.val.v[static_cast<size_t>(i * A.cols)];
      S mean = S(0);
      for (int64_t j = 0; j < A.cols; ++j) mean += row[j];
      mean /= static_cast<S>(A.cols);
      S var = S(0);
      for (int64_t j = 0; j < A.cols; ++j) {
        S d = row[j] - mean;
        var += d * d;
      }
      var /= static_cast<S>(A.cols);
      S inv = S(1) / std::sqrt(var + kLnEps);
      for (int64_t j = 0; j < A.cols; ++j) row[j] = (row[j] - mean) * inv;
    }
    return push(std::move(r));
  }

  Node gelu(Node a) {
    Rec r = unary_shell(Op::kGelu, {a});
    r.val = val(a);
    for (auto& x : r.val.v) x = gelu_fwd(x);
    return push(std::move(r));
  }

  Node l2_normalize_rows(Node a) {
    const MatT<S>& A = val(a);
    Rec r = unary_shell(Op::kL2NormalizeRows, {a});
    r.val = A;
    for (int64_t i = 0; i < A.rows; ++i) {
      S* row = &r.val.v[static_cast<size_t>(i * A.cols)];
      double norm = row_norm(row, A.cols);
      if (norm < 1e-30) {
        throw InvariantError("l2_normalize_rows: zero-norm row " + std::to_string(i));
      }
      S inv = static_cast<S>(1.0 / norm);
      for (int64_t j = 0; j < A.cols; ++j) row[j] *= inv;
    }
    return push(std::move(r));
  }

  Node transpose(Node a) {
    const MatT<S>& A = val(a);
    Rec r = unary_shell(Op::kTranspose, {a});
    r.val = MatT<S>(A.cols, A.rows);
    for (int64_t i = 0; i < A.rows; ++i) {
      for (int64_t j = 0; j < A.cols; ++j) r.val.at(j, i) = A.at(i, j);
    }
    return push(std::move(r));
  }

  Node concat_rows(std::span<const Node> parts) {
    if (parts.empty()) throw UsageError("concat_rows: no inputs");
    int64_t cols = val(parts[0]).cols;
    int64_t rows = 0;
    for (Node p : parts) {
      if (val(p).cols != cols) {
        throw InvariantError(std::string("concat_rows: column mismatch ") + val(p).shape_str() +
                             " vs [*, " + std::to_string(cols) + "]");
      }
      rows += val(p).rows;
    }
    Rec r = unary_shell(Op::kConcatRows, std::vector<Node>(parts.begin(), parts.end()));
    r.val = MatT<S>(rows, cols);
    int64_t at = 0;
    for (Node p : parts) {
      const MatT<S>& P = val(p);
      std::copy(P.v.begin(), P.v.end(), r.val.v.begin() + at * cols);
      at += P.rows;
    }
    return push(std::move(r));
  }

  Node concat_cols(std::span<const Node> parts) {
    if (parts.empty()) throw UsageError("concat_cols: no inputs");
    int64_t rows = val(parts[0]).rows;
    int64_t cols = 0;
    for (Node p : parts) {
      if (val(p).rows != rows) {
        throw InvariantError(std::string("concat_cols: row mismatch ") + val(p).shape_str() +
                             " vs [" + std::to_string(rows) + ", *]");
      }
      cols += val(p).cols;
    }
    Rec r = unary_shell(Op::kConcatCols, std::vector<Node>(parts.begin(), parts.end()));
    r.val = MatT<S>(rows, cols);
    int64_t at = 0;
    for (Node p : parts) {
      const MatT<S>& P = val(p);
      for (int64_t i = 0; i < rows; ++i) {
        std::copy(&P.v[static_cast<size_t>(i * P.cols)], &P.v[static_cast<size_t>(i * P.cols)] + P.cols,
                  r.val.v.begin() + i * cols + at);
      }
      at += P.cols;
    }
    return push(std::move(r));
  }

  Node slice_rows(Node a, int64_t r0, int64_t r1) {
    const MatT<S>& A = val(a);
    if (r0 < 0 || r1 > A.rows || r0 >= r1) {
      throw UsageError("slice_rows: invalid range [" + std::to_string(r0) + ", " +
                       std::to_string(r1) + ") for " + A.shape_str());
    }
    Rec r = unary_shell(Op::kSliceRows, {a});
    r.i0 = r0;
    r.i1 = r1;
    r.val = MatT<S>(r1 - r0, A.cols);
    std::copy(A.v.begin() + r0 * A.cols, A.v.begin() + r1 * A.cols, r.val.v.begin());
    return push(std::move(r));
  }

  Node slice_cols(Node a, int64_t c0, int64_t c1) {
    const MatT<S>& A = val(a);
    if (c0 < 0 || c1 > A.cols || c0 >= c1) {
      throw UsageError("slice_cols: invalid range [" + std::to_string(c0) + ", " +
                       std::to_string(c1) + ") for " + A.shape_str());
    }
    Rec r = unary_shell(Op::kSliceCols, {a});
    r.i0 = c0;
    r.i1 = c1;
    r.val = MatT<S>(A.rows, c1 - c0);
    for (int64_t i = 0; i < A.rows; ++i) {
      std::copy(&A.v[static_cast<size_t>(i * A.cols + c0)], &A.v[static_cast<size_t>(i * A.cols + c1)],
                r.val.v.begin() + i * (c1 - c0));
    }
    return push(std::move(r));
  }

  Node mean_rows(Node a) {
    const MatT<S>& A = val(a);
    Rec r = unary_shell(Op::kMeanRows, {a});
    r.val = MatT<S>(1, A.cols);
    for (int64_t i = 0; i < A.rows; ++i) {
      for (int64_t j = 0; j < A.cols; ++j) r.val.v[static_cast<size_t>(j)] += A.at(i, j);
    }
    const S inv = S(1) / static_cast<S>(A.rows);
    for (auto& x : r.val.v) x *= inv;
    return push(std::move(r));
  }

  Node sum_all(Node a) {
    const MatT<S>& A = val(a);
    Rec r = unary_shell(Op::kSumAll, {a});
    r.val = MatT<S>(1, 1);
    S acc = S(0);
    for (S x : A.v) acc += x;
    r.val.v[0] = acc;
    return push(std::move(r));
  }

  // Cross-entropy of a single 1 x K logit row against an integer target,
  // computed via a max-shifted log-sum-exp.
  Node cross_entropy(Node logits, int64_t target) {
    const MatT<S>& L = val(logits);
    if (L.rows != 1) {
      throw UsageError(std::string("cross_entropy: logits must be a single row, got ") + L.shape_str());
    }
    if (target < 0 || target >= L.cols) {
      throw UsageError("cross_entropy: target " + std::to_string(target) + " out of range [0, " +
                       std::to_string(L.cols) + ")");
    }
    Rec r = unary_shell(Op::kCrossEntropy, {logits});
    r.i0 = target;
    S m = L.v[0];
    for (S x : L.v) m = std::max(m, x);
    S sum = S(0);
    r.aux.resize(L.v.size());
    for (size_t j = 0; j < L.v.size(); ++j) {
      r.aux[j] = std::exp(L.v[j] - m);
      sum += r.aux[j];
    }
    const S inv = S(1) / sum;
    for (auto& p : r.aux) p *= inv;  // softmax, kept for backward
    r.val = MatT<S>(1, 1);
    r.val.v[0] = std::log(sum) + m - L.v[static_cast<size_t>(target)];
    return push(std::move(r));
  }

  // --- access ---------------------------------------------------------------

  const MatT<S>& value(Node n) const { return val(n); }

  bool has_grad(Node n) const { return recs_[check(n)].grad.numel() > 0; }

  const MatT<S>& gradient(Node n) const {
    const Rec& r = recs_[check(n)];
    if (r.grad.numel() == 0) {
      throw InvariantError("gradient: node " + std::to_string(n) +
                           " has no gradient (not on a differentiable path, or backward not run)");
    }
    return r.grad;
  }

  size_t size() const { return recs_.size(); }

  // --- backward -------------------------------------------------------------

  void backward(Node loss) {
    Rec& top = recs_[check(loss)];
    if (top.val.numel() != 1) {
      throw UsageError(std::string("backward: loss must be scalar, got ") + top.val.shape_str());
    }
    if (!top.needs_grad) {
      throw UsageError("backward: loss does not depend on any gradient-enabled leaf");
    }
    accum_init(top);
    top.grad.v[0] = S(1);
    for (int64_t i = static_cast<int64_t>(recs_.size()) - 1; i >= 0; --i) {
      Rec& r = recs_[static_cast<size_t>(i)];
      if (!r.needs_grad || r.grad.numel() == 0 || r.op == Op::kLeaf) continue;
      backward_one(r);
    }
  }

 private:
  struct Rec {
    Op op = Op::kLeaf;
    std::vector<Node> in;
    MatT<S> val;
    MatT<S> grad;  // empty until touched by backward
    std::vector<S> aux;
    S scalar = S(0);
    int axis = 0;
    int64_t i0 = 0, i1 = 0;
    bool needs_grad = false;
  };

  std::vector<Rec> recs_;

  size_t check(Node n) const {
    if (n < 0 || static_cast<size_t>(n) >= recs_.size()) {
      throw InvariantError("tape: invalid node handle " + std::to_string(n));
    }
    return static_cast<size_t>(n);
  }

  const MatT<S>& val(Node n) const { return recs_[check(n)].val; }

  Rec unary_shell(Op op, std::vector<Node> in) {
    Rec r;
    r.op = op;
    for (Node n : in) check(n);
    r.in = std::move(in);
    for (Node n : r.in) r.needs_grad = r.needs_grad || recs_[static_cast<size_t>(n)].needs_grad;
    return r;
  }

  Node push(Rec r) {
    for (S x : r.val.v) {
      if (!std::isfinite(static_cast<double>(x))) {
        throw InvariantError(std::string("op ") + op_name(r.op) + ": non-finite output at node " +
                             std::to_string(recs_.size()));
      }
    }
    recs_.push_back(std::move(r));
    return static_cast<Node>(recs_.size() - 1);
  }

  static void require_same_shape(const MatT<S>& a, const MatT<S>& b, const char* who) {
    if (a.rows != b.rows || a.cols != b.cols) {
      throw InvariantError(std::string(who) + ": shape mismatch " + a.shape_str() + " vs " +
                           b.shape_str());
    }
  }

  static void require_row_broadcast(const MatT<S>& m, const MatT<S>& v, const char* who) {
    if (v.rows != 1 || v.cols != m.cols) {
      throw InvariantError(std::string(who) + ": expected [1, " + std::to_string(m.cols) +
                           "] row vector, got " + v.shape_str());
    }
  }

  static void matmul_kernel(const MatT<S>& A, const MatT<S>& B, MatT<S>& C) {
    const S* a = A.v.data();
    const S* b = B.v.data();
    S* c = C.v.data();
    const int64_t n = A.rows, k = A.cols, m = B.cols;
    for (int64_t i = 0; i < n; ++i) {
      S* crow = c + i * m;
      for (int64_t p = 0; p < k; ++p) {
        const S aval = a[i * k + p];
        const S* brow = b + p * m;
        for (int64_t j = 0; j < m; ++j) crow[j] += aval * brow[j];
      }
    }
  }

  static void softmax_span(S* x, int64_t n, int64_t stride) {
    S m = x[0];
    for (int64_t i = 1; i < n; ++i) m = std::max(m, x[i * stride]);
    S sum = S(0);
    for (int64_t i = 0; i < n; ++i) {
      x[i * stride] = std::exp(x[i * stride] - m);
      sum += x[i * stride];
    }
    const S inv = S(1) / sum;
    for (int64_t i = 0; i < n; ++i) x[i * stride] *= inv;
  }

  static double row_norm(const S* row, int64_t n) {
    double acc = 0.0;
    for (int64_t j = 0; j < n; ++j) acc += static_cast<double>(row[j]) * static_cast<double>(row[j]);
    return std::sqrt(acc);
  }

  static S gelu_fwd(S x) {
    return S(0.5) * x * (S(1) + static_cast<S>(std::erf(static_cast<double>(x) * 0.7071067811865475244)));
  }

  static S gelu_bwd(S x) {
    const double xd = static_cast<double>(x);
    const double cdf = 0.5 * (1.0 + std::erf(xd * 0.7071067811865475244));
    const double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014326779;
    return static_cast<S>(cdf + xd * pdf);
  }

  void accum_init(Rec& r) {
    if (r.grad.numel() == 0) r.grad = MatT<S>(r.val.rows, r.val.cols);
  }

  MatT<S>* grad_sink(Node n) {
    Rec& r = recs_[static_cast<size_t>(n)];
    if (!r.needs_grad) return nullptr;
    accum_init(r);
    return &r.grad;
  }

  void backward_one(Rec& r) {
    const MatT<S>& gy = r.grad;
    switch (r.op) {
      case Op::kLeaf:
        break;
      case Op::kMatmul: {
        const MatT<S>& A = val(r.in[0]);
        const MatT<S>& B = val(r.in[1]);
        if (MatT<S>* ga = grad_sink(r.in[0])) {
          // dA += gy . B^T
          for (int64_t i = 0; i < A.rows; ++i) {
            for (int64_t p = 0; p < B.rows; ++p) {
              S acc = S(0);
              for (int64_t j = 0; j < B.cols; ++j) acc += gy.at(i, j) * B.at(p, j);
              ga->at(i, p) += acc;
            }
          }
        }
        if (MatT<S>* gb = grad_sink(r.in[1])) {
          // dB += A^T . gy
          for (int64_t i = 0; i < A.rows; ++i) {
            for (int64_t p = 0; p < A.cols; ++p) {
              const S aval = A.at(i, p);
              for (int64_t j = 0; j < gy.cols; ++j) gb->at(p, j) += aval * gy.at(i, j);
            }
          }
        }
        break;
      }
      case Op::kAdd: {
        for (int s = 0; s < 2; ++s) {
          if (MatT<S>* g = grad_sink(r.in[static_cast<size_t>(s)])) {
            for (int64_t i = 0; i < gy.numel(); ++i) g->v[i] += gy.v[i];
          }
        }
        break;
      }
      case Op::kAddRow: {
        if (MatT<S>* gm = grad_sink(r.in[0])) {
          for (int64_t i = 0; i < gy.numel(); ++i) gm->v[i] += gy.v[i];
        }
        if (MatT<S>* gv = grad_sink(r.in[1])) {
          for (int64_t i = 0; i < gy.rows; ++i) {
            for (int64_t j = 0; j < gy.cols; ++j) gv->v[static_cast<size_t>(j)] += gy.at(i, j);
          }
        }
        break;
      }
      case Op::kMulRow: {
        const MatT<S>& M = val(r.in[0]);
        const MatT<S>& V = val(r.in[1]);
        if (MatT<S>* gm = grad_sink(r.in[0])) {
          for (int64_t i = 0; i < gy.rows; ++i) {
            for (int64_t j = 0; j < gy.cols; ++j) gm->at(i, j) += gy.at(i, j) * V.v[static_cast<size_t>(j)];
          }
        }
        if (MatT<S>* gv = grad_sink(r.in[1])) {
          for (int64_t i = 0; i < gy.rows; ++i) {
            for (int64_t j = 0; j < gy.cols; ++j) gv->v[static_cast<size_t>(j)] += gy.at(i, j) * M.at(i, j);
          }
        }
        break;
      }
      case Op::kMul: {
        const MatT<S>& A = val(r.in[0]);
        const MatT<S>& B = val(r.in[1]);
        if (MatT<S>* ga = grad_sink(r.in[0])) {
          for (int64_t i = 0; i < gy.numel(); ++i) ga->v[i] += gy.v[i] * B.v[i];
        }
        if (MatT<S>* gb = grad_sink(r.in[1])) {
          for (int64_t i = 0; i < gy.numel(); ++i) gb->v[i] += gy.v[i] * A.v[i];
        }
        break;
      }
      case Op::kScale: {
        if (MatT<S>* g = grad_sink(r.in[0])) {
          for (int64_t i = 0; i < gy.numel(); ++i) g->v[i] += gy.v[i] * r.scalar;
        }
        break;
      }
      case Op::kSoftmax: {
        if (MatT<S>* g = grad_sink(r.in[0])) {
          const MatT<S>& Y = r.val;
          if (r.axis == 1) {
            for (int64_t i = 0; i < Y.rows; ++i) {
              S dot = S(0);
              for (int64_t j = 0; j < Y.cols; ++j) dot += gy.at(i, j) * Y.at(i, j);
              for (int64_t j = 0; j < Y.cols; ++j) g->at(i, j) += Y.at(i, j) * (gy.at(i, j) - dot);
            }
          } else {
            for (int64_t j = 0; j < Y.cols; ++j) {
              S dot = S(0);
              for (int64_t i = 0; i < Y.rows; ++i) dot += gy.at(i, j) * Y.at(i, j);
              for (int64_t i = 0; i < Y.rows; ++i) g->at(i, j) += Y.at(i, j) * (gy.at(i, j) - dot);
            }
          }
        }
        break;
      }
      case Op::kLayerNormRows: {
        if (MatT<S>* g = grad_sink(r.in[0])) {
          const MatT<S>& X = val(r.in[0]);
          const MatT<S>& Y = r.val;
          const int64_t C = X.cols;
          for (int64_t i = 0; i < X.rows; ++i) {
            S mean = S(0), var = S(0);
            for (int64_t j = 0; j < C; ++j) mean += X.at(i, j);
            mean /= static_cast<S>(C);
            for (int64_t j = 0; j < C; ++j) {
              S d = X.at(i, j) - mean;
              var += d * d;
            }
            var /= static_cast<S>(C);
            const S inv = S(1) / std::sqrt(var + kLnEps);
            S g_mean = S(0), gy_dot_y = S(0);
            for (int64_t j = 0; j < C; ++j) {
              g_mean += gy.at(i, j);
              gy_dot_y += gy.at(i, j) * Y.at(i, j);
            }
            g_mean /= static_cast<S>(C);
            gy_dot_y /= static_cast<S>(C);
            for (int64_t j = 0; j < C; ++j) {
              g->at(i, j) += inv * (gy.at(i, j) - g_mean - Y.at(i, j) * gy_dot_y);
            }
          }
        }
        break;
      }
      case Op::kGelu: {
        if (MatT<S>* g = grad_sink(r.in[0])) {
          const MatT<S>& X = val(r.in[0]);
          for (int64_t i = 0; i < gy.numel(); ++i) g->v[i] += gy.v[i] * gelu_bwd(X.v[i]);
        }
        break;
      }
      case Op::kL2NormalizeRows: {
        if (MatT<S>* g = grad_sink(r.in[0])) {
          const MatT<S>& X = val(r.in[0]);
          const MatT<S>& Y = r.val;
          for (int64_t i = 0; i < X.rows; ++i) {
            const S* xrow = &X.v[static_cast<size_t>(i * X.cols)];
            const double norm = row_norm(xrow, X.cols);
            const S inv = static_cast<S>(1.0 / norm);
            S dot = S(0);
            for (int64_t j = 0; j < X.cols; ++j) dot += gy.at(i, j) * Y.at(i, j);
            for (int64_t j = 0; j < X.cols; ++j) {
              g->at(i, j) += inv * (gy.at(i, j) - Y.at(i, j) * dot);
            }
          }
        }
        break;
      }
      case Op::kTranspose: {
        if (MatT<S>* g = grad_sink(r.in[0])) {
          for (int64_t i = 0; i < gy.rows; ++i) {
            for (int64_t j = 0; j < gy.cols; ++j) g->at(j, i) += gy.at(i, j);
          }
        }
        break;
      }
      case Op::kConcatRows: {
        int64_t at = 0;
        for (Node p : r.in) {
          const MatT<S>& P = val(p);
          if (MatT<S>* g = grad_sink(p)) {
            for (int64_t i = 0; i < P.rows; ++i) {
              for (int64_t j = 0; j < P.cols; ++j) g->at(i, j) += gy.at(at + i, j);
            }
          }
          at += P.rows;
        }
        break;
      }
      case Op::kConcatCols: {
        int64_t at = 0;
        for (Node p : r.in) {
          const MatT<S>& P = val(p);
          if (MatT<S>* g = grad_sink(p)) {
            for (int64_t i = 0; i < P.rows; ++i) {
              for (int64_t j = 0; j < P.cols; ++j) g->at(i, j) += gy.at(i, at + j);
            }
          }
          at += P.cols;
        }
        break;
      }
      case Op::kSliceRows: {
        if (MatT<S>* g = grad_sink(r.in[0])) {
          for (int64_t i = 0; i < gy.rows; ++i) {
            for (int64_t j = 0; j < gy.cols; ++j) g->at(r.i0 + i, j) += gy.at(i, j);
          }
        }
        break;
      }
      case Op::kSliceCols: {
        if (MatT<S>* g = grad_sink(r.in[0])) {
          for (int64_t i = 0; i < gy.rows; ++i) {
            for (int64_t j = 0; j < gy.cols; ++j) g->at(i, r.i0 + j) += gy.at(i, j);
          }
        }
        break;
      }
      case Op::kMeanRows: {
        if (MatT<S>* g = grad_sink(r.in[0])) {
          const S inv = S(1) / static_cast<S>(g->rows);
          for (int64_t i = 0; i < g->rows; ++i) {
            for (int64_t j = 0; j < g->cols; ++j) g->at(i, j) += gy.v[static_cast<size_t>(j)] * inv;
          }
        }
        break;
      }
      case Op::kSumAll: {
        if (MatT<S>* g = grad_sink(r.in[0])) {
          for (auto& x : g->v) x += gy.v[0];
        }
        break;
      }
      case Op::kCrossEntropy: {
        if (MatT<S>* g = grad_sink(r.in[0])) {
          const S gl = gy.v[0];
          for (size_t j = 0; j < r.aux.size(); ++j) {
            S p = r.aux[j];
            if (static_cast<int64_t>(j) == r.i0) p -= S(1);
            g->v[j] += gl * p;
          }
        }
        break;
      }
    }
  }
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;

// Affine layer norm: normalize rows, then scale and shift with 1 x C vectors.
template <typename S>
typename TapeT<S>::Node layer_norm(TapeT<S>& tape, typename TapeT<S>::Node x,
                                   typename TapeT<S>::Node gain, typename TapeT<S>::Node bias) {
  return tape.add_row(tape.mul_row(tape.layer_norm_rows(x), gain), bias);
}

// ---------------------------------------------------------------------------
// Central finite differences of a scalar function over a ParamVector, used as
// the independent oracle for tape gradients. `f` must be pure (same theta ->
// same value); non-finite evaluations are rejected.
// ---------------------------------------------------------------------------

template <typename S>
double fd_eval(const std::function<double(const ParamVectorT<S>&)>& f, const ParamVectorT<S>& theta) {
  double y = f(theta);
  if (!std::isfinite(y)) throw InvariantError("finite_difference_gradient: f returned non-finite value");
  return y;
}

template <typename S>
std::vector<double> finite_difference_gradient(const std::function<double(const ParamVectorT<S>&)>& f,
                                               const ParamVectorT<S>& theta, double step,
                                               std::span<const int64_t> coords) {
  if (!(step > 0.0) || !std::isfinite(step)) {
    throw UsageError("finite_difference_gradient: step must be positive and finite");
  }
  std::vector<double> out;
  out.reserve(coords.size());
  ParamVectorT<S> probe = theta;
  for (int64_t c : coords) {
    if (c < 0 || c >= theta.size()) {
      throw UsageError("finite_difference_gradient: coordinate " + std::to_string(c) + " out of range");
    }
    const S orig = theta.values[static_cast<size_t>(c)];
    probe.values[static_cast<size_t>(c)] = static_cast<S>(static_cast<double>(orig) + step);
    const double hi = fd_eval(f, probe);
    probe.values[static_cast<size_t>(c)] = static_cast<S>(static_cast<double>(orig) - step);
    const double lo = fd_eval(f, probe);
    probe.values[static_cast<size_t>(c)] = orig;
    out.push_back((hi - lo) / (2.0 * step));
  }
  return out;
}

template <typename S>
std::vector<double> finite_difference_gradient(const std::function<double(const ParamVectorT<S>&)>& f,
                                               const ParamVectorT<S>& theta, double step) {
  std::vector<int64_t> coords(static_cast<size_t>(theta.size()));
  for (size_t i = 0; i < coords.size(); ++i) coords[i] = static_cast<int64_t>(i);
  return finite_difference_gradient(f, theta, step, coords);
}

// Coordinate-wise relative deviation between two gradient estimates, with an
// absolute floor so exact zeros compare clean.
inline double max_rel_deviation(std::span<const double> a, std::span<const double> b,
                                double floor_abs = 1e-12) {
  if (a.size() != b.size()) throw UsageError("max_rel_deviation: length mismatch");
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor_abs});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace ovcp
