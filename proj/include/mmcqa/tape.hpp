#pragma once

// Reverse-mode autodiff over an explicit operation tape. Values are dense
// rank-1/rank-2 tensors; the batch dimension is folded into rows. Every op
// validates shapes at record time, computes its forward value eagerly, and
// knows how to push adjoints back to its inputs. Replaying the tape re-runs
// the same forward code over the recorded leaves, which reproduces outputs
// bit-exactly.

#include <algorithm>
#include <array>
#include <deque>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmcqa/gemm.hpp"
#include "mmcqa/tensor.hpp"

namespace mmcqa {

using ValueId = std::size_t;

enum class Op : std::uint8_t {
  kLeaf,
  kMatmul,
  kAdd,
  kAddRows,
  kAddCols,
  kAddScalar,
  kMul,
  kRowScale,
  kScaleConst,
  kAddConst,
  kTanh,
  kSigmoid,
  kLog,
  kClamp,
  kSoftmaxRows,
  kLogSoftmaxRows,
  kConcat,
  kBlockMax,
  kGatherRows,
  kGatherWindows,
  kRepeatRows,
  kAttend,
  kSum,
  kReshape,
};

const char* op_name(Op op);

template <typename T>
class Tape {
 public:
  using scalar_type = T;

  struct Node {
    Op op = Op::kLeaf;
    std::array<ValueId, 2> in{0, 0};
    int n_in = 0;
    void set_inputs(ValueId a, ValueId b) {
      in[0] = a;
      in[1] = b;
      n_in = 2;
    }
    Tensor<T> value;
    bool requires_grad = false;
    // op attributes
    bool ta = false, tb = false;
    double c0 = 0.0, c1 = 0.0;
    std::size_t blocks = 0, repeat = 0, axis = 0, width = 0;
    std::vector<std::uint32_t> indices;
    std::vector<std::uint8_t> mask;
    std::vector<std::uint32_t> argsel;  // saved argmax rows for kBlockMax
    std::vector<std::size_t> out_shape;
  };

  std::size_t size() const { return nodes_.size(); }
  const Node& node(ValueId id) const { return nodes_.at(id); }
  const Tensor<T>& value(ValueId id) const { return nodes_.at(id).value; }
  bool requires_grad(ValueId id) const { return nodes_.at(id).requires_grad; }

  void clear() { nodes_.clear(); }

  ValueId leaf(Tensor<T> t) {
    Node n;
    n.op = Op::kLeaf;
    n.requires_grad = t.requires_grad();
    n.value = std::move(t);
    return push(std::move(n));
  }

  ValueId matmul(ValueId a, ValueId b, bool transpose_a = false, bool transpose_b = false) {
    const Tensor<T>& ta_ = val(a);
    const Tensor<T>& tb_ = val(b);
    if (ta_.rank() != 2) throw std::invalid_argument("matmul: lhs must be rank-2");
    const std::size_t m = transpose_a ? ta_.cols() : ta_.rows();
    const std::size_t k = transpose_a ? ta_.rows() : ta_.cols();
    Node n;
    n.op = Op::kMatmul;
    n.set_inputs(a, b);
    n.ta = transpose_a;
    n.tb = transpose_b;
    if (tb_.rank() == 1) {
      if (transpose_b) throw std::invalid_argument("matmul: transpose_b invalid for vector rhs");
      if (tb_.dim(0) != k) throw std::invalid_argument("matmul: inner dim mismatch (vector rhs)");
      n.out_shape = {m};
    } else {
      const std::size_t bk = transpose_b ? tb_.cols() : tb_.rows();
      const std::size_t bn = transpose_b ? tb_.rows() : tb_.cols();
      if (bk != k) throw std::invalid_argument("matmul: inner dim mismatch");
      n.out_shape = {m, bn};
    }
    return emit(std::move(n));
  }

  ValueId add(ValueId a, ValueId b) {
    if (!val(a).same_shape(val(b))) throw std::invalid_argument("add: shape mismatch");
    return emit(binary(Op::kAdd, a, b, val(a).shape()));
  }

  // matrix [r,c] + vec[c] broadcast to every row
  ValueId add_rows(ValueId m, ValueId v) {
    require_mat_vec(m, v, 1, "add_rows");
    return emit(binary(Op::kAddRows, m, v, val(m).shape()));
  }

  // matrix [r,c] + vec[r] broadcast to every column (matrix-plus-vector ⊕)
  ValueId add_cols(ValueId m, ValueId v) {
    require_mat_vec(m, v, 0, "add_cols");
    return emit(binary(Op::kAddCols, m, v, val(m).shape()));
  }

  ValueId add_scalar(ValueId a, ValueId s) {
    if (val(s).numel() != 1) throw std::invalid_argument("add_scalar: rhs must have one element");
    return emit(binary(Op::kAddScalar, a, s, val(a).shape()));
  }

  ValueId mul(ValueId a, ValueId b) {
    if (!val(a).same_shape(val(b))) throw std::invalid_argument("mul: shape mismatch");
    return emit(binary(Op::kMul, a, b, val(a).shape()));
  }

  // matrix [r,c] with row i scaled by vec[i]
  ValueId row_scale(ValueId m, ValueId v) {
    require_mat_vec(m, v, 0, "row_scale");
    return emit(binary(Op::kRowScale, m, v, val(m).shape()));
  }

  ValueId scale_const(ValueId a, double c) {
    Node n = unary(Op::kScaleConst, a, val(a).shape());
    n.c0 = c;
    return emit(std::move(n));
  }

  ValueId add_const(ValueId a, double c) {
    Node n = unary(Op::kAddConst, a, val(a).shape());
    n.c0 = c;
    return emit(std::move(n));
  }

  ValueId tanh_op(ValueId a) { return emit(unary(Op::kTanh, a, val(a).shape())); }
  ValueId sigmoid(ValueId a) { return emit(unary(Op::kSigmoid, a, val(a).shape())); }
  ValueId log_op(ValueId a) { return emit(unary(Op::kLog, a, val(a).shape())); }

  ValueId clamp(ValueId a, double lo, double hi) {
    if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
    Node n = unary(Op::kClamp, a, val(a).shape());
    n.c0 = lo;
    n.c1 = hi;
    return emit(std::move(n));
  }

  // softmax over the last axis: each row of a matrix, or a whole vector
  ValueId softmax_rows(ValueId a) { return emit(unary(Op::kSoftmaxRows, a, val(a).shape())); }
  ValueId log_softmax_rows(ValueId a) {
    return emit(unary(Op::kLogSoftmaxRows, a, val(a).shape()));
  }

  ValueId concat(ValueId a, ValueId b, std::size_t axis) {
    const Tensor<T>& x = val(a);
    const Tensor<T>& y = val(b);
    if (x.rank() != y.rank()) throw std::invalid_argument("concat: rank mismatch");
    std::vector<std::size_t> shape = x.shape();
    if (x.rank() == 1) {
      if (axis != 0) throw std::invalid_argument("concat: bad axis for rank-1");
      shape[0] += y.dim(0);
    } else if (x.rank() == 2) {
      if (axis > 1) throw std::invalid_argument("concat: bad axis");
      const std::size_t other = 1 - axis;
      if (x.dim(other) != y.dim(other)) throw std::invalid_argument("concat: shape mismatch");
      shape[axis] += y.dim(axis);
    } else {
      throw std::invalid_argument("concat: rank-1/2 only");
    }
    Node n = binary(Op::kConcat, a, b, shape);
    n.axis = axis;
    return emit(std::move(n));
  }

  // x is [blocks*P, F]; per block, the row-wise max over unmasked rows.
  // Every block must keep at least one unmasked row.
  ValueId block_max(ValueId x, std::size_t blocks, std::vector<std::uint8_t> mask) {
    const Tensor<T>& v = val(x);
    if (v.rank() != 2) throw std::invalid_argument("block_max: rank-2 input required");
    if (blocks == 0 || v.rows() % blocks != 0)
      throw std::invalid_argument("block_max: rows not divisible by blocks");
    if (mask.size() != v.rows()) throw std::invalid_argument("block_max: mask size mismatch");
    const std::size_t per = v.rows() / blocks;
    for (std::size_t b = 0; b < blocks; ++b) {
      bool any = false;
      for (std::size_t p = 0; p < per; ++p) any = any || mask[b * per + p];
      if (!any) throw std::invalid_argument("block_max: fully masked block");
    }
    Node n = unary(Op::kBlockMax, x, {blocks, v.cols()});
    n.blocks = blocks;
    n.mask = std::move(mask);
    return emit(std::move(n));
  }

  ValueId max_over_rows(ValueId x) {
    const Tensor<T>& v = val(x);
    if (v.rank() != 2) throw std::invalid_argument("max_over_rows: rank-2 input required");
    return block_max(x, 1, std::vector<std::uint8_t>(v.rows(), 1));
  }

  // Rank-2 src: gather rows. Rank-1 src: gather elements.
  ValueId gather_rows(ValueId src, std::vector<std::uint32_t> idx) {
    const Tensor<T>& v = val(src);
    if (idx.empty()) throw std::invalid_argument("gather_rows: empty index list");
    for (std::uint32_t i : idx) {
      if (i >= v.rows()) throw std::invalid_argument("gather_rows: index out of range");
    }
    std::vector<std::size_t> shape =
        v.rank() == 2 ? std::vector<std::size_t>{idx.size(), v.cols()}
                      : std::vector<std::size_t>{idx.size()};
    Node n = unary(Op::kGatherRows, src, shape);
    n.indices = std::move(idx);
    return emit(std::move(n));
  }

  // im2col over rows of src [R,E]: plan holds Q*width row indices; output row
  // q is the concatenation of src rows plan[q*width .. q*width+width-1].
  ValueId gather_windows(ValueId src, std::vector<std::uint32_t> plan, std::size_t width) {
    const Tensor<T>& v = val(src);
    if (v.rank() != 2) throw std::invalid_argument("gather_windows: rank-2 src required");
    if (width == 0 || plan.empty() || plan.size() % width != 0)
      throw std::invalid_argument("gather_windows: bad plan");
    for (std::uint32_t i : plan) {
      if (i >= v.rows()) throw std::invalid_argument("gather_windows: index out of range");
    }
    Node n = unary(Op::kGatherWindows, src, {plan.size() / width, width * v.cols()});
    n.indices = std::move(plan);
    n.width = width;
    return emit(std::move(n));
  }

  // [B,d] -> [B*r,d], each row repeated r times consecutively
  ValueId repeat_rows(ValueId x, std::size_t r) {
    const Tensor<T>& v = val(x);
    if (v.rank() != 2) throw std::invalid_argument("repeat_rows: rank-2 input required");
    if (r == 0) throw std::invalid_argument("repeat_rows: zero repeat");
    Node n = unary(Op::kRepeatRows, x, {v.rows() * r, v.cols()});
    n.repeat = r;
    return emit(std::move(n));
  }

  // weights [B,R] against values [B*R,d]: out[b] = sum_r w[b,r] * val[b*R+r]
  ValueId attend(ValueId weights, ValueId values) {
    const Tensor<T>& w = val(weights);
    const Tensor<T>& v = val(values);
    if (w.rank() != 2 || v.rank() != 2) throw std::invalid_argument("attend: rank-2 inputs");
    if (w.rows() * w.cols() != v.rows()) throw std::invalid_argument("attend: shape mismatch");
    Node n = binary(Op::kAttend, weights, values, {w.rows(), v.cols()});
    return emit(std::move(n));
  }

  ValueId sum(ValueId a) { return emit(unary(Op::kSum, a, {1})); }

  ValueId reshape(ValueId a, std::vector<std::size_t> shape) {
    if (Tensor<T>::numel_of(shape) != val(a).numel())
      throw std::invalid_argument("reshape: element count mismatch");
    Node n = unary(Op::kReshape, a, shape);
    return emit(std::move(n));
  }

  // ---- derived helpers ----

  ValueId mean(ValueId a) { return scale_const(sum(a), 1.0 / double(val(a).numel())); }

  // x*W^T + b broadcast across rows: x [B,in], w [out,in], b [out] -> [B,out]
  ValueId affine_rows(ValueId x, ValueId w, ValueId b) {
    return add_rows(matmul(x, w, false, true), b);
  }

  // ---- backward ----

  // d(loss)/d(node) for every recorded node that requires grad; leaves that
  // do not participate get zeros. loss must be a scalar on this tape.
  std::vector<Tensor<T>> backward(ValueId loss) const {
    if (loss >= nodes_.size()) throw std::invalid_argument("backward: value not on tape");
    if (nodes_[loss].value.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    std::vector<Tensor<T>> grads(nodes_.size());
    std::vector<char> live(nodes_.size(), 0);
    live[loss] = 1;
    grads[loss] = Tensor<T>::full(nodes_[loss].value.shape(), T(1));
    for (std::size_t ii = loss + 1; ii-- > 0;) {
      const Node& n = nodes_[ii];
      if (!live[ii] || !n.requires_grad || n.op == Op::kLeaf) continue;
      backprop_node(ii, grads, live);
    }
    // materialize zeros for grad-requiring leaves that never participated
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].requires_grad && grads[i].numel() == 0) {
        grads[i] = Tensor<T>::zeros(nodes_[i].value.shape());
      }
    }
    return grads;
  }

  // Recompute every non-leaf value from the recorded leaves, in order.
  // Returns true when all recomputed values are bit-identical.
  bool replay() {
    bool identical = true;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op == Op::kLeaf) continue;
      Tensor<T> again = compute(nodes_[i]);
      if (again.data() != nodes_[i].value.data()) identical = false;
      nodes_[i].value = std::move(again);
    }
    return identical;
  }

 private:
  // deque keeps value(&) references stable while later ops are emitted
  std::deque<Node> nodes_;

  const Tensor<T>& val(ValueId id) const {
    if (id >= nodes_.size()) throw std::invalid_argument("tape: value id out of range");
    return nodes_[id].value;
  }

  void require_mat_vec(ValueId m, ValueId v, std::size_t match_axis, const char* what) const {
    const Tensor<T>& a = val(m);
    const Tensor<T>& b = val(v);
    if (a.rank() != 2 || b.rank() != 1)
      throw std::invalid_argument(std::string(what) + ": expects matrix and vector");
    if (b.dim(0) != a.dim(match_axis == 0 ? 0 : 1))
      throw std::invalid_argument(std::string(what) + ": length mismatch");
  }

  Node unary(Op op, ValueId a, std::vector<std::size_t> shape) {
    Node n;
    n.op = op;
    n.in[0] = a;
    n.n_in = 1;
    n.out_shape = std::move(shape);
    n.requires_grad = nodes_[a].requires_grad;
    return n;
  }

  Node binary(Op op, ValueId a, ValueId b, std::vector<std::size_t> shape) {
    Node n;
    n.op = op;
    n.set_inputs(a, b);
    n.out_shape = std::move(shape);
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return n;
  }

  ValueId push(Node n) {
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  ValueId emit(Node n) {
    if (n.n_in >= 1) n.requires_grad = nodes_[n.in[0]].requires_grad;
    if (n.n_in >= 2) n.requires_grad = n.requires_grad || nodes_[n.in[1]].requires_grad;
    n.value = compute(n);
    return push(std::move(n));
  }

  Tensor<T> compute(Node& n);
  void backprop_node(ValueId id, std::vector<Tensor<T>>& grads, std::vector<char>& live) const;

  void accumulate(ValueId target, Tensor<T> delta, std::vector<Tensor<T>>& grads,
                  std::vector<char>& live) const {
    if (!nodes_[target].requires_grad) return;
    live[target] = 1;
    Tensor<T>& g = grads[target];
    if (g.numel() == 0) {
      g = std::move(delta);
      return;
    }
    T* gp = g.ptr();
    const T* dp = delta.ptr();
    const std::size_t n = g.numel();
    for (std::size_t i = 0; i < n; ++i) gp[i] += dp[i];
  }
};

// ---- forward execution ----

template <typename T>
Tensor<T> Tape<T>::compute(Node& n) {
  auto in0 = [&]() -> const Tensor<T>& { return nodes_[n.in[0]].value; };
  auto in1 = [&]() -> const Tensor<T>& { return nodes_[n.in[1]].value; };
  const double kClampAct = 30.0;  // sigmoid/tanh input clamp

  switch (n.op) {
    case Op::kLeaf:
      return n.value;

    case Op::kMatmul: {
      const Tensor<T>& a = in0();
      const Tensor<T>& b = in1();
      Tensor<T> out = Tensor<T>::zeros(n.out_shape);
      const std::size_t m = n.out_shape[0];
      const std::size_t k = n.ta ? a.rows() : a.cols();
      const std::size_t cols = n.out_shape.size() == 2 ? n.out_shape[1] : 1;
      detail::gemm(out.ptr(), a.ptr(), b.ptr(), m, cols, k, n.ta, n.tb, false);
      return out;
    }

    case Op::kAdd: {
      Tensor<T> out = in0();
      const T* bp = in1().ptr();
      T* op_ = out.ptr();
      for (std::size_t i = 0; i < out.numel(); ++i) op_[i] += bp[i];
      return out;
    }

    case Op::kAddRows: {
      Tensor<T> out = in0();
      const T* v = in1().ptr();
      const std::size_t r = out.rows(), c = out.cols();
      for (std::size_t i = 0; i < r; ++i) {
        T* row = out.ptr() + i * c;
        for (std::size_t j = 0; j < c; ++j) row[j] += v[j];
      }
      return out;
    }

    case Op::kAddCols: {
      Tensor<T> out = in0();
      const T* v = in1().ptr();
      const std::size_t r = out.rows(), c = out.cols();
      for (std::size_t i = 0; i < r; ++i) {
        T* row = out.ptr() + i * c;
        for (std::size_t j = 0; j < c; ++j) row[j] += v[i];
      }
      return out;
    }

    case Op::kAddScalar: {
      Tensor<T> out = in0();
      const T s = in1()[0];
      for (T& x : out.data()) x += s;
      return out;
    }

    case Op::kMul: {
      Tensor<T> out = in0();
      const T* bp = in1().ptr();
      T* op_ = out.ptr();
      for (std::size_t i = 0; i < out.numel(); ++i) op_[i] *= bp[i];
      return out;
    }

    case Op::kRowScale: {
      Tensor<T> out = in0();
      const T* v = in1().ptr();
      const std::size_t r = out.rows(), c = out.cols();
      for (std::size_t i = 0; i < r; ++i) {
        T* row = out.ptr() + i * c;
        for (std::size_t j = 0; j < c; ++j) row[j] *= v[i];
      }
      return out;
    }

    case Op::kScaleConst: {
      Tensor<T> out = in0();
      const T c = static_cast<T>(n.c0);
      for (T& x : out.data()) x *= c;
      return out;
    }

    case Op::kAddConst: {
      Tensor<T> out = in0();
      const T c = static_cast<T>(n.c0);
      for (T& x : out.data()) x += c;
      return out;
    }

    case Op::kTanh: {
      Tensor<T> out = in0();
      for (T& x : out.data()) {
        double v = std::min(std::max(double(x), -kClampAct), kClampAct);
        x = static_cast<T>(std::tanh(v));
      }
      return out;
    }

    case Op::kSigmoid: {
      Tensor<T> out = in0();
      for (T& x : out.data()) {
        double v = std::min(std::max(double(x), -kClampAct), kClampAct);
        x = static_cast<T>(1.0 / (1.0 + std::exp(-v)));
      }
      return out;
    }

    case Op::kLog: {
      Tensor<T> out = in0();
      for (T& x : out.data()) x = static_cast<T>(std::log(double(x)));
      return out;
    }

    case Op::kClamp: {
      Tensor<T> out = in0();
      const T lo = static_cast<T>(n.c0), hi = static_cast<T>(n.c1);
      for (T& x : out.data()) x = std::min(std::max(x, lo), hi);
      return out;
    }

    case Op::kSoftmaxRows:
    case Op::kLogSoftmaxRows: {
      const Tensor<T>& a = in0();
      Tensor<T> out = a;
      const std::size_t c = a.rank() == 2 ? a.cols() : a.dim(0);
      const std::size_t r = a.numel() / c;
      for (std::size_t i = 0; i < r; ++i) {
        T* row = out.ptr() + i * c;
        T mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) denom += std::exp(double(row[j] - mx));
        if (n.op == Op::kSoftmaxRows) {
          for (std::size_t j = 0; j < c; ++j)
            row[j] = static_cast<T>(std::exp(double(row[j] - mx)) / denom);
        } else {
          const double lse = std::log(denom);
          for (std::size_t j = 0; j < c; ++j)
            row[j] = static_cast<T>(double(row[j] - mx) - lse);
        }
      }
      return out;
    }

    case Op::kConcat: {
      const Tensor<T>& a = in0();
      const Tensor<T>& b = in1();
      Tensor<T> out = Tensor<T>::zeros(n.out_shape);
      if (a.rank() == 1 || n.axis == 0) {
        std::copy(a.data().begin(), a.data().end(), out.data().begin());
        std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.numel());
      } else {
        const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
        for (std::size_t i = 0; i < r; ++i) {
          std::copy(a.ptr() + i * ca, a.ptr() + (i + 1) * ca, out.ptr() + i * (ca + cb));
          std::copy(b.ptr() + i * cb, b.ptr() + (i + 1) * cb, out.ptr() + i * (ca + cb) + ca);
        }
      }
      return out;
    }

    case Op::kBlockMax: {
      const Tensor<T>& a = in0();
      const std::size_t per = a.rows() / n.blocks, c = a.cols();
      Tensor<T> out = Tensor<T>::zeros(n.out_shape);
      n.argsel.assign(n.blocks * c, 0);
      for (std::size_t b = 0; b < n.blocks; ++b) {
        T* orow = out.ptr() + b * c;
        bool first = true;
        for (std::size_t p = 0; p < per; ++p) {
          const std::size_t row = b * per + p;
          if (!n.mask[row]) continue;
          const T* arow = a.ptr() + row * c;
          if (first) {
            for (std::size_t j = 0; j < c; ++j) {
              orow[j] = arow[j];
              n.argsel[b * c + j] = static_cast<std::uint32_t>(row);
            }
            first = false;
          } else {
            for (std::size_t j = 0; j < c; ++j) {
              if (arow[j] > orow[j]) {
                orow[j] = arow[j];
                n.argsel[b * c + j] = static_cast<std::uint32_t>(row);
              }
            }
          }
        }
      }
      return out;
    }

    case Op::kGatherRows: {
      const Tensor<T>& a = in0();
      Tensor<T> out = Tensor<T>::zeros(n.out_shape);
      const std::size_t c = a.rank() == 2 ? a.cols() : 1;
      for (std::size_t q = 0; q < n.indices.size(); ++q) {
        const T* src = a.ptr() + std::size_t(n.indices[q]) * c;
        std::copy(src, src + c, out.ptr() + q * c);
      }
      return out;
    }

    case Op::kGatherWindows: {
      const Tensor<T>& a = in0();
      const std::size_t e = a.cols(), w = n.width;
      Tensor<T> out = Tensor<T>::zeros(n.out_shape);
      const std::size_t q_count = n.out_shape[0];
      for (std::size_t q = 0; q < q_count; ++q) {
        T* orow = out.ptr() + q * w * e;
        for (std::size_t j = 0; j < w; ++j) {
          const T* src = a.ptr() + std::size_t(n.indices[q * w + j]) * e;
          std::copy(src, src + e, orow + j * e);
        }
      }
      return out;
    }

    case Op::kRepeatRows: {
      const Tensor<T>& a = in0();
      const std::size_t r = a.rows(), c = a.cols();
      Tensor<T> out = Tensor<T>::zeros(n.out_shape);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t rep = 0; rep < n.repeat; ++rep) {
          std::copy(a.ptr() + i * c, a.ptr() + (i + 1) * c,
                    out.ptr() + (i * n.repeat + rep) * c);
        }
      }
      return out;
    }

    case Op::kAttend: {
      const Tensor<T>& w = in0();
      const Tensor<T>& v = in1();
      const std::size_t b_count = w.rows(), r = w.cols(), c = v.cols();
      Tensor<T> out = Tensor<T>::zeros(n.out_shape);
      for (std::size_t b = 0; b < b_count; ++b) {
        T* orow = out.ptr() + b * c;
        for (std::size_t rr = 0; rr < r; ++rr) {
          const T wv = w.at(b, rr);
          const T* vrow = v.ptr() + (b * r + rr) * c;
          for (std::size_t j = 0; j < c; ++j) orow[j] += wv * vrow[j];
        }
      }
      return out;
    }

    case Op::kSum: {
      const Tensor<T>& a = in0();
      T acc = T(0);
      for (T x : a.data()) acc += x;
      return Tensor<T>({1}, {acc});
    }

    case Op::kReshape: {
      Tensor<T> out = in0();
      return Tensor<T>(n.out_shape, std::move(out.data()));
    }
  }
  throw std::logic_error("tape: unknown op");
}

// ---- backward execution ----

template <typename T>
void Tape<T>::backprop_node(ValueId id, std::vector<Tensor<T>>& grads,
                            std::vector<char>& live) const {
  const Node& n = nodes_[id];
  const Tensor<T>& g = grads[id];
  auto in_val = [&](int i) -> const Tensor<T>& { return nodes_[n.in[i]].value; };
  auto wants = [&](int i) { return nodes_[n.in[i]].requires_grad; };

  switch (n.op) {
    case Op::kLeaf:
      return;

    case Op::kMatmul: {
      const Tensor<T>& a = in_val(0);
      const Tensor<T>& b = in_val(1);
      const bool vec = b.rank() == 1;
      const std::size_t m = n.out_shape[0];
      const std::size_t k = n.ta ? a.rows() : a.cols();
      if (vec) {
        if (wants(0)) {
          // dA_eff[i,kk] = g[i] * x[kk]; transpose into storage when ta
          Tensor<T> da = Tensor<T>::zeros(a.shape());
          for (std::size_t i = 0; i < m; ++i) {
            const T gi = g[i];
            if (gi == T(0)) continue;
            for (std::size_t kk = 0; kk < k; ++kk) {
              const T d = gi * b[kk];
              if (n.ta) da[kk * m + i] += d;
              else da[i * k + kk] += d;
            }
          }
          accumulate(n.in[0], std::move(da), grads, live);
        }
        if (wants(1)) {
          // dx = A_eff^T g
          Tensor<T> db = Tensor<T>::zeros(b.shape());
          for (std::size_t i = 0; i < m; ++i) {
            const T gi = g[i];
            if (gi == T(0)) continue;
            for (std::size_t kk = 0; kk < k; ++kk) {
              db[kk] += gi * (n.ta ? a[kk * m + i] : a[i * k + kk]);
            }
          }
          accumulate(n.in[1], std::move(db), grads, live);
        }
        return;
      }
      const std::size_t ncols = n.out_shape[1];
      if (wants(0)) {
        Tensor<T> da = Tensor<T>::zeros(a.shape());
        if (!n.ta) {
          // dA = g * B_eff^T
          detail::gemm(da.ptr(), g.ptr(), b.ptr(), m, k, ncols, false, !n.tb, true);
        } else {
          // dA_storage = B_eff * g^T
          detail::gemm(da.ptr(), b.ptr(), g.ptr(), k, m, ncols, n.tb, true, true);
        }
        accumulate(n.in[0], std::move(da), grads, live);
      }
      if (wants(1)) {
        Tensor<T> db = Tensor<T>::zeros(b.shape());
        if (!n.tb) {
          // dB = A_eff^T * g
          detail::gemm(db.ptr(), a.ptr(), g.ptr(), k, ncols, m, !n.ta, false, true);
        } else {
          // dB_storage = g^T * A_eff
          detail::gemm(db.ptr(), g.ptr(), a.ptr(), ncols, k, m, true, n.ta, true);
        }
        accumulate(n.in[1], std::move(db), grads, live);
      }
      return;
    }

    case Op::kAdd: {
      if (wants(0)) accumulate(n.in[0], g, grads, live);
      if (wants(1)) accumulate(n.in[1], g, grads, live);
      return;
    }

    case Op::kAddRows: {
      if (wants(0)) accumulate(n.in[0], g, grads, live);
      if (wants(1)) {
        const std::size_t r = g.rows(), c = g.cols();
        Tensor<T> dv = Tensor<T>::zeros({c});
        for (std::size_t i = 0; i < r; ++i) {
          const T* row = g.ptr() + i * c;
          for (std::size_t j = 0; j < c; ++j) dv[j] += row[j];
        }
        accumulate(n.in[1], std::move(dv), grads, live);
      }
      return;
    }

    case Op::kAddCols: {
      if (wants(0)) accumulate(n.in[0], g, grads, live);
      if (wants(1)) {
        const std::size_t r = g.rows(), c = g.cols();
        Tensor<T> dv = Tensor<T>::zeros({r});
        for (std::size_t i = 0; i < r; ++i) {
          const T* row = g.ptr() + i * c;
          T acc = T(0);
          for (std::size_t j = 0; j < c; ++j) acc += row[j];
          dv[i] = acc;
        }
        accumulate(n.in[1], std::move(dv), grads, live);
      }
      return;
    }

    case Op::kAddScalar: {
      if (wants(0)) accumulate(n.in[0], g, grads, live);
      if (wants(1)) {
        T acc = T(0);
        for (T x : g.data()) acc += x;
        accumulate(n.in[1], Tensor<T>(in_val(1).shape(), {acc}), grads, live);
      }
      return;
    }

    case Op::kMul: {
      if (wants(0)) {
        Tensor<T> d = g;
        const T* o = in_val(1).ptr();
        for (std::size_t i = 0; i < d.numel(); ++i) d[i] *= o[i];
        accumulate(n.in[0], std::move(d), grads, live);
      }
      if (wants(1)) {
        Tensor<T> d = g;
        const T* o = in_val(0).ptr();
        for (std::size_t i = 0; i < d.numel(); ++i) d[i] *= o[i];
        accumulate(n.in[1], std::move(d), grads, live);
      }
      return;
    }

    case Op::kRowScale: {
      const Tensor<T>& a = in_val(0);
      const Tensor<T>& v = in_val(1);
      const std::size_t r = a.rows(), c = a.cols();
      if (wants(0)) {
        Tensor<T> d = g;
        for (std::size_t i = 0; i < r; ++i) {
          T* row = d.ptr() + i * c;
          for (std::size_t j = 0; j < c; ++j) row[j] *= v[i];
        }
        accumulate(n.in[0], std::move(d), grads, live);
      }
      if (wants(1)) {
        Tensor<T> dv = Tensor<T>::zeros({r});
        for (std::size_t i = 0; i < r; ++i) {
          const T* grow = g.ptr() + i * c;
          const T* arow = a.ptr() + i * c;
          T acc = T(0);
          for (std::size_t j = 0; j < c; ++j) acc += grow[j] * arow[j];
          dv[i] = acc;
        }
        accumulate(n.in[1], std::move(dv), grads, live);
      }
      return;
    }

    case Op::kScaleConst: {
      if (wants(0)) {
        Tensor<T> d = g;
        const T c = static_cast<T>(n.c0);
        for (T& x : d.data()) x *= c;
        accumulate(n.in[0], std::move(d), grads, live);
      }
      return;
    }

    case Op::kAddConst: {
      if (wants(0)) accumulate(n.in[0], g, grads, live);
      return;
    }

    case Op::kTanh: {
      if (wants(0)) {
        Tensor<T> d = g;
        const T* y = n.value.ptr();
        for (std::size_t i = 0; i < d.numel(); ++i) d[i] *= (T(1) - y[i] * y[i]);
        accumulate(n.in[0], std::move(d), grads, live);
      }
      return;
    }

    case Op::kSigmoid: {
      if (wants(0)) {
        Tensor<T> d = g;
        const T* y = n.value.ptr();
        for (std::size_t i = 0; i < d.numel(); ++i) d[i] *= y[i] * (T(1) - y[i]);
        accumulate(n.in[0], std::move(d), grads, live);
      }
      return;
    }

    case Op::kLog: {
      if (wants(0)) {
        Tensor<T> d = g;
        const T* x = in_val(0).ptr();
        for (std::size_t i = 0; i < d.numel(); ++i) d[i] /= x[i];
        accumulate(n.in[0], std::move(d), grads, live);
      }
      return;
    }

    case Op::kClamp: {
      if (wants(0)) {
        Tensor<T> d = g;
        const T* x = in_val(0).ptr();
        const T lo = static_cast<T>(n.c0), hi = static_cast<T>(n.c1);
        for (std::size_t i = 0; i < d.numel(); ++i) {
          if (!(x[i] > lo && x[i] < hi)) d[i] = T(0);
        }
        accumulate(n.in[0], std::move(d), grads, live);
      }
      return;
    }

    case Op::kSoftmaxRows: {
      if (wants(0)) {
        const Tensor<T>& y = n.value;
        Tensor<T> d = g;
        const std::size_t c = y.rank() == 2 ? y.cols() : y.dim(0);
        const std::size_t r = y.numel() / c;
        for (std::size_t i = 0; i < r; ++i) {
          const T* yrow = y.ptr() + i * c;
          T* drow = d.ptr() + i * c;
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += double(drow[j]) * double(yrow[j]);
          for (std::size_t j = 0; j < c; ++j)
            drow[j] = static_cast<T>(double(yrow[j]) * (double(drow[j]) - dot));
        }
        accumulate(n.in[0], std::move(d), grads, live);
      }
      return;
    }

    case Op::kLogSoftmaxRows: {
      if (wants(0)) {
        const Tensor<T>& y = n.value;
        Tensor<T> d = g;
        const std::size_t c = y.rank() == 2 ? y.cols() : y.dim(0);
        const std::size_t r = y.numel() / c;
        for (std::size_t i = 0; i < r; ++i) {
          const T* yrow = y.ptr() + i * c;
          T* drow = d.ptr() + i * c;
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j) s += double(drow[j]);
          for (std::size_t j = 0; j < c; ++j)
            drow[j] = static_cast<T>(double(drow[j]) - std::exp(double(yrow[j])) * s);
        }
        accumulate(n.in[0], std::move(d), grads, live);
      }
      return;
    }

    case Op::kConcat: {
      const Tensor<T>& a = in_val(0);
      const Tensor<T>& b = in_val(1);
      if (a.rank() == 1 || n.axis == 0) {
        if (wants(0)) {
          Tensor<T> da = Tensor<T>::zeros(a.shape());
          std::copy(g.data().begin(), g.data().begin() + a.numel(), da.data().begin());
          accumulate(n.in[0], std::move(da), grads, live);
        }
        if (wants(1)) {
          Tensor<T> db = Tensor<T>::zeros(b.shape());
          std::copy(g.data().begin() + a.numel(), g.data().end(), db.data().begin());
          accumulate(n.in[1], std::move(db), grads, live);
        }
      } else {
        const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
        if (wants(0)) {
          Tensor<T> da = Tensor<T>::zeros(a.shape());
          for (std::size_t i = 0; i < r; ++i)
            std::copy(g.ptr() + i * (ca + cb), g.ptr() + i * (ca + cb) + ca, da.ptr() + i * ca);
          accumulate(n.in[0], std::move(da), grads, live);
        }
        if (wants(1)) {
          Tensor<T> db = Tensor<T>::zeros(b.shape());
          for (std::size_t i = 0; i < r; ++i)
            std::copy(g.ptr() + i * (ca + cb) + ca, g.ptr() + (i + 1) * (ca + cb),
                      db.ptr() + i * cb);
          accumulate(n.in[1], std::move(db), grads, live);
        }
      }
      return;
    }

    case Op::kBlockMax: {
      if (wants(0)) {
        const Tensor<T>& a = in_val(0);
        const std::size_t c = a.cols();
        Tensor<T> da = Tensor<T>::zeros(a.shape());
        for (std::size_t b = 0; b < n.blocks; ++b) {
          for (std::size_t j = 0; j < c; ++j) {
            da[std::size_t(n.argsel[b * c + j]) * c + j] += g[b * c + j];
          }
        }
        accumulate(n.in[0], std::move(da), grads, live);
      }
      return;
    }

    case Op::kGatherRows: {
      if (wants(0)) {
        const Tensor<T>& a = in_val(0);
        const std::size_t c = a.rank() == 2 ? a.cols() : 1;
        Tensor<T> da = Tensor<T>::zeros(a.shape());
        for (std::size_t q = 0; q < n.indices.size(); ++q) {
          T* dst = da.ptr() + std::size_t(n.indices[q]) * c;
          const T* src = g.ptr() + q * c;
          for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
        }
        accumulate(n.in[0], std::move(da), grads, live);
      }
      return;
    }

    case Op::kGatherWindows: {
      if (wants(0)) {
        const Tensor<T>& a = in_val(0);
        const std::size_t e = a.cols(), w = n.width;
        Tensor<T> da = Tensor<T>::zeros(a.shape());
        const std::size_t q_count = n.out_shape[0];
        for (std::size_t q = 0; q < q_count; ++q) {
          const T* grow = g.ptr() + q * w * e;
          for (std::size_t j = 0; j < w; ++j) {
            T* dst = da.ptr() + std::size_t(n.indices[q * w + j]) * e;
            for (std::size_t x = 0; x < e; ++x) dst[x] += grow[j * e + x];
          }
        }
        accumulate(n.in[0], std::move(da), grads, live);
      }
      return;
    }

    case Op::kRepeatRows: {
      if (wants(0)) {
        const Tensor<T>& a = in_val(0);
        const std::size_t r = a.rows(), c = a.cols();
        Tensor<T> da = Tensor<T>::zeros(a.shape());
        for (std::size_t i = 0; i < r; ++i) {
          T* dst = da.ptr() + i * c;
          for (std::size_t rep = 0; rep < n.repeat; ++rep) {
            const T* src = g.ptr() + (i * n.repeat + rep) * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
          }
        }
        accumulate(n.in[0], std::move(da), grads, live);
      }
      return;
    }

    case Op::kAttend: {
      const Tensor<T>& w = in_val(0);
      const Tensor<T>& v = in_val(1);
      const std::size_t b_count = w.rows(), r = w.cols(), c = v.cols();
      if (wants(0)) {
        Tensor<T> dw = Tensor<T>::zeros(w.shape());
        for (std::size_t b = 0; b < b_count; ++b) {
          const T* grow = g.ptr() + b * c;
          for (std::size_t rr = 0; rr < r; ++rr) {
            const T* vrow = v.ptr() + (b * r + rr) * c;
            T acc = T(0);
            for (std::size_t j = 0; j < c; ++j) acc += grow[j] * vrow[j];
            dw.at(b, rr) = acc;
          }
        }
        accumulate(n.in[0], std::move(dw), grads, live);
      }
      if (wants(1)) {
        Tensor<T> dv = Tensor<T>::zeros(v.shape());
        for (std::size_t b = 0; b < b_count; ++b) {
          const T* grow = g.ptr() + b * c;
          for (std::size_t rr = 0; rr < r; ++rr) {
            const T wv = w.at(b, rr);
            T* dst = dv.ptr() + (b * r + rr) * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += wv * grow[j];
          }
        }
        accumulate(n.in[1], std::move(dv), grads, live);
      }
      return;
    }

    case Op::kSum: {
      if (wants(0)) {
        accumulate(n.in[0], Tensor<T>::full(in_val(0).shape(), g[0]), grads, live);
      }
      return;
    }

    case Op::kReshape: {
      if (wants(0)) {
        Tensor<T> d = g;
        accumulate(n.in[0], Tensor<T>(in_val(0).shape(), std::move(d.data())), grads, live);
      }
      return;
    }

    default:
      throw std::logic_error("tape: missing backward rule");
  }
}

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kAddRows: return "add_rows";
    case Op::kAddCols: return "add_cols";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMul: return "mul";
    case Op::kRowScale: return "row_scale";
    case Op::kScaleConst: return "scale_const";
    case Op::kAddConst: return "add_const";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kLog: return "log";
    case Op::kClamp: return "clamp";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kLogSoftmaxRows: return "log_softmax_rows";
    case Op::kConcat: return "concat";
    case Op::kBlockMax: return "block_max";
    case Op::kGatherRows: return "gather_rows";
    case Op::kGatherWindows: return "gather_windows";
    case Op::kRepeatRows: return "repeat_rows";
    case Op::kAttend: return "attend";
    case Op::kSum: return "sum";
    case Op::kReshape: return "reshape";
  }
  return "?";
}

}  // namespace mmcqa
