#pragma once

// Reverse-mode differentiation over dense double matrices.
//
// A Tape records operations as they are issued. Node values are computed
// eagerly whenever every input already has a value, so most code just builds
// expressions and reads results. Placeholders can be left unbound and filled
// in later with bind(); forward_eval() then recomputes everything reachable
// from a root. backward_grad() propagates adjoints in reverse insertion order,
// which is a reverse topological order because inputs always precede outputs.

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsca/tensor.hpp"

namespace tsca {

using NodeId = std::size_t;

class Tape;

// Handle to a node on a tape. Cheap to copy.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

enum class Op {
  kLeaf,
  kMatmul,
  kTranspose,
  kConcatCols,
  kConcatRows,
  kSlice,
  kGatherCols,
  kSoftmaxCols,
  kSoftmaxRows,
  kWeightedSoftmaxRows,
  kExp,
  kLog,
  kAbs,
  kAdd,
  kSub,
  kMul,
  kAffine,
  kMulScalar,
  kScaleRows,
  kAddBias,
  kNormalizeCols,
  kSum,
  kMean,
  kMeanCols,
};

const char* op_name(Op op);

// Non-tensor operands of an op.
struct OpAttr {
  double a = 0.0;
  double b = 0.0;
  std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  std::vector<std::size_t> indices;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Trainable leaf: receives a gradient from backward_grad().
  Var leaf(Tensor value, std::string name = {});
  // Non-trainable leaf.
  Var constant(Tensor value);
  // Trainable leaf without a value; must be bound before forward_eval().
  Var placeholder(std::size_t rows, std::size_t cols, std::string name = {});

  void bind(Var leaf, Tensor value);

  // Recompute every node reachable from root, starting from the current leaf
  // bindings. Throws ConfigError on an unbound leaf, NumericError on NaN/Inf.
  const Tensor& forward_eval(Var root);

  // d loss / d leaf for every trainable leaf on the tape. Untouched leaves get
  // zeros. The loss must be 1x1.
  std::map<NodeId, Tensor> backward_grad(Var loss);

  const Tensor& value(NodeId id) const;
  bool has_value(NodeId id) const { return nodes_.at(id).value.has_value(); }
  std::size_t size() const { return nodes_.size(); }
  const std::string& name(NodeId id) const { return nodes_.at(id).name; }

  Var record(Op op, std::vector<NodeId> inputs, OpAttr attr = {});

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<NodeId> inputs;
    OpAttr attr;
    std::optional<Tensor> value;
    std::array<std::size_t, 2> shape{};
    bool trainable = false;
    std::string name;
  };

  Tensor compute(const Node& node) const;
  void accumulate(const Node& node, const Tensor& out, const Tensor& grad,
                  std::vector<Tensor>& adjoints) const;
  std::vector<bool> reachable_from(NodeId root) const;

  std::vector<Node> nodes_;
};

// ---- Op builders --------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var concat_cols(Var a, Var b);
Var concat_rows(Var a, Var b);
Var slice(Var a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1);
Var slice_rows(Var a, std::size_t r0, std::size_t r1);
Var row_of(Var a, std::size_t r);
Var element(Var a, std::size_t r, std::size_t c);
// Columns of a, picked by index (repeats allowed).
Var gather_cols(Var a, std::vector<std::size_t> indices);
// Softmax down each column / along each row, max-subtracted.
Var softmax_cols(Var a);
Var softmax_rows(Var a);
// out[i][j] = w[j] exp(s[i][j]) / sum_k w[k] exp(s[i][k]); w is m×1, may hold zeros.
Var weighted_softmax_rows(Var s, Var w);
Var exp(Var a);
// log(max(a, floor)); entries at or below floor get zero gradient.
Var log(Var a, double floor = 0.0);
Var abs(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// scale * a + shift, elementwise with constants.
Var affine(Var a, double scale, double shift);
// a * s where s is a 1×1 node.
Var mul_scalar(Var a, Var s);
// out[i][j] = a[i][j] * v[i]; v is n×1.
Var scale_rows(Var a, Var v);
// out[i][j] = a[i][j] + b[i]; b is n×1.
Var add_bias(Var a, Var b);
// Each column divided by (its L2 norm + eps). Zero columns map to zero.
Var normalize_cols(Var a, double eps = 1e-12);
Var sum(Var a);
Var mean(Var a);
// d×N -> d×1 average of the columns.
Var mean_cols(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return affine(a, s, 0.0); }

// ---- Pure kernels -------------------------------------------------------

namespace kernels {
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_cols(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor softmax(const Tensor& v);  // over all entries
Tensor normalize_cols(const Tensor& a, double eps = 1e-12);
}  // namespace kernels

// ---- Gradient verification ---------------------------------------------

// Objective over a list of parameter tensors. When grads is non-null it must
// be filled with the analytic gradient (same shapes as params).
using Objective =
    std::function<double(std::span<const Tensor> params, std::vector<Tensor>* grads)>;

// Max over all entries of |analytic - central| / max(1e-8, |central|).
double finite_diff_check(const Objective& fn, std::vector<Tensor> params, double step);

// Wrap a graph builder as an Objective: the builder receives one trainable
// leaf per parameter and returns a scalar node.
using GraphBuilder = std::function<Var(Tape&, std::span<const Var>)>;
Objective tape_objective(GraphBuilder build);

}  // namespace tsca
