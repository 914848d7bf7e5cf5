#include "tsca/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>

#include "tsca/errors.hpp"

namespace tsca {

namespace {

using Shape = std::array<std::size_t, 2>;

constexpr double kMaxExponent = 700.0;

// max_j (s_ij + log w_j) over positive weights, so the row normalizer is >= 1.
double weighted_shift(const Tensor& s, const Tensor& w, std::size_t i) {
  double shift = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < s.cols(); ++j) {
    if (w[j] > 0.0) shift = std::max(shift, s(i, j) + std::log(w[j]));
  }
  if (!std::isfinite(shift)) throw NumericError("weighted_softmax_rows: target weights carry no mass");
  return shift;
}

std::string shape_str(Shape s) {
  std::ostringstream os;
  os << s[0] << 'x' << s[1];
  return os.str();
}

[[noreturn]] void shape_error(Op op, const std::string& detail) {
  throw ContractError(std::string(op_name(op)) + ": " + detail);
}

void require_same(Op op, Shape a, Shape b) {
  if (a != b) shape_error(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Shape infer_shape(Op op, const std::vector<Shape>& in, const OpAttr& attr) {
  switch (op) {
    case Op::kLeaf:
      break;
    case Op::kMatmul:
      if (in[0][1] != in[1][0]) {
        shape_error(op, "inner dimensions " + shape_str(in[0]) + " * " + shape_str(in[1]));
      }
      return {in[0][0], in[1][1]};
    case Op::kTranspose:
      return {in[0][1], in[0][0]};
    case Op::kConcatCols:
      if (in[0][0] != in[1][0]) shape_error(op, "row counts differ");
      return {in[0][0], in[0][1] + in[1][1]};
    case Op::kConcatRows:
      if (in[0][1] != in[1][1]) shape_error(op, "column counts differ");
      return {in[0][0] + in[1][0], in[0][1]};
    case Op::kSlice:
      if (attr.r0 >= attr.r1 || attr.c0 >= attr.c1 || attr.r1 > in[0][0] || attr.c1 > in[0][1]) {
        shape_error(op, "range out of bounds for " + shape_str(in[0]));
      }
      return {attr.r1 - attr.r0, attr.c1 - attr.c0};
    case Op::kGatherCols:
      for (std::size_t idx : attr.indices) {
        if (idx >= in[0][1]) shape_error(op, "column index out of range");
      }
      return {in[0][0], attr.indices.size()};
    case Op::kWeightedSoftmaxRows:
      if (in[1] != Shape{in[0][1], 1}) shape_error(op, "weights must be m x 1");
      return in[0];
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
      require_same(op, in[0], in[1]);
      return in[0];
    case Op::kMulScalar:
      if (in[1] != Shape{1, 1}) shape_error(op, "scalar operand must be 1x1");
      return in[0];
    case Op::kScaleRows:
    case Op::kAddBias:
      if (in[1] != Shape{in[0][0], 1}) shape_error(op, "vector operand must be n x 1");
      return in[0];
    case Op::kSum:
    case Op::kMean:
      return {1, 1};
    case Op::kMeanCols:
      if (in[0][1] == 0) shape_error(op, "no columns");
      return {in[0][0], 1};
    case Op::kSoftmaxCols:
    case Op::kSoftmaxRows:
    case Op::kExp:
    case Op::kLog:
    case Op::kAbs:
    case Op::kAffine:
    case Op::kNormalizeCols:
      return in[0];
  }
  return in.empty() ? Shape{} : in[0];
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kConcatCols: return "concat_cols";
    case Op::kConcatRows: return "concat_rows";
    case Op::kSlice: return "slice";
    case Op::kGatherCols: return "gather_cols";
    case Op::kSoftmaxCols: return "softmax_cols";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kWeightedSoftmaxRows: return "weighted_softmax_rows";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kAbs: return "abs";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kAffine: return "affine";
    case Op::kMulScalar: return "mul_scalar";
    case Op::kScaleRows: return "scale_rows";
    case Op::kAddBias: return "add_bias";
    case Op::kNormalizeCols: return "normalize_cols";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kMeanCols: return "mean_cols";
  }
  return "unknown";
}

// ---- kernels ------------------------------------------------------------

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ContractError("matmul: inner dimensions differ");
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out(i, j) = std::exp(a(i, j) - mx);
      z += out(i, j);
    }
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) /= z;
  }
  return out;
}

Tensor softmax_cols(const Tensor& a) { return transpose(softmax_rows(transpose(a))); }

Tensor softmax(const Tensor& v) {
  Tensor flat(1, v.size(), v.values());
  Tensor s = softmax_rows(flat);
  return Tensor(v.rows(), v.cols(), s.values());
}

Tensor normalize_cols(const Tensor& a, double eps) {
  Tensor out(a.rows(), a.cols());
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double n2 = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) n2 += a(i, j) * a(i, j);
    const double denom = std::sqrt(n2) + eps;
    for (std::size_t i = 0; i < a.rows(); ++i) out(i, j) = a(i, j) / denom;
  }
  return out;
}

}  // namespace kernels

// ---- Var / Tape -----------------------------------------------------------

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::leaf(Tensor value, std::string name) {
  Node n;
  n.shape = value.shape();
  n.value = std::move(value);
  n.trainable = true;
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Var v = leaf(std::move(value));
  nodes_[v.id].trainable = false;
  return v;
}

Var Tape::placeholder(std::size_t rows, std::size_t cols, std::string name) {
  Node n;
  n.shape = {rows, cols};
  n.trainable = true;
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::bind(Var leaf, Tensor value) {
  Node& n = nodes_.at(leaf.id);
  if (n.op != Op::kLeaf) throw ContractError("bind: node is not a leaf");
  if (value.shape() != n.shape) {
    throw ContractError("bind: expected " + shape_str(n.shape) + ", got " +
                        shape_str(value.shape()));
  }
  n.value = std::move(value);
}

const Tensor& Tape::value(NodeId id) const {
  const Node& n = nodes_.at(id);
  if (!n.value) {
    throw ConfigError("node " + std::to_string(id) + " (" + op_name(n.op) +
                      ") has no value; bind its leaves and call forward_eval");
  }
  return *n.value;
}

Var Tape::record(Op op, std::vector<NodeId> inputs, OpAttr attr) {
  std::vector<Shape> shapes;
  shapes.reserve(inputs.size());
  bool ready = true;
  for (NodeId in : inputs) {
    const Node& src = nodes_.at(in);
    shapes.push_back(src.shape);
    ready = ready && src.value.has_value();
  }
  Node n;
  n.op = op;
  n.shape = infer_shape(op, shapes, attr);
  n.inputs = std::move(inputs);
  n.attr = std::move(attr);
  if (ready) n.value = compute(n);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

std::vector<bool> Tape::reachable_from(NodeId root) const {
  std::vector<bool> seen(root + 1, false);
  seen[root] = true;
  for (NodeId i = root + 1; i-- > 0;) {
    if (!seen[i]) continue;
    for (NodeId in : nodes_[i].inputs) seen[in] = true;
  }
  return seen;
}

const Tensor& Tape::forward_eval(Var root) {
  if (root.id >= nodes_.size()) throw ContractError("forward_eval: unknown node");
  const auto live = reachable_from(root.id);
  for (NodeId i = 0; i <= root.id; ++i) {
    if (!live[i]) continue;
    Node& n = nodes_[i];
    if (n.op == Op::kLeaf) {
      if (!n.value) {
        throw ConfigError("forward_eval: leaf " + std::to_string(i) +
                          (n.name.empty() ? "" : " '" + n.name + "'") + " is unbound");
      }
      continue;
    }
    n.value = compute(n);
  }
  return *nodes_[root.id].value;
}

Tensor Tape::compute(const Node& node) const {
  auto in = [&](std::size_t k) -> const Tensor& { return *nodes_[node.inputs[k]].value; };
  const OpAttr& at = node.attr;
  Tensor out;
  switch (node.op) {
    case Op::kLeaf:
      throw ContractError("compute called on a leaf");
    case Op::kMatmul:
      out = kernels::matmul(in(0), in(1));
      break;
    case Op::kTranspose:
      out = kernels::transpose(in(0));
      break;
    case Op::kConcatCols: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      out = Tensor(a.rows(), a.cols() + b.cols());
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
        for (std::size_t j = 0; j < b.cols(); ++j) out(i, a.cols() + j) = b(i, j);
      }
      break;
    }
    case Op::kConcatRows: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      out = Tensor(a.rows() + b.rows(), a.cols());
      std::copy(a.data().begin(), a.data().end(), out.data().begin());
      std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
      break;
    }
    case Op::kSlice: {
      const Tensor& a = in(0);
      out = Tensor(at.r1 - at.r0, at.c1 - at.c0);
      for (std::size_t i = at.r0; i < at.r1; ++i) {
        for (std::size_t j = at.c0; j < at.c1; ++j) out(i - at.r0, j - at.c0) = a(i, j);
      }
      break;
    }
    case Op::kGatherCols: {
      const Tensor& a = in(0);
      out = Tensor(a.rows(), at.indices.size());
      for (std::size_t k = 0; k < at.indices.size(); ++k) {
        for (std::size_t i = 0; i < a.rows(); ++i) out(i, k) = a(i, at.indices[k]);
      }
      break;
    }
    case Op::kSoftmaxCols:
      out = kernels::softmax_cols(in(0));
      break;
    case Op::kSoftmaxRows:
      out = kernels::softmax_rows(in(0));
      break;
    case Op::kWeightedSoftmaxRows: {
      const Tensor& s = in(0);
      const Tensor& w = in(1);
      out = Tensor(s.rows(), s.cols());
      for (std::size_t i = 0; i < s.rows(); ++i) {
        const double shift = weighted_shift(s, w, i);
        double z = 0.0;
        for (std::size_t j = 0; j < s.cols(); ++j) {
          out(i, j) = w[j] > 0.0 ? std::exp(s(i, j) + std::log(w[j]) - shift) : 0.0;
          z += out(i, j);
        }
        for (std::size_t j = 0; j < s.cols(); ++j) out(i, j) /= z;
      }
      break;
    }
    case Op::kExp:
      out = in(0);
      for (double& v : out.data()) v = std::exp(v);
      break;
    case Op::kLog:
      out = in(0);
      for (double& v : out.data()) v = std::log(std::max(v, at.a));
      break;
    case Op::kAbs:
      out = in(0);
      for (double& v : out.data()) v = std::abs(v);
      break;
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      out = in(0);
      const Tensor& b = in(1);
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (node.op == Op::kAdd) out[i] += b[i];
        else if (node.op == Op::kSub) out[i] -= b[i];
        else out[i] *= b[i];
      }
      break;
    }
    case Op::kAffine:
      out = in(0);
      for (double& v : out.data()) v = at.a * v + at.b;
      break;
    case Op::kMulScalar: {
      out = in(0);
      const double s = in(1).item();
      for (double& v : out.data()) v *= s;
      break;
    }
    case Op::kScaleRows:
    case Op::kAddBias: {
      out = in(0);
      const Tensor& v = in(1);
      for (std::size_t i = 0; i < out.rows(); ++i) {
        for (std::size_t j = 0; j < out.cols(); ++j) {
          if (node.op == Op::kScaleRows) out(i, j) *= v[i];
          else out(i, j) += v[i];
        }
      }
      break;
    }
    case Op::kNormalizeCols: {
      const Tensor& a = in(0);
      for (std::size_t j = 0; j < a.cols(); ++j) {
        double n2 = 0.0;
        for (std::size_t i = 0; i < a.rows(); ++i) n2 += a(i, j) * a(i, j);
        if (n2 == 0.0) warn("normalize_cols: zero vector in column " + std::to_string(j));
      }
      out = kernels::normalize_cols(a, at.a);
      break;
    }
    case Op::kSum:
    case Op::kMean: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      if (node.op == Op::kMean) s /= static_cast<double>(in(0).size());
      out = Tensor::scalar(s);
      break;
    }
    case Op::kMeanCols: {
      const Tensor& a = in(0);
      out = Tensor(a.rows(), 1);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
        out[i] = s / static_cast<double>(a.cols());
      }
      break;
    }
  }
  if (!out.all_finite()) {
    throw NumericError(std::string("non-finite value produced by op '") + op_name(node.op) + "'");
  }
  return out;
}

void Tape::accumulate(const Node& node, const Tensor& out, const Tensor& g,
                      std::vector<Tensor>& adj) const {
  auto in = [&](std::size_t k) -> const Tensor& { return *nodes_[node.inputs[k]].value; };
  auto acc = [&](std::size_t k) -> Tensor& {
    Tensor& t = adj[node.inputs[k]];
    if (t.empty()) {
      const Shape s = nodes_[node.inputs[k]].shape;
      t = Tensor(s[0], s[1]);
    }
    return t;
  };
  const OpAttr& at = node.attr;

  switch (node.op) {
    case Op::kLeaf:
      return;
    case Op::kMatmul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      Tensor& da = acc(0);
      Tensor& db = acc(1);
      // da += g b^T ; db += a^T g
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
          const double gij = g(i, j);
          if (gij == 0.0) continue;
          for (std::size_t k = 0; k < a.cols(); ++k) {
            da(i, k) += gij * b(k, j);
            db(k, j) += a(i, k) * gij;
          }
        }
      }
      return;
    }
    case Op::kTranspose: {
      Tensor& da = acc(0);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) da(j, i) += g(i, j);
      }
      return;
    }
    case Op::kConcatCols: {
      Tensor& da = acc(0);
      Tensor& db = acc(1);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < da.cols(); ++j) da(i, j) += g(i, j);
        for (std::size_t j = 0; j < db.cols(); ++j) db(i, j) += g(i, da.cols() + j);
      }
      return;
    }
    case Op::kConcatRows: {
      Tensor& da = acc(0);
      Tensor& db = acc(1);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i];
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[da.size() + i];
      return;
    }
    case Op::kSlice: {
      Tensor& da = acc(0);
      for (std::size_t i = at.r0; i < at.r1; ++i) {
        for (std::size_t j = at.c0; j < at.c1; ++j) da(i, j) += g(i - at.r0, j - at.c0);
      }
      return;
    }
    case Op::kGatherCols: {
      Tensor& da = acc(0);
      for (std::size_t k = 0; k < at.indices.size(); ++k) {
        for (std::size_t i = 0; i < da.rows(); ++i) da(i, at.indices[k]) += g(i, k);
      }
      return;
    }
    case Op::kSoftmaxRows:
    case Op::kWeightedSoftmaxRows: {
      // Both share dL/ds = p (g - <g, p>) per row.
      Tensor& ds = acc(0);
      const bool weighted = node.op == Op::kWeightedSoftmaxRows;
      Tensor* dw = weighted ? &acc(1) : nullptr;
      for (std::size_t i = 0; i < out.rows(); ++i) {
        double gp = 0.0;
        for (std::size_t j = 0; j < out.cols(); ++j) gp += g(i, j) * out(i, j);
        for (std::size_t j = 0; j < out.cols(); ++j) ds(i, j) += out(i, j) * (g(i, j) - gp);
        if (!weighted) continue;
        // dp_ij/dw_j uses q_ij = exp(s_ij) / sum_k w_k exp(s_ik), defined even when w_j = 0.
        const Tensor& s = in(0);
        const Tensor& w = in(1);
        const double shift = weighted_shift(s, w, i);
        double z = 0.0;
        for (std::size_t j = 0; j < s.cols(); ++j) {
          if (w[j] > 0.0) z += std::exp(s(i, j) + std::log(w[j]) - shift);
        }
        for (std::size_t j = 0; j < s.cols(); ++j) {
          // Capped so a zero-weight column never yields inf (its upstream factor is 0).
          const double q = std::exp(std::min(s(i, j) - shift, kMaxExponent)) / z;
          (*dw)[j] += q * (g(i, j) - gp);
        }
      }
      return;
    }
    case Op::kSoftmaxCols: {
      Tensor& da = acc(0);
      for (std::size_t j = 0; j < out.cols(); ++j) {
        double gp = 0.0;
        for (std::size_t i = 0; i < out.rows(); ++i) gp += g(i, j) * out(i, j);
        for (std::size_t i = 0; i < out.rows(); ++i) da(i, j) += out(i, j) * (g(i, j) - gp);
      }
      return;
    }
    case Op::kExp: {
      Tensor& da = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * out[i];
      return;
    }
    case Op::kLog: {
      const Tensor& a = in(0);
      Tensor& da = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (a[i] > at.a) da[i] += g[i] / a[i];
      }
      return;
    }
    case Op::kAbs: {
      const Tensor& a = in(0);
      Tensor& da = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (a[i] > 0.0) da[i] += g[i];
        else if (a[i] < 0.0) da[i] -= g[i];
      }
      return;
    }
    case Op::kAdd:
    case Op::kSub: {
      Tensor& da = acc(0);
      Tensor& db = acc(1);
      const double sign = node.op == Op::kAdd ? 1.0 : -1.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] += g[i];
        db[i] += sign * g[i];
      }
      return;
    }
    case Op::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      Tensor& da = acc(0);
      Tensor& db = acc(1);
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] += g[i] * b[i];
        db[i] += g[i] * a[i];
      }
      return;
    }
    case Op::kAffine: {
      Tensor& da = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += at.a * g[i];
      return;
    }
    case Op::kMulScalar: {
      const Tensor& a = in(0);
      const double s = in(1).item();
      Tensor& da = acc(0);
      double ds = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] += s * g[i];
        ds += g[i] * a[i];
      }
      acc(1)[0] += ds;
      return;
    }
    case Op::kScaleRows: {
      const Tensor& a = in(0);
      const Tensor& v = in(1);
      Tensor& da = acc(0);
      Tensor& dv = acc(1);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
          da(i, j) += g(i, j) * v[i];
          dv[i] += g(i, j) * a(i, j);
        }
      }
      return;
    }
    case Op::kAddBias: {
      Tensor& da = acc(0);
      Tensor& db = acc(1);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) {
          da(i, j) += g(i, j);
          db[i] += g(i, j);
        }
      }
      return;
    }
    case Op::kNormalizeCols: {
      // y = x / (n + eps):  dx = g / (n + eps) - x (x.g) / (n (n + eps)^2)
      const Tensor& a = in(0);
      Tensor& da = acc(0);
      for (std::size_t j = 0; j < a.cols(); ++j) {
        double n2 = 0.0;
        double xg = 0.0;
        for (std::size_t i = 0; i < a.rows(); ++i) {
          n2 += a(i, j) * a(i, j);
          xg += a(i, j) * g(i, j);
        }
        if (n2 == 0.0) continue;
        const double n = std::sqrt(n2);
        const double denom = n + at.a;
        const double coeff = xg / (n * denom * denom);
        for (std::size_t i = 0; i < a.rows(); ++i) da(i, j) += g(i, j) / denom - a(i, j) * coeff;
      }
      return;
    }
    case Op::kSum:
    case Op::kMean: {
      Tensor& da = acc(0);
      double gv = g.item();
      if (node.op == Op::kMean) gv /= static_cast<double>(da.size());
      for (double& v : da.data()) v += gv;
      return;
    }
    case Op::kMeanCols: {
      Tensor& da = acc(0);
      const double inv = 1.0 / static_cast<double>(da.cols());
      for (std::size_t i = 0; i < da.rows(); ++i) {
        for (std::size_t j = 0; j < da.cols(); ++j) da(i, j) += g[i] * inv;
      }
      return;
    }
  }
}

std::map<NodeId, Tensor> Tape::backward_grad(Var loss) {
  if (loss.id >= nodes_.size()) throw ContractError("backward_grad: unknown node");
  const Node& root = nodes_[loss.id];
  if (root.shape != Shape{1, 1}) {
    throw ContractError("backward_grad: loss must be scalar, got " + shape_str(root.shape));
  }
  value(loss.id);  // throws if not evaluated

  std::vector<Tensor> adj(loss.id + 1);
  adj[loss.id] = Tensor::scalar(1.0);
  for (NodeId i = loss.id + 1; i-- > 0;) {
    if (adj[i].empty()) continue;
    const Node& n = nodes_[i];
    if (n.op == Op::kLeaf) continue;
    accumulate(n, *n.value, adj[i], adj);
  }

  std::map<NodeId, Tensor> grads;
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op != Op::kLeaf || !n.trainable) continue;
    if (i < adj.size() && !adj[i].empty()) grads.emplace(i, std::move(adj[i]));
    else grads.emplace(i, Tensor(n.shape[0], n.shape[1]));
  }
  return grads;
}

// ---- builders ------------------------------------------------------------

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ContractError("operands live on different tapes");
  return *a.tape;
}

Var unary(Op op, Var a, OpAttr attr = {}) {
  if (a.tape == nullptr) throw ContractError("operand has no tape");
  return a.tape->record(op, {a.id}, std::move(attr));
}

Var binary(Op op, Var a, Var b, OpAttr attr = {}) {
  return same_tape(a, b).record(op, {a.id, b.id}, std::move(attr));
}

}  // namespace

Var matmul(Var a, Var b) { return binary(Op::kMatmul, a, b); }
Var transpose(Var a) { return unary(Op::kTranspose, a); }
Var concat_cols(Var a, Var b) { return binary(Op::kConcatCols, a, b); }
Var concat_rows(Var a, Var b) { return binary(Op::kConcatRows, a, b); }

Var slice(Var a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  OpAttr at;
  at.r0 = r0;
  at.r1 = r1;
  at.c0 = c0;
  at.c1 = c1;
  return unary(Op::kSlice, a, std::move(at));
}

Var slice_rows(Var a, std::size_t r0, std::size_t r1) { return slice(a, r0, r1, 0, a.cols()); }
Var row_of(Var a, std::size_t r) { return slice(a, r, r + 1, 0, a.cols()); }
Var element(Var a, std::size_t r, std::size_t c) { return slice(a, r, r + 1, c, c + 1); }

Var gather_cols(Var a, std::vector<std::size_t> indices) {
  OpAttr at;
  at.indices = std::move(indices);
  return unary(Op::kGatherCols, a, std::move(at));
}

Var softmax_cols(Var a) { return unary(Op::kSoftmaxCols, a); }
Var softmax_rows(Var a) { return unary(Op::kSoftmaxRows, a); }
Var weighted_softmax_rows(Var s, Var w) { return binary(Op::kWeightedSoftmaxRows, s, w); }
Var exp(Var a) { return unary(Op::kExp, a); }

Var log(Var a, double floor) {
  OpAttr at;
  at.a = floor;
  return unary(Op::kLog, a, std::move(at));
}

Var abs(Var a) { return unary(Op::kAbs, a); }
Var add(Var a, Var b) { return binary(Op::kAdd, a, b); }
Var sub(Var a, Var b) { return binary(Op::kSub, a, b); }
Var mul(Var a, Var b) { return binary(Op::kMul, a, b); }

Var affine(Var a, double scale, double shift) {
  OpAttr at;
  at.a = scale;
  at.b = shift;
  return unary(Op::kAffine, a, std::move(at));
}

Var mul_scalar(Var a, Var s) { return binary(Op::kMulScalar, a, s); }
Var scale_rows(Var a, Var v) { return binary(Op::kScaleRows, a, v); }
Var add_bias(Var a, Var b) { return binary(Op::kAddBias, a, b); }

Var normalize_cols(Var a, double eps) {
  OpAttr at;
  at.a = eps;
  return unary(Op::kNormalizeCols, a, std::move(at));
}

Var sum(Var a) { return unary(Op::kSum, a); }
Var mean(Var a) { return unary(Op::kMean, a); }
Var mean_cols(Var a) { return unary(Op::kMeanCols, a); }

// ---- gradient verification ----------------------------------------------

double finite_diff_check(const Objective& fn, std::vector<Tensor> params, double step) {
  if (!(step > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  std::vector<Tensor> analytic;
  const double base = fn(params, &analytic);
  if (!std::isfinite(base)) throw NumericError("finite_diff_check: objective is not finite");
  if (analytic.size() != params.size()) {
    throw ContractError("finite_diff_check: objective returned wrong gradient count");
  }

  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t k = 0; k < params[p].size(); ++k) {
      const double orig = params[p][k];
      params[p][k] = orig + step;
      const double up = fn(params, nullptr);
      params[p][k] = orig - step;
      const double down = fn(params, nullptr);
      params[p][k] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("finite_diff_check: objective is not finite under perturbation");
      }
      const double central = (up - down) / (2.0 * step);
      const double err = std::abs(analytic[p][k] - central) / std::max(1e-8, std::abs(central));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

Objective tape_objective(GraphBuilder build) {
  return [build = std::move(build)](std::span<const Tensor> params,
                                    std::vector<Tensor>* grads) -> double {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) leaves.push_back(tape.leaf(p));
    Var loss = build(tape, leaves);
    const double value = tape.forward_eval(loss).item();
    if (grads != nullptr) {
      auto g = tape.backward_grad(loss);
      grads->clear();
      for (Var leaf : leaves) grads->push_back(g.at(leaf.id));
    }
    return value;
  };
}

}  // namespace tsca
