#include "tsca/transport.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

#include "tsca/errors.hpp"

namespace tsca {

void TransportPlan::validate(double tol) const {
  if (joint.rows() != source_marginal.rows() || !joint.same_shape(conditional)) {
    throw ContractError("transport plan: inconsistent shapes");
  }
  for (std::size_t i = 0; i < joint.rows(); ++i) {
    double joint_sum = 0.0;
    double cond_sum = 0.0;
    for (std::size_t j = 0; j < joint.cols(); ++j) {
      if (joint(i, j) < 0.0 || conditional(i, j) < 0.0) {
        throw ContractError("transport plan: negative entry");
      }
      joint_sum += joint(i, j);
      cond_sum += conditional(i, j);
    }
    if (std::abs(joint_sum - source_marginal[i]) > tol) {
      throw ContractError("transport plan: joint row sum differs from marginal");
    }
    if (std::abs(cond_sum - 1.0) > tol) {
      throw ContractError("transport plan: conditional row is not stochastic");
    }
  }
}

// ---- graph form ----------------------------------------------------------

namespace {

// Cosine Gram matrix and the derived cost, shared by cost and similarity.
struct Gram {
  Var cosine;
  Var cost;
};

Gram cosine_gram(Var x, Var y) {
  if (x.rows() != y.rows()) throw ContractError("cost_matrix: point dimensions differ");
  Var cosine = matmul(transpose(normalize_cols(x)), normalize_cols(y));
  return {cosine, affine(cosine, -1.0, 1.0)};
}

Var inverse_temperature(Var psi) { return exp(affine(psi, -1.0, 0.0)); }

}  // namespace

Var cost_matrix(Var x, Var y) { return cosine_gram(x, y).cost; }

Var similarity_matrix(Var x, Var y, Var psi) {
  return mul_scalar(matmul(transpose(x), y), inverse_temperature(psi));
}

PlanNode forward_plan(Var theta, Var alpha, Var sim) {
  if (theta.rows() != sim.rows() || alpha.rows() != sim.cols()) {
    throw ContractError("forward_plan: marginals do not match similarity shape");
  }
  Var conditional = weighted_softmax_rows(sim, alpha);
  return {scale_rows(conditional, theta), theta, conditional};
}

PlanNode backward_plan(Var theta, Var alpha, Var sim) {
  return forward_plan(alpha, theta, transpose(sim));
}

CtNode ct_distance(const DistributionNode& p, const DistributionNode& q, Var psi) {
  if (p.points.cols() == 0 || q.points.cols() == 0) {
    throw EmptyInputError("ct_distance: both distributions must be nonempty");
  }
  Gram g = cosine_gram(p.points, q.points);
  Var sim = mul_scalar(g.cosine, inverse_temperature(psi));
  PlanNode fwd = forward_plan(p.weights, q.weights, sim);
  PlanNode bwd = backward_plan(p.weights, q.weights, sim);
  Var distance = sum(fwd.joint * g.cost) + sum(bwd.joint * transpose(g.cost));
  return {distance, fwd, bwd};
}

TotalCtNode total_ct(const TriSetNode& tri, const TemperatureNodes& temps) {
  CtNode pc = ct_distance(tri.patches, tri.compositions, temps.patch_comp);
  CtNode pp = ct_distance(tri.patches, tri.primitives, temps.patch_prim);
  CtNode cp = ct_distance(tri.compositions, tri.primitives, temps.comp_prim);
  return {pc.distance + pp.distance + cp.distance, pc, pp, cp};
}

Var cycle_matrix(const PlanNode& plan_2to1, const PlanNode& plan_1to3,
                 const PlanNode& plan_3to2) {
  const Var& a = plan_2to1.conditional;
  const Var& b = plan_1to3.conditional;
  const Var& c = plan_3to2.conditional;
  if (a.cols() != b.rows() || b.cols() != c.rows() || c.cols() != a.rows()) {
    throw ContractError("cycle_matrix: plans do not chain M×N · N×K · K×M");
  }
  return matmul(matmul(a, b), c);
}

Var cycle_loss(Var t22, std::size_t gt) {
  if (t22.rows() != t22.cols()) throw ContractError("cycle_loss: matrix must be square");
  if (gt >= t22.rows()) throw ContractError("cycle_loss: ground-truth index out of range");
  Tensor onehot(1, t22.cols());
  onehot[gt] = 1.0;
  return sum(abs(row_of(t22, gt) - t22.tape->constant(std::move(onehot))));
}

// ---- value form ----------------------------------------------------------

Tensor cost_matrix(const Tensor& x, const Tensor& y) {
  Tape tape;
  return cost_matrix(tape.constant(x), tape.constant(y)).value();
}

Tensor similarity_matrix(const Tensor& x, const Tensor& y, Temperature temp) {
  Tape tape;
  return similarity_matrix(tape.constant(x), tape.constant(y),
                           tape.constant(Tensor::scalar(temp.psi)))
      .value();
}

TransportPlan forward_plan(const Tensor& theta, const Tensor& alpha, const Tensor& sim) {
  Tape tape;
  return forward_plan(tape.constant(theta), tape.constant(alpha), tape.constant(sim)).evaluate();
}

TransportPlan backward_plan(const Tensor& theta, const Tensor& alpha, const Tensor& sim) {
  Tape tape;
  return backward_plan(tape.constant(theta), tape.constant(alpha), tape.constant(sim)).evaluate();
}

namespace {

DistributionNode constant_distribution(Tape& tape, const DiscreteDistribution& d) {
  return {tape.constant(d.points), tape.constant(d.weights)};
}

CtResult to_result(const CtNode& n) {
  return {n.distance.value().item(), n.forward.evaluate(), n.backward.evaluate()};
}

}  // namespace

CtResult ct_distance(const DiscreteDistribution& p, const DiscreteDistribution& q,
                     Temperature temp) {
  Tape tape;
  return to_result(ct_distance(constant_distribution(tape, p), constant_distribution(tape, q),
                               tape.constant(Tensor::scalar(temp.psi))));
}

TotalCtResult total_ct(const TriSet& tri, Temperature temp) {
  Tape tape;
  TriSetNode n;
  n.patches = constant_distribution(tape, tri.patches);
  n.compositions = constant_distribution(tape, tri.compositions);
  n.primitives = constant_distribution(tape, tri.primitives);
  TotalCtNode t =
      total_ct(n, TemperatureNodes::shared(tape.constant(Tensor::scalar(temp.psi))));
  return {t.total.value().item(), to_result(t.patch_comp), to_result(t.patch_prim),
          to_result(t.comp_prim)};
}

Tensor cycle_matrix(const TransportPlan& plan_2to1, const TransportPlan& plan_1to3,
                    const TransportPlan& plan_3to2) {
  Tape tape;
  auto node = [&](const TransportPlan& p) {
    return PlanNode{tape.constant(p.joint), tape.constant(p.source_marginal),
                    tape.constant(p.conditional)};
  };
  return cycle_matrix(node(plan_2to1), node(plan_1to3), node(plan_3to2)).value();
}

double cycle_loss(const Tensor& t22, std::size_t gt) {
  Tape tape;
  return cycle_loss(tape.constant(t22), gt).value().item();
}

// ---- filter ----------------------------------------------------------------

std::vector<double> feasibility_scores(const TransportPlan& comp_to_prim,
                                       const TransportPlan& prim_to_comp,
                                       const std::vector<Pair>& pairs, std::size_t num_states) {
  const Tensor& fwd = comp_to_prim.conditional;
  const Tensor& bwd = prim_to_comp.conditional;
  if (fwd.rows() != pairs.size() || bwd.cols() != pairs.size() || fwd.cols() != bwd.rows()) {
    throw ContractError("feasibility_scores: plans do not match the composition list");
  }
  std::vector<double> scores;
  scores.reserve(pairs.size());
  for (std::size_t c = 0; c < pairs.size(); ++c) {
    const std::size_t s = pairs[c].state;
    const std::size_t o = num_states + pairs[c].object;
    if (o >= fwd.cols()) throw ContractError("feasibility_scores: primitive index out of range");
    scores.push_back(fwd(c, s) * fwd(c, o) + bwd(s, c) * bwd(o, c));
  }
  return scores;
}

double quantile_threshold(const std::vector<double>& scores, double q) {
  if (!(q >= 0.0 && q <= 1.0)) throw ContractError("filter quantile must lie in [0, 1]");
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(sorted.size())));
  if (k == 0) return -std::numeric_limits<double>::infinity();
  if (k >= sorted.size()) return std::numeric_limits<double>::infinity();
  return sorted[k];
}

FilterResult filter_compositions(const std::vector<double>& scores, const std::vector<bool>& seen,
                                 FilterThreshold threshold, bool keep_seen, FilterRule rule) {
  if (seen.size() != scores.size()) throw ContractError("filter: seen mask length mismatch");
  FilterResult out;
  if (threshold.quantile) {
    out.threshold = quantile_threshold(scores, *threshold.quantile);
  } else if (threshold.absolute) {
    if (std::isnan(*threshold.absolute)) throw ContractError("filter threshold is NaN");
    out.threshold = *threshold.absolute;
  } else {
    throw ContractError("filter needs a threshold or a quantile");
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pass = rule == FilterRule::kKeepAtLeast ? scores[i] >= out.threshold
                                                       : scores[i] < out.threshold;
    if (pass || (keep_seen && seen[i])) out.kept.push_back(i);
  }
  if (out.kept.empty()) {
    throw ConfigError("filter removed every candidate; use a lower threshold or quantile");
  }
  return out;
}

// ---- export --------------------------------------------------------------

void write_matrix_csv(std::ostream& os, const Tensor& m) {
  os << m.rows() << ',' << m.cols() << '\n';
  std::ostringstream line;
  line.precision(17);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    line.str({});
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j > 0) line << ',';
      line << m(i, j);
    }
    os << line.str() << '\n';
  }
}

Tensor read_matrix_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("matrix csv: missing header");
  std::size_t rows = 0;
  std::size_t cols = 0;
  char comma = 0;
  std::istringstream header(line);
  if (!(header >> rows >> comma >> cols) || comma != ',') {
    throw ParseError("matrix csv: malformed header '" + line + "'");
  }
  Tensor m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!std::getline(is, line)) throw ParseError("matrix csv: missing row " + std::to_string(i));
    std::istringstream fields(line);
    std::string cell;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::getline(fields, cell, ',')) {
        throw ParseError("matrix csv: row " + std::to_string(i) + " is short");
      }
      try {
        m(i, j) = std::stod(cell);
      } catch (const std::exception&) {
        throw ParseError("matrix csv: bad number '" + cell + "'");
      }
    }
  }
  return m;
}

void write_matrix_pgm(std::ostream& os, const Tensor& m) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (double v : m.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi - lo;
  os << "P5\n" << m.cols() << ' ' << m.rows() << "\n255\n";
  for (double v : m.data()) {
    const double unit = span > 0.0 ? (v - lo) / span : 0.0;
    os.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(unit * 255.0))));
  }
}

}  // namespace tsca
