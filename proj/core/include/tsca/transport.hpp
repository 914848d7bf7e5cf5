#pragma once

// Conditional transport between discrete distributions.
//
// Plans are softmax-defined: the forward plan from P (weights theta) to Q
// (weights alpha) is
//
//   t[n][m] = theta[n] * alpha[m] exp(s[n][m]) / sum_m' alpha[m'] exp(s[n][m'])
//
// with s = <x_n, y_m> / exp(psi) on L2-normalized points, so row sums equal
// theta by construction. Cost is cosine distance 1 - cos(x_n, y_m).

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tsca/composition_space.hpp"
#include "tsca/diffcore.hpp"
#include "tsca/sets.hpp"
#include "tsca/tensor.hpp"

namespace tsca {

/// Log-scale temperature; similarities are divided by exp(psi).
struct Temperature {
  double psi = 0.0;
};

/// joint is n×m with row sums equal to source_marginal; conditional is the
/// row-stochastic form joint[i] / source_marginal[i].
struct TransportPlan {
  Tensor joint;
  Tensor source_marginal;
  Tensor conditional;

  void validate(double tol = 1e-9) const;
};

struct PlanNode {
  Var joint;
  Var source_marginal;
  Var conditional;

  TransportPlan evaluate() const {
    return {joint.value(), source_marginal.value(), conditional.value()};
  }
};

struct CtNode {
  Var distance;
  PlanNode forward;   // P -> Q
  PlanNode backward;  // Q -> P
};

struct TotalCtNode {
  Var total;
  CtNode patch_comp;  // CT(P1, P2)
  CtNode patch_prim;  // CT(P1, P3)
  CtNode comp_prim;   // CT(P2, P3)
};

/// One temperature node per CT pair. All three alias the same node when the
/// temperature is shared.
struct TemperatureNodes {
  Var patch_comp;
  Var patch_prim;
  Var comp_prim;

  static TemperatureNodes shared(Var psi) { return {psi, psi, psi}; }
};

// ---- graph form ----------------------------------------------------------

Var cost_matrix(Var x, Var y);
Var similarity_matrix(Var x, Var y, Var psi);
PlanNode forward_plan(Var theta, Var alpha, Var sim);
PlanNode backward_plan(Var theta, Var alpha, Var sim);
CtNode ct_distance(const DistributionNode& p, const DistributionNode& q, Var psi);
TotalCtNode total_ct(const TriSetNode& tri, const TemperatureNodes& temps);
/// conditional(2->1) · conditional(1->3) · conditional(3->2); M×M, row-stochastic.
Var cycle_matrix(const PlanNode& plan_2to1, const PlanNode& plan_1to3, const PlanNode& plan_3to2);
/// sum_j |t22[gt][j] - I[gt][j]|.
Var cycle_loss(Var t22, std::size_t gt);

// ---- value form ----------------------------------------------------------

Tensor cost_matrix(const Tensor& x, const Tensor& y);
Tensor similarity_matrix(const Tensor& x, const Tensor& y, Temperature temp);
TransportPlan forward_plan(const Tensor& theta, const Tensor& alpha, const Tensor& sim);
TransportPlan backward_plan(const Tensor& theta, const Tensor& alpha, const Tensor& sim);

struct CtResult {
  double distance = 0.0;
  TransportPlan forward;
  TransportPlan backward;
};
CtResult ct_distance(const DiscreteDistribution& p, const DiscreteDistribution& q, Temperature temp);

struct TotalCtResult {
  double total = 0.0;
  CtResult patch_comp;
  CtResult patch_prim;
  CtResult comp_prim;
};
TotalCtResult total_ct(const TriSet& tri, Temperature temp);

Tensor cycle_matrix(const TransportPlan& plan_2to1, const TransportPlan& plan_1to3,
                    const TransportPlan& plan_3to2);
double cycle_loss(const Tensor& t22, std::size_t gt);

// ---- open-world feasibility filter --------------------------------------

/// Score per composition c=(s,o) in `pairs`:
///   cond_fwd[c][s] * cond_fwd[c][|S|+o] + cond_bwd[s][c] * cond_bwd[|S|+o][c]
/// where cond_fwd is the composition->primitive conditional plan (C×K) and
/// cond_bwd the primitive->composition one (K×C).
std::vector<double> feasibility_scores(const TransportPlan& comp_to_prim,
                                       const TransportPlan& prim_to_comp,
                                       const std::vector<Pair>& pairs, std::size_t num_states);

enum class FilterRule {
  kKeepAtLeast,  // keep score >= T (default)
  kKeepBelow,    // keep score < T
};

/// Either an absolute threshold or a quantile in [0, 1] of the scores.
struct FilterThreshold {
  std::optional<double> absolute;
  std::optional<double> quantile;

  static FilterThreshold at(double t) { return {t, std::nullopt}; }
  static FilterThreshold at_quantile(double q) { return {std::nullopt, q}; }
};

/// Resolve a quantile into a threshold: with k = floor(q * n), the k lowest
/// scores fall below the returned value. q = 0 gives -inf, q = 1 gives +inf.
double quantile_threshold(const std::vector<double>& scores, double q);

struct FilterResult {
  std::vector<std::size_t> kept;  // indices into the scored candidate list
  double threshold = 0.0;
};

/// `seen` is parallel to `scores`; with keep_seen those candidates always survive.
FilterResult filter_compositions(const std::vector<double>& scores, const std::vector<bool>& seen,
                                 FilterThreshold threshold, bool keep_seen = true,
                                 FilterRule rule = FilterRule::kKeepAtLeast);

// ---- plan export ---------------------------------------------------------

/// CSV: first line "rows,cols", then one row per line, values printed with
/// round-trip precision.
void write_matrix_csv(std::ostream& os, const Tensor& m);
Tensor read_matrix_csv(std::istream& is);
/// 8-bit binary PGM (P5), min-max normalized; a constant matrix maps to 0.
void write_matrix_pgm(std::ostream& os, const Tensor& m);

}  // namespace tsca
