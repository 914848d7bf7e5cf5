#pragma once

// Per-image discrete distributions: patches (P1), compositions (P2) and
// primitives (P3). Each builder has a graph form operating on tape nodes and a
// value form for direct use.

#include <cstddef>

#include "tsca/diffcore.hpp"
#include "tsca/tensor.hpp"

namespace tsca {

/// Weighted point cloud. Columns of `points` (d×n) are the support; `weights`
/// is an n×1 simplex vector.
struct DiscreteDistribution {
  Tensor points;
  Tensor weights;

  std::size_t size() const { return points.cols(); }
  /// Throws ContractError unless weights form a simplex (to 1e-9) matching the
  /// point count and all points are finite.
  void validate() const;
};

struct DistributionNode {
  Var points;
  Var weights;

  DiscreteDistribution evaluate() const { return {points.value(), weights.value()}; }
};

/// One cross-attention layer. Projections are d×d; heads must divide d.
struct FusionWeights {
  Tensor query;
  Tensor key;
  Tensor value;
  Tensor output;
  std::size_t heads = 1;

  static FusionWeights zeros(std::size_t dim, std::size_t heads = 1);
};

struct FusionNodes {
  Var query;
  Var key;
  Var value;
  Var output;
  std::size_t heads = 1;
};

/// Two independent affine maps producing state- and object-expert features.
struct AdapterWeights {
  Tensor state_weight;
  Tensor state_bias;
  Tensor object_weight;
  Tensor object_bias;

  static AdapterWeights identity(std::size_t dim);
};

struct AdapterNodes {
  Var state_weight;
  Var state_bias;
  Var object_weight;
  Var object_bias;
};

enum class PrimitiveWeighting {
  kSoftmaxOfConcat,       // softmax(beta_s ⊕ beta_o)
  kRenormalizedConcat,    // (beta_s ⊕ beta_o) / 2
};

struct CompositionSetNode {
  DistributionNode set;  // weights are alpha
};

struct PrimitiveSetNode {
  DistributionNode set;  // K = |S| + |O| points, states first
  Var beta_state;
  Var beta_object;
};

struct AdaptedFeatures {
  Var cls_state;
  Var cls_object;
};

/// Graph form of a full tri-set.
struct TriSetNode {
  DistributionNode patches;
  DistributionNode compositions;
  DistributionNode primitives;
  Var beta_state;
  Var beta_object;
  Var cls_comp;
  Var cls_state;
  Var cls_object;
  std::size_t gt_composition = 0;
  std::size_t gt_state = 0;
  std::size_t gt_object = 0;
  std::size_t num_states = 0;
};

/// Value form of a tri-set; immutable once built.
struct TriSet {
  DiscreteDistribution patches;
  DiscreteDistribution compositions;
  DiscreteDistribution primitives;
  Tensor beta_state;
  Tensor beta_object;
  Tensor cls_comp;
  Tensor cls_state;
  Tensor cls_object;
  std::size_t gt_composition = 0;
  std::size_t gt_state = 0;
  std::size_t gt_object = 0;
  std::size_t num_states = 0;

  /// Checks every invariant: simplex weights, P3 size |S|+|O|, label ranges.
  void validate() const;
};

TriSet evaluate(const TriSetNode& node);

FusionNodes bind(Tape& tape, const FusionWeights& w, bool trainable = false);
AdapterNodes bind(Tape& tape, const AdapterWeights& w, bool trainable = false);

// ---- graph form ----------------------------------------------------------

DistributionNode build_patch_set(Var patch_embeddings);
/// Cross-Att(queries, keys, values) + queries.
Var cross_attention(const FusionNodes& fusion, Var queries, Var keys, Var values);
CompositionSetNode build_composition_set(Var y_in, const DistributionNode& patches, Var cls_comp,
                                         const FusionNodes& fusion);
AdaptedFeatures adapt_visual(const AdapterNodes& adapter, Var cls_comp);
PrimitiveSetNode build_primitive_set(Var z_state_in, Var z_object_in,
                                     const DistributionNode& patches, Var cls_state,
                                     Var cls_object, const FusionNodes& fusion,
                                     PrimitiveWeighting weighting = PrimitiveWeighting::kSoftmaxOfConcat);

// ---- value form ----------------------------------------------------------

DiscreteDistribution build_patch_set(const Tensor& patch_embeddings);
Tensor cross_attention(const FusionWeights& fusion, const Tensor& queries, const Tensor& keys,
                       const Tensor& values);
DiscreteDistribution build_composition_set(const Tensor& y_in, const DiscreteDistribution& patches,
                                           const Tensor& cls_comp, const FusionWeights& fusion);

struct AdaptedValues {
  Tensor cls_state;
  Tensor cls_object;
};
AdaptedValues adapt_visual(const AdapterWeights& adapter, const Tensor& cls_comp);

struct PrimitiveSetValue {
  DiscreteDistribution set;
  Tensor beta_state;
  Tensor beta_object;
};
PrimitiveSetValue build_primitive_set(const Tensor& z_state_in, const Tensor& z_object_in,
                                      const DiscreteDistribution& patches, const Tensor& cls_state,
                                      const Tensor& cls_object, const FusionWeights& fusion,
                                      PrimitiveWeighting weighting = PrimitiveWeighting::kSoftmaxOfConcat);

}  // namespace tsca
