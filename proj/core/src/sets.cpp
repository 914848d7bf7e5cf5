#include "tsca/sets.hpp"

#include <cmath>
#include <string>

#include "tsca/errors.hpp"

namespace tsca {

namespace {

void require_simplex(const Tensor& w, const char* what) {
  double total = 0.0;
  for (double v : w.data()) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ContractError(std::string(what) + ": weights must be finite and nonnegative");
    }
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ContractError(std::string(what) + ": weights sum to " + std::to_string(total));
  }
}

}  // namespace

void DiscreteDistribution::validate() const {
  if (points.cols() == 0) throw ContractError("distribution has no support points");
  if (weights.rows() != points.cols() || weights.cols() != 1) {
    throw ContractError("distribution weights do not match point count");
  }
  if (!points.all_finite()) throw ContractError("distribution has non-finite points");
  require_simplex(weights, "distribution");
}

FusionWeights FusionWeights::zeros(std::size_t dim, std::size_t heads) {
  return {Tensor(dim, dim), Tensor(dim, dim), Tensor(dim, dim), Tensor(dim, dim), heads};
}

AdapterWeights AdapterWeights::identity(std::size_t dim) {
  return {Tensor::identity(dim), Tensor(dim, 1), Tensor::identity(dim), Tensor(dim, 1)};
}

void TriSet::validate() const {
  patches.validate();
  compositions.validate();
  primitives.validate();
  require_simplex(beta_state, "beta_state");
  require_simplex(beta_object, "beta_object");
  if (num_states != beta_state.rows()) throw ContractError("num_states disagrees with beta_state");
  if (primitives.size() != beta_state.rows() + beta_object.rows()) {
    throw ContractError("primitive set must hold |S|+|O| points");
  }
  if (gt_composition >= compositions.size() || gt_state >= beta_state.rows() ||
      gt_object >= beta_object.rows()) {
    throw ContractError("tri-set ground-truth index out of range");
  }
}

TriSet evaluate(const TriSetNode& n) {
  TriSet t;
  t.patches = n.patches.evaluate();
  t.compositions = n.compositions.evaluate();
  t.primitives = n.primitives.evaluate();
  t.beta_state = n.beta_state.value();
  t.beta_object = n.beta_object.value();
  t.cls_comp = n.cls_comp.value();
  t.cls_state = n.cls_state.value();
  t.cls_object = n.cls_object.value();
  t.gt_composition = n.gt_composition;
  t.gt_state = n.gt_state;
  t.gt_object = n.gt_object;
  t.num_states = n.num_states;
  return t;
}

FusionNodes bind(Tape& tape, const FusionWeights& w, bool trainable) {
  auto make = [&](const Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  return {make(w.query), make(w.key), make(w.value), make(w.output), w.heads};
}

AdapterNodes bind(Tape& tape, const AdapterWeights& w, bool trainable) {
  auto make = [&](const Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  return {make(w.state_weight), make(w.state_bias), make(w.object_weight), make(w.object_bias)};
}

// ---- graph form ----------------------------------------------------------

DistributionNode build_patch_set(Var patch_embeddings) {
  const std::size_t n = patch_embeddings.cols();
  if (n == 0) throw EmptyInputError("patch set needs at least one patch");
  Var weights = patch_embeddings.tape->constant(Tensor(n, 1, 1.0 / static_cast<double>(n)));
  return {patch_embeddings, weights};
}

Var cross_attention(const FusionNodes& fusion, Var queries, Var keys, Var values) {
  const std::size_t dim = queries.rows();
  if (keys.rows() != dim || values.rows() != dim) {
    throw ContractError("cross_attention: queries, keys and values must share dimension");
  }
  if (keys.cols() != values.cols()) {
    throw ContractError("cross_attention: keys and values must have equal count");
  }
  if (fusion.heads == 0 || dim % fusion.heads != 0) {
    throw ContractError("cross_attention: heads must divide the embedding dimension");
  }
  if (fusion.query.rows() != dim || fusion.query.cols() != dim) {
    throw ContractError("cross_attention: projection shape does not match embedding dimension");
  }
  const std::size_t head_dim = dim / fusion.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Var q = matmul(fusion.query, queries);
  Var k = matmul(fusion.key, keys);
  Var v = matmul(fusion.value, values);

  Var merged{};
  for (std::size_t h = 0; h < fusion.heads; ++h) {
    const std::size_t r0 = h * head_dim;
    const std::size_t r1 = r0 + head_dim;
    Var qh = fusion.heads == 1 ? q : slice_rows(q, r0, r1);
    Var kh = fusion.heads == 1 ? k : slice_rows(k, r0, r1);
    Var vh = fusion.heads == 1 ? v : slice_rows(v, r0, r1);
    Var attn = softmax_rows(affine(matmul(transpose(qh), kh), scale, 0.0));  // M×N
    Var head = matmul(vh, transpose(attn));                                    // dh×M
    merged = h == 0 ? head : concat_rows(merged, head);
  }
  return matmul(fusion.output, merged) + queries;
}

CompositionSetNode build_composition_set(Var y_in, const DistributionNode& patches, Var cls_comp,
                                         const FusionNodes& fusion) {
  if (y_in.cols() == 0) throw EmptyInputError("composition set needs at least one composition");
  Var y = cross_attention(fusion, y_in, patches.points, patches.points);
  Var alpha = softmax_cols(matmul(transpose(y), cls_comp));
  return {{y, alpha}};
}

AdaptedFeatures adapt_visual(const AdapterNodes& adapter, Var cls_comp) {
  return {add_bias(matmul(adapter.state_weight, cls_comp), adapter.state_bias),
          add_bias(matmul(adapter.object_weight, cls_comp), adapter.object_bias)};
}

PrimitiveSetNode build_primitive_set(Var z_state_in, Var z_object_in,
                                     const DistributionNode& patches, Var cls_state,
                                     Var cls_object, const FusionNodes& fusion,
                                     PrimitiveWeighting weighting) {
  if (z_state_in.cols() == 0 || z_object_in.cols() == 0) {
    throw EmptyInputError("primitive set needs at least one state and one object");
  }
  // Primitive weights come from the pre-fusion text embeddings.
  Var beta_state = softmax_cols(matmul(transpose(z_state_in), cls_state));
  Var beta_object = softmax_cols(matmul(transpose(z_object_in), cls_object));

  Var z_in = concat_cols(z_state_in, z_object_in);
  Var z = cross_attention(fusion, z_in, patches.points, patches.points);

  Var joined = concat_rows(beta_state, beta_object);
  Var beta = weighting == PrimitiveWeighting::kSoftmaxOfConcat ? softmax_cols(joined)
                                                               : affine(joined, 0.5, 0.0);
  return {{z, beta}, beta_state, beta_object};
}

// ---- value form ----------------------------------------------------------

DiscreteDistribution build_patch_set(const Tensor& patch_embeddings) {
  const std::size_t n = patch_embeddings.cols();
  if (n == 0) throw EmptyInputError("patch set needs at least one patch");
  return {patch_embeddings, Tensor(n, 1, 1.0 / static_cast<double>(n))};
}

Tensor cross_attention(const FusionWeights& fusion, const Tensor& queries, const Tensor& keys,
                       const Tensor& values) {
  Tape tape;
  FusionNodes f = bind(tape, fusion);
  return cross_attention(f, tape.constant(queries), tape.constant(keys), tape.constant(values))
      .value();
}

DiscreteDistribution build_composition_set(const Tensor& y_in, const DiscreteDistribution& patches,
                                           const Tensor& cls_comp, const FusionWeights& fusion) {
  Tape tape;
  DistributionNode p{tape.constant(patches.points), tape.constant(patches.weights)};
  return build_composition_set(tape.constant(y_in), p, tape.constant(cls_comp), bind(tape, fusion))
      .set.evaluate();
}

AdaptedValues adapt_visual(const AdapterWeights& adapter, const Tensor& cls_comp) {
  Tape tape;
  AdaptedFeatures f = adapt_visual(bind(tape, adapter), tape.constant(cls_comp));
  return {f.cls_state.value(), f.cls_object.value()};
}

PrimitiveSetValue build_primitive_set(const Tensor& z_state_in, const Tensor& z_object_in,
                                      const DiscreteDistribution& patches, const Tensor& cls_state,
                                      const Tensor& cls_object, const FusionWeights& fusion,
                                      PrimitiveWeighting weighting) {
  Tape tape;
  DistributionNode p{tape.constant(patches.points), tape.constant(patches.weights)};
  PrimitiveSetNode n =
      build_primitive_set(tape.constant(z_state_in), tape.constant(z_object_in), p,
                          tape.constant(cls_state), tape.constant(cls_object), bind(tape, fusion),
                          weighting);
  return {n.set.evaluate(), n.beta_state.value(), n.beta_object.value()};
}

}  // namespace tsca
