#pragma once

// Toy trainable encoders standing in for the vision-language backbone, the
// four loss terms, the training loop and combined inference.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "tsca/composition_space.hpp"
#include "tsca/data.hpp"
#include "tsca/diffcore.hpp"
#include "tsca/sets.hpp"
#include "tsca/tensor.hpp"
#include "tsca/transport.hpp"

namespace tsca {

struct ModelShape {
  std::size_t dim = 16;
  std::size_t raw_dim = 32;
  std::size_t num_states = 4;
  std::size_t num_objects = 4;
  std::size_t heads = 1;
  bool split_temperature = false;  // one psi per CT pair instead of a shared one
};

/// Every trainable tensor. blocks() lists them in checkpoint order.
struct ModelParams {
  Tensor state_table;    // d×|S|
  Tensor object_table;   // d×|O|
  Tensor comp_weight;    // d×2d, applied to state ⊕ object embeddings
  Tensor comp_bias;      // d×1
  Tensor visual_weight;  // d×f
  Tensor visual_bias;    // d×1
  Tensor cls_token;      // d×1
  FusionWeights fusion;
  AdapterWeights adapter;
  Tensor psi;            // 1×1 shared, or 3×1 (patch-comp, patch-prim, comp-prim)

  static ModelParams init(const ModelShape& shape, std::uint64_t seed);

  ModelShape shape() const;
  std::vector<Tensor*> blocks();
  std::vector<const Tensor*> blocks() const;
  std::vector<Tensor> flatten() const;
  void assign(std::span<const Tensor> values);
  Temperature temperature(std::size_t which = 0) const;

  friend bool operator==(const ModelParams& a, const ModelParams& b);
};

struct ModelOptions {
  PrimitiveWeighting primitive_weighting = PrimitiveWeighting::kSoftmaxOfConcat;
};

/// Tape-bound view of ModelParams.
struct ModelNodes {
  Var state_table;
  Var object_table;
  Var comp_weight;
  Var comp_bias;
  Var visual_weight;
  Var visual_bias;
  Var cls_token;
  FusionNodes fusion;
  AdapterNodes adapter;
  Var psi;
  TemperatureNodes temps;

  std::vector<Var> leaves() const;
};

ModelNodes bind_params(Tape& tape, const ModelParams& params, bool trainable = true);
/// Build nodes from existing leaves, laid out as params.blocks().
ModelNodes nodes_from_leaves(const ModelParams& layout, std::span<const Var> leaves);

struct LossWeights {
  double lambda0 = 1.0;
  double lambda1 = 0.1;
  double lambda2 = 10.0;
  double lambda3 = 0.1;
  double gamma = 0.8;

  void validate() const;
};

/// Which regularizers are active. A disabled term contributes exactly zero.
struct AblationFlags {
  bool ct = true;
  bool cyc = true;
  bool de = true;
};

struct LossReport {
  double base = 0.0;
  double ct = 0.0;
  double cyc = 0.0;
  double de = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
};

// ---- per-image graph pieces ---------------------------------------------

struct ImageEncoding {
  Var patches;   // d×N, unit columns
  Var cls_comp;  // d×1, unit
};

ImageEncoding encode_image(const ModelNodes& m, Var raw_patches);
/// normalize(comp_weight · (state_s ⊕ object_o) + comp_bias) per pair.
Var embed_compositions(const ModelNodes& m, const std::vector<Pair>& pairs);
Var decoupler_loss(Var cls_state, Var cls_object, Var z_state_gt, Var z_object_gt);

struct ClassificationNodes {
  Var comp;
  Var state;
  Var object;
};
ClassificationNodes classification_losses(Var alpha, Var beta_state, Var beta_object,
                                          std::size_t gt_comp, std::size_t gt_state,
                                          std::size_t gt_object);

struct ImageTerms {
  TriSetNode tri;
  Var base;
  Var ct;
  Var cyc;
  Var de;
  TotalCtNode transport;
  Var cycle;  // T22
};

/// Builds every term for one image. `compositions` is the composition set
/// (training pairs); the sample's pair must be among them.
ImageTerms image_terms(const ModelNodes& m, const Sample& sample,
                       const std::vector<Pair>& compositions, const ModelOptions& options = {});

// ---- value-level wrappers -------------------------------------------------

struct ImageEncodingValue {
  Tensor patches;
  Tensor cls_comp;
};
ImageEncodingValue encode_image(const ModelParams& p, const Tensor& raw_patches);
Tensor embed_compositions(const ModelParams& p, const std::vector<Pair>& pairs);
double decoupler_loss(const Tensor& cls_state, const Tensor& cls_object, const Tensor& z_state_gt,
                      const Tensor& z_object_gt);

struct ClassificationLosses {
  double comp = 0.0;
  double state = 0.0;
  double object = 0.0;
};
ClassificationLosses classification_losses(const Tensor& alpha, const Tensor& beta_state,
                                           const Tensor& beta_object, std::size_t gt_comp,
                                           std::size_t gt_state, std::size_t gt_object);

/// Tri-set and plans for one sample, evaluated (for export and inspection).
struct ImageAnalysis {
  TriSet tri;
  TotalCtResult transport;
  Tensor cycle;
};
ImageAnalysis analyze_image(const ModelParams& p, const Sample& sample,
                            const std::vector<Pair>& compositions, const ModelOptions& options = {});

// ---- batch loss and training --------------------------------------------

/// Batch-mean of every term. When grads is non-null it receives d total / d
/// param for each block in ModelParams::blocks() order.
LossReport total_loss(const ModelParams& params, std::span<const Sample* const> batch,
                      const std::vector<Pair>& compositions, const LossWeights& weights,
                      const AblationFlags& flags, const ModelOptions& options = {},
                      std::vector<Tensor>* grads = nullptr);

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 5e-2;
  double momentum = 0.9;
  LossWeights weights;
  AblationFlags flags;
  ModelOptions options;
};

struct TrainResult {
  ModelParams params;
  std::vector<LossReport> trace;  // one entry per epoch, mean over its steps
};

/// Momentum SGD over the train split. Throws NumericError naming the epoch
/// and step if the loss stops being finite.
TrainResult train(ModelParams params, const Dataset& data, const TrainConfig& config);

// ---- inference -------------------------------------------------------------

struct Prediction {
  std::vector<double> scores;  // per candidate
  std::size_t argmax = 0;      // ties -> lowest index
  Tensor p_comp;               // softmax over candidates
  Tensor p_state;
  Tensor p_object;
};

/// score(c) = gamma p(c|x) + (1 - gamma) p(s|x) p(o|x).
Prediction predict(const ModelParams& params, const Tensor& raw_patches,
                   const std::vector<Pair>& candidates, double gamma,
                   const ModelOptions& options = {});
/// Same combination from precomputed probabilities.
Prediction combine_scores(const Tensor& p_comp, const Tensor& p_state, const Tensor& p_object,
                          const std::vector<Pair>& candidates, double gamma);

/// Image-independent plans between all `pairs` and all primitives, built from
/// the unfused text embeddings with uniform marginals.
struct FeasibilityPlans {
  TransportPlan comp_to_prim;
  TransportPlan prim_to_comp;
};
FeasibilityPlans feasibility_plans(const ModelParams& params, const std::vector<Pair>& pairs);

// ---- checkpoint ------------------------------------------------------------

void save_checkpoint(const ModelParams& params, std::ostream& os);
ModelParams load_checkpoint(std::istream& is);
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

/// Worker count for per-image parallel work: TSCA_THREADS if set, else 1.
std::size_t worker_threads();

}  // namespace tsca
