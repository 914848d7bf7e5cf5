#include "tsca/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>

#include "tsca/errors.hpp"

namespace tsca {

// ---- params ----------------------------------------------------------------

namespace {

Tensor gaussian(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double sigma) {
  std::normal_distribution<double> normal(0.0, sigma);
  Tensor t(rows, cols);
  for (double& v : t.data()) v = normal(rng);
  return t;
}

}  // namespace

ModelParams ModelParams::init(const ModelShape& s, std::uint64_t seed) {
  if (s.dim == 0 || s.raw_dim == 0 || s.num_states == 0 || s.num_objects == 0) {
    throw ConfigError("model shape dimensions must be positive");
  }
  if (s.heads == 0 || s.dim % s.heads != 0) throw ConfigError("heads must divide the model dimension");
  std::mt19937_64 rng(seed);
  const double d = static_cast<double>(s.dim);
  const double inv_sqrt_d = 1.0 / std::sqrt(d);

  ModelParams p;
  p.state_table = gaussian(rng, s.dim, s.num_states, inv_sqrt_d);
  p.object_table = gaussian(rng, s.dim, s.num_objects, inv_sqrt_d);
  p.comp_weight = gaussian(rng, s.dim, 2 * s.dim, 1.0 / std::sqrt(2.0 * d));
  p.comp_bias = Tensor(s.dim, 1);
  p.visual_weight = gaussian(rng, s.dim, s.raw_dim, 1.0 / std::sqrt(static_cast<double>(s.raw_dim)));
  p.visual_bias = Tensor(s.dim, 1);
  p.cls_token = Tensor(s.dim, 1);
  p.fusion.query = gaussian(rng, s.dim, s.dim, inv_sqrt_d);
  p.fusion.key = gaussian(rng, s.dim, s.dim, inv_sqrt_d);
  p.fusion.value = gaussian(rng, s.dim, s.dim, inv_sqrt_d);
  p.fusion.output = gaussian(rng, s.dim, s.dim, 0.1 * inv_sqrt_d);
  p.fusion.heads = s.heads;
  p.adapter.state_weight = gaussian(rng, s.dim, s.dim, 0.1 * inv_sqrt_d);
  p.adapter.object_weight = gaussian(rng, s.dim, s.dim, 0.1 * inv_sqrt_d);
  for (std::size_t i = 0; i < s.dim; ++i) {
    p.adapter.state_weight(i, i) += 1.0;
    p.adapter.object_weight(i, i) += 1.0;
  }
  p.adapter.state_bias = Tensor(s.dim, 1);
  p.adapter.object_bias = Tensor(s.dim, 1);
  p.psi = Tensor(s.split_temperature ? 3 : 1, 1, std::log(0.07));
  return p;
}

ModelShape ModelParams::shape() const {
  return {state_table.rows(), visual_weight.cols(), state_table.cols(), object_table.cols(),
          fusion.heads, psi.rows() == 3};
}

std::vector<Tensor*> ModelParams::blocks() {
  return {&state_table,          &object_table,         &comp_weight,         &comp_bias,
          &visual_weight,        &visual_bias,          &cls_token,           &fusion.query,
          &fusion.key,           &fusion.value,         &fusion.output,       &adapter.state_weight,
          &adapter.state_bias,   &adapter.object_weight, &adapter.object_bias, &psi};
}

std::vector<const Tensor*> ModelParams::blocks() const {
  auto mut = const_cast<ModelParams*>(this)->blocks();
  return {mut.begin(), mut.end()};
}

std::vector<Tensor> ModelParams::flatten() const {
  std::vector<Tensor> out;
  for (const Tensor* t : blocks()) out.push_back(*t);
  return out;
}

void ModelParams::assign(std::span<const Tensor> values) {
  auto dst = blocks();
  if (values.size() != dst.size()) throw ContractError("assign: wrong number of parameter blocks");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (!values[i].same_shape(*dst[i])) throw ContractError("assign: block shape mismatch");
    *dst[i] = values[i];
  }
}

Temperature ModelParams::temperature(std::size_t which) const {
  return {psi.rows() == 3 ? psi[which] : psi[0]};
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (a.fusion.heads != b.fusion.heads) return false;
  auto x = a.blocks();
  auto y = b.blocks();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(*x[i] == *y[i])) return false;
  }
  return true;
}

std::vector<Var> ModelNodes::leaves() const {
  return {state_table,    object_table,         comp_weight,        comp_bias,
          visual_weight,  visual_bias,          cls_token,          fusion.query,
          fusion.key,     fusion.value,         fusion.output,      adapter.state_weight,
          adapter.state_bias, adapter.object_weight, adapter.object_bias, psi};
}

ModelNodes nodes_from_leaves(const ModelParams& layout, std::span<const Var> v) {
  if (v.size() != 16) throw ContractError("nodes_from_leaves: expected 16 parameter leaves");
  ModelNodes m;
  m.state_table = v[0];
  m.object_table = v[1];
  m.comp_weight = v[2];
  m.comp_bias = v[3];
  m.visual_weight = v[4];
  m.visual_bias = v[5];
  m.cls_token = v[6];
  m.fusion = {v[7], v[8], v[9], v[10], layout.fusion.heads};
  m.adapter = {v[11], v[12], v[13], v[14]};
  m.psi = v[15];
  if (m.psi.rows() == 3) {
    m.temps = {element(m.psi, 0, 0), element(m.psi, 1, 0), element(m.psi, 2, 0)};
  } else {
    m.temps = TemperatureNodes::shared(m.psi);
  }
  return m;
}

ModelNodes bind_params(Tape& tape, const ModelParams& params, bool trainable) {
  std::vector<Var> leaves;
  for (const Tensor* t : params.blocks()) {
    leaves.push_back(trainable ? tape.leaf(*t) : tape.constant(*t));
  }
  return nodes_from_leaves(params, leaves);
}

void LossWeights::validate() const {
  for (double l : {lambda0, lambda1, lambda2, lambda3}) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("loss weights must be finite and >= 0");
  }
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
}

// ---- graph pieces ----------------------------------------------------------

ImageEncoding encode_image(const ModelNodes& m, Var raw_patches) {
  if (raw_patches.cols() == 0) throw EmptyInputError("image has no patches");
  Var patches = normalize_cols(add_bias(matmul(m.visual_weight, raw_patches), m.visual_bias));
  Var cls = normalize_cols(mean_cols(patches) + m.cls_token);
  return {patches, cls};
}

Var embed_compositions(const ModelNodes& m, const std::vector<Pair>& pairs) {
  if (pairs.empty()) throw EmptyInputError("no compositions to embed");
  std::vector<std::size_t> s_idx;
  std::vector<std::size_t> o_idx;
  for (const Pair& p : pairs) {
    if (p.state >= m.state_table.cols() || p.object >= m.object_table.cols()) {
      throw ContractError("embed_compositions: pair index out of range");
    }
    s_idx.push_back(p.state);
    o_idx.push_back(p.object);
  }
  Var stacked = concat_rows(gather_cols(m.state_table, s_idx), gather_cols(m.object_table, o_idx));
  return normalize_cols(add_bias(matmul(m.comp_weight, stacked), m.comp_bias));
}

namespace {

Var cosine(Var a, Var b) { return matmul(transpose(normalize_cols(a)), normalize_cols(b)); }

Var neg_log_prob(Var probs, std::size_t gt, const char* what) {
  constexpr double kFloor = 1e-30;
  if (gt >= probs.rows()) throw ContractError(std::string(what) + ": ground truth out of range");
  Var p = element(probs, gt, 0);
  if (p.tape->has_value(p.id) && p.value().item() < kFloor) {
    warn(std::string(what) + ": ground-truth probability below 1e-30, clamped");
  }
  return affine(log(p, kFloor), -1.0, 0.0);
}

}  // namespace

Var decoupler_loss(Var cls_state, Var cls_object, Var z_state_gt, Var z_object_gt) {
  return abs(cosine(cls_state, z_object_gt)) + abs(cosine(cls_object, z_state_gt));
}

ClassificationNodes classification_losses(Var alpha, Var beta_state, Var beta_object,
                                          std::size_t gt_comp, std::size_t gt_state,
                                          std::size_t gt_object) {
  return {neg_log_prob(alpha, gt_comp, "composition loss"),
          neg_log_prob(beta_state, gt_state, "state loss"),
          neg_log_prob(beta_object, gt_object, "object loss")};
}

namespace {

std::size_t composition_index(const std::vector<Pair>& compositions, const Sample& s) {
  const Pair gt{s.gt_state, s.gt_object};
  auto it = std::find(compositions.begin(), compositions.end(), gt);
  if (it == compositions.end()) {
    throw ContractError("sample pair is not in the composition set");
  }
  return static_cast<std::size_t>(it - compositions.begin());
}

ImageTerms build_terms(const ModelNodes& m, const Sample& sample,
                       const std::vector<Pair>& compositions, const ModelOptions& options,
                       const AblationFlags& flags) {
  Tape& tape = *m.state_table.tape;
  ImageTerms t;
  ImageEncoding enc = encode_image(m, tape.constant(sample.raw_patches));
  DistributionNode patches = build_patch_set(enc.patches);
  CompositionSetNode comp =
      build_composition_set(embed_compositions(m, compositions), patches, enc.cls_comp, m.fusion);
  AdaptedFeatures adapted = adapt_visual(m.adapter, enc.cls_comp);
  Var z_state = normalize_cols(m.state_table);
  Var z_object = normalize_cols(m.object_table);
  PrimitiveSetNode prim = build_primitive_set(z_state, z_object, patches, adapted.cls_state,
                                              adapted.cls_object, m.fusion,
                                              options.primitive_weighting);

  t.tri = {patches,
           comp.set,
           prim.set,
           prim.beta_state,
           prim.beta_object,
           enc.cls_comp,
           adapted.cls_state,
           adapted.cls_object,
           composition_index(compositions, sample),
           sample.gt_state,
           sample.gt_object,
           m.state_table.cols()};

  ClassificationNodes cls = classification_losses(comp.set.weights, prim.beta_state,
                                                  prim.beta_object, t.tri.gt_composition,
                                                  sample.gt_state, sample.gt_object);
  t.base = cls.comp + cls.state + cls.object;

  Var zero = tape.constant(Tensor::scalar(0.0));
  t.ct = zero;
  t.cyc = zero;
  t.de = zero;
  if (flags.ct || flags.cyc) {
    t.transport = total_ct(t.tri, m.temps);
    if (flags.ct) t.ct = t.transport.total;
    if (flags.cyc) {
      t.cycle = cycle_matrix(t.transport.patch_comp.backward, t.transport.patch_prim.forward,
                             t.transport.comp_prim.backward);
      t.cyc = cycle_loss(t.cycle, t.tri.gt_composition);
    }
  }
  if (flags.de) {
    t.de = decoupler_loss(adapted.cls_state, adapted.cls_object,
                          slice(z_state, 0, z_state.rows(), sample.gt_state, sample.gt_state + 1),
                          slice(z_object, 0, z_object.rows(), sample.gt_object, sample.gt_object + 1));
  }
  return t;
}

}  // namespace

ImageTerms image_terms(const ModelNodes& m, const Sample& sample,
                       const std::vector<Pair>& compositions, const ModelOptions& options) {
  return build_terms(m, sample, compositions, options, AblationFlags{});
}

// ---- value wrappers ----------------------------------------------------------

ImageEncodingValue encode_image(const ModelParams& p, const Tensor& raw_patches) {
  Tape tape;
  ImageEncoding e = encode_image(bind_params(tape, p, false), tape.constant(raw_patches));
  return {e.patches.value(), e.cls_comp.value()};
}

Tensor embed_compositions(const ModelParams& p, const std::vector<Pair>& pairs) {
  Tape tape;
  return embed_compositions(bind_params(tape, p, false), pairs).value();
}

double decoupler_loss(const Tensor& cls_state, const Tensor& cls_object, const Tensor& z_state_gt,
                      const Tensor& z_object_gt) {
  Tape tape;
  return decoupler_loss(tape.constant(cls_state), tape.constant(cls_object),
                        tape.constant(z_state_gt), tape.constant(z_object_gt))
      .value()
      .item();
}

ClassificationLosses classification_losses(const Tensor& alpha, const Tensor& beta_state,
                                           const Tensor& beta_object, std::size_t gt_comp,
                                           std::size_t gt_state, std::size_t gt_object) {
  Tape tape;
  ClassificationNodes n =
      classification_losses(tape.constant(alpha), tape.constant(beta_state),
                            tape.constant(beta_object), gt_comp, gt_state, gt_object);
  return {n.comp.value().item(), n.state.value().item(), n.object.value().item()};
}

ImageAnalysis analyze_image(const ModelParams& p, const Sample& sample,
                            const std::vector<Pair>& compositions, const ModelOptions& options) {
  Tape tape;
  ImageTerms t = build_terms(bind_params(tape, p, false), sample, compositions, options,
                             AblationFlags{});
  ImageAnalysis a;
  a.tri = evaluate(t.tri);
  auto ct = [](const CtNode& n) {
    return CtResult{n.distance.value().item(), n.forward.evaluate(), n.backward.evaluate()};
  };
  a.transport = {t.transport.total.value().item(), ct(t.transport.patch_comp),
                 ct(t.transport.patch_prim), ct(t.transport.comp_prim)};
  a.cycle = t.cycle.value();
  return a;
}

// ---- batch loss --------------------------------------------------------------

std::size_t worker_threads() {
  if (const char* env = std::getenv("TSCA_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

namespace {

struct ImageResult {
  double base = 0.0;
  double ct = 0.0;
  double cyc = 0.0;
  double de = 0.0;
  std::vector<Tensor> grads;
};

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Fixed-shape pairwise reduction so results do not depend on thread timing.
ImageResult tree_sum(std::vector<ImageResult>& items, std::size_t lo, std::size_t hi) {
  if (hi - lo == 1) return std::move(items[lo]);
  const std::size_t mid = lo + (hi - lo) / 2;
  ImageResult a = tree_sum(items, lo, mid);
  ImageResult b = tree_sum(items, mid, hi);
  a.base += b.base;
  a.ct += b.ct;
  a.cyc += b.cyc;
  a.de += b.de;
  for (std::size_t k = 0; k < a.grads.size(); ++k) {
    for (std::size_t i = 0; i < a.grads[k].size(); ++i) a.grads[k][i] += b.grads[k][i];
  }
  return a;
}

const char* failing_term(const ImageResult& r) {
  if (!std::isfinite(r.base)) return "base";
  if (!std::isfinite(r.ct)) return "ct";
  if (!std::isfinite(r.cyc)) return "cyc";
  return "de";
}

}  // namespace

LossReport total_loss(const ModelParams& params, std::span<const Sample* const> batch,
                      const std::vector<Pair>& compositions, const LossWeights& w,
                      const AblationFlags& flags, const ModelOptions& options,
                      std::vector<Tensor>* grads) {
  if (batch.empty()) throw EmptyInputError("total_loss: empty batch");
  w.validate();
  const bool want_grads = grads != nullptr;
  std::vector<ImageResult> results(batch.size());

  parallel_for(batch.size(), [&](std::size_t i) {
    Tape tape;
    ModelNodes m = bind_params(tape, params, true);
    ImageTerms t;
    try {
      t = build_terms(m, *batch[i], compositions, options, flags);
    } catch (const NumericError& e) {
      throw NumericError(std::string("loss evaluation failed: ") + e.what());
    }
    ImageResult& r = results[i];
    r.base = t.base.value().item();
    r.ct = t.ct.value().item();
    r.cyc = t.cyc.value().item();
    r.de = t.de.value().item();
    if (!std::isfinite(r.base + r.ct + r.cyc + r.de)) {
      throw NumericError(std::string("non-finite loss term '") + failing_term(r) + "'");
    }
    if (!want_grads) return;
    Var loss = affine(t.base, w.lambda0, 0.0);
    if (flags.ct) loss = loss + affine(t.ct, w.lambda1, 0.0);
    if (flags.cyc) loss = loss + affine(t.cyc, w.lambda2, 0.0);
    if (flags.de) loss = loss + affine(t.de, w.lambda3, 0.0);
    auto g = tape.backward_grad(loss);
    for (Var leaf : m.leaves()) r.grads.push_back(std::move(g.at(leaf.id)));
  });

  ImageResult sum = tree_sum(results, 0, results.size());
  const double inv = 1.0 / static_cast<double>(batch.size());
  LossReport report;
  report.base = sum.base * inv;
  report.ct = flags.ct ? sum.ct * inv : 0.0;
  report.cyc = flags.cyc ? sum.cyc * inv : 0.0;
  report.de = flags.de ? sum.de * inv : 0.0;
  report.total = w.lambda0 * report.base + w.lambda1 * report.ct + w.lambda2 * report.cyc +
                 w.lambda3 * report.de;
  if (want_grads) {
    double n2 = 0.0;
    for (Tensor& g : sum.grads) {
      for (double& v : g.data()) {
        v *= inv;
        n2 += v * v;
      }
    }
    report.grad_norm = std::sqrt(n2);
    *grads = std::move(sum.grads);
  }
  return report;
}

// ---- training ----------------------------------------------------------------

TrainResult train(ModelParams params, const Dataset& data, const TrainConfig& cfg) {
  cfg.weights.validate();
  if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(cfg.learning_rate >= 0.0) || !(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
    throw ConfigError("learning rate must be >= 0 and momentum in [0, 1)");
  }
  const std::vector<const Sample*> samples = data.select(Split::kTrain);
  if (samples.empty()) throw ConfigError("dataset has no training samples");
  const std::vector<Pair> compositions = data.space.seen_pairs();

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<Tensor> velocity;
  for (const Tensor* t : params.blocks()) velocity.emplace_back(t->rows(), t->cols());

  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    LossReport epoch_report;
    std::size_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Sample*> batch;
      for (std::size_t k = start; k < stop; ++k) batch.push_back(samples[order[k]]);

      std::vector<Tensor> grads;
      LossReport r;
      try {
        r = total_loss(params, batch, compositions, cfg.weights, cfg.flags, cfg.options, &grads);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           ": " + e.what());
      }
      if (!std::isfinite(r.total) || !std::isfinite(r.grad_norm)) {
        throw NumericError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           ": loss or gradient is not finite");
      }

      auto blocks = params.blocks();
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        Tensor& p = *blocks[b];
        for (std::size_t i = 0; i < p.size(); ++i) {
          velocity[b][i] = cfg.momentum * velocity[b][i] + grads[b][i];
          p[i] -= cfg.learning_rate * velocity[b][i];
        }
      }

      const double share = static_cast<double>(batch.size()) / static_cast<double>(samples.size());
      epoch_report.base += share * r.base;
      epoch_report.ct += share * r.ct;
      epoch_report.cyc += share * r.cyc;
      epoch_report.de += share * r.de;
      epoch_report.total += share * r.total;
      epoch_report.grad_norm = std::max(epoch_report.grad_norm, r.grad_norm);
    }
    result.trace.push_back(epoch_report);
  }
  result.params = std::move(params);
  return result;
}

// ---- inference ---------------------------------------------------------------

Prediction combine_scores(const Tensor& p_comp, const Tensor& p_state, const Tensor& p_object,
                          const std::vector<Pair>& candidates, double gamma) {
  if (candidates.empty()) throw EmptyInputError("predict: empty candidate list");
  if (p_comp.rows() != candidates.size()) throw ContractError("predict: p(c|x) size mismatch");
  Prediction out;
  out.p_comp = p_comp;
  out.p_state = p_state;
  out.p_object = p_object;
  out.scores.reserve(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const Pair p = candidates[c];
    if (p.state >= p_state.rows() || p.object >= p_object.rows()) {
      throw ContractError("predict: candidate primitive out of range");
    }
    out.scores.push_back(gamma * p_comp[c] + (1.0 - gamma) * p_state[p.state] * p_object[p.object]);
  }
  out.argmax = static_cast<std::size_t>(
      std::max_element(out.scores.begin(), out.scores.end()) - out.scores.begin());
  return out;
}

Prediction predict(const ModelParams& params, const Tensor& raw_patches,
                   const std::vector<Pair>& candidates, double gamma, const ModelOptions& options) {
  if (candidates.empty()) throw EmptyInputError("predict: empty candidate list");
  (void)options;  // primitive weighting does not enter p(s|x), p(o|x)
  Tape tape;
  ModelNodes m = bind_params(tape, params, false);
  ImageEncoding enc = encode_image(m, tape.constant(raw_patches));
  DistributionNode patches = build_patch_set(enc.patches);
  CompositionSetNode comp =
      build_composition_set(embed_compositions(m, candidates), patches, enc.cls_comp, m.fusion);
  AdaptedFeatures adapted = adapt_visual(m.adapter, enc.cls_comp);
  Var beta_state = softmax_cols(matmul(transpose(normalize_cols(m.state_table)), adapted.cls_state));
  Var beta_object =
      softmax_cols(matmul(transpose(normalize_cols(m.object_table)), adapted.cls_object));
  return combine_scores(comp.set.weights.value(), beta_state.value(), beta_object.value(),
                        candidates, gamma);
}

FeasibilityPlans feasibility_plans(const ModelParams& params, const std::vector<Pair>& pairs) {
  const Tensor y = embed_compositions(params, pairs);
  const Tensor z_state = kernels::normalize_cols(params.state_table);
  const Tensor z_object = kernels::normalize_cols(params.object_table);
  Tensor z(z_state.rows(), z_state.cols() + z_object.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    for (std::size_t j = 0; j < z_state.cols(); ++j) z(i, j) = z_state(i, j);
    for (std::size_t j = 0; j < z_object.cols(); ++j) z(i, z_state.cols() + j) = z_object(i, j);
  }
  const DiscreteDistribution comps{y, Tensor(y.cols(), 1, 1.0 / static_cast<double>(y.cols()))};
  const DiscreteDistribution prims{z, Tensor(z.cols(), 1, 1.0 / static_cast<double>(z.cols()))};
  CtResult ct = ct_distance(comps, prims, params.temperature(2));
  return {std::move(ct.forward), std::move(ct.backward)};
}

// ---- checkpoint ----------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'T', 'S', 'C', 'A', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) os.put(static_cast<char>((v >> (8 * k)) & 0xFF));
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw ParseError("checkpoint: truncated header");
    v |= static_cast<std::uint32_t>(c & 0xFF) << (8 * k);
  }
  return v;
}

void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int k = 0; k < 8; ++k) os.put(static_cast<char>((bits >> (8 * k)) & 0xFF));
}

double get_f64(std::istream& is) {
  std::uint64_t bits = 0;
  for (int k = 0; k < 8; ++k) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw ParseError("checkpoint: truncated parameter block");
    bits |= static_cast<std::uint64_t>(c & 0xFF) << (8 * k);
  }
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const ModelParams& params, std::ostream& os) {
  const ModelShape s = params.shape();
  os.write(kMagic, sizeof(kMagic));
  for (std::size_t v : {s.dim, s.raw_dim, s.num_states, s.num_objects, s.heads, params.psi.rows()}) {
    put_u32(os, static_cast<std::uint32_t>(v));
  }
  for (const Tensor* t : params.blocks()) {
    for (double v : t->data()) put_f64(os, v);
  }
}

ModelParams load_checkpoint(std::istream& is) {
  char magic[5] = {};
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(std::begin(magic), std::end(magic), std::begin(kMagic))) {
    throw ParseError("checkpoint: bad magic (expected TSCA1)");
  }
  ModelShape s;
  s.dim = get_u32(is);
  s.raw_dim = get_u32(is);
  s.num_states = get_u32(is);
  s.num_objects = get_u32(is);
  s.heads = get_u32(is);
  const std::uint32_t num_psi = get_u32(is);
  if (num_psi != 1 && num_psi != 3) throw ParseError("checkpoint: temperature count must be 1 or 3");
  s.split_temperature = num_psi == 3;
  if (s.dim == 0 || s.dim > 4096 || s.raw_dim == 0 || s.raw_dim > 65536 || s.num_states == 0 ||
      s.num_objects == 0 || s.heads == 0 || s.dim % s.heads != 0) {
    throw ParseError("checkpoint: implausible dimensions in header");
  }
  ModelParams p = ModelParams::init(s, 0);
  for (Tensor* t : p.blocks()) {
    for (double& v : t->data()) {
      v = get_f64(is);
      if (!std::isfinite(v)) throw ParseError("checkpoint: non-finite parameter value");
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw ParseError("checkpoint: trailing bytes");
  return p;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint " + path.string());
  save_checkpoint(params, os);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path.string());
  return load_checkpoint(is);
}

}  // namespace tsca
