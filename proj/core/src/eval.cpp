#include "tsca/eval.hpp"

#include <algorithm>
#include <cmath>

#include "tsca/errors.hpp"

namespace tsca {

namespace {

struct SampleBest {
  std::size_t seen_idx = kNoCandidate;
  std::size_t unseen_idx = kNoCandidate;
  double diff = 0.0;  // best seen - best unseen
};

bool predicts_unseen(const SampleBest& b, double bias) {
  if (b.unseen_idx == kNoCandidate) return false;
  if (b.seen_idx == kNoCandidate) return true;
  if (bias > b.diff) return true;
  if (bias < b.diff) return false;
  return b.unseen_idx < b.seen_idx;
}

}  // namespace

std::vector<CurvePoint> bias_sweep(const Tensor& scores, const std::vector<std::size_t>& gt,
                                   const std::vector<bool>& sample_unseen,
                                   const std::vector<bool>& candidate_unseen) {
  const std::size_t n = scores.rows();
  const std::size_t c = scores.cols();
  if (gt.size() != n || sample_unseen.size() != n || candidate_unseen.size() != c) {
    throw ContractError("bias_sweep: argument sizes disagree");
  }
  std::size_t seen_total = 0;
  std::size_t unseen_total = 0;
  for (bool u : sample_unseen) (u ? unseen_total : seen_total) += 1;
  if (unseen_total == 0) throw ContractError("bias_sweep: no unseen samples, U is undefined");
  if (seen_total == 0) throw ContractError("bias_sweep: no seen samples, S is undefined");

  std::vector<SampleBest> best(n);
  std::vector<double> critical;
  for (std::size_t i = 0; i < n; ++i) {
    double seen_score = -std::numeric_limits<double>::infinity();
    double unseen_score = seen_score;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = scores(i, j);
      if (candidate_unseen[j]) {
        if (best[i].unseen_idx == kNoCandidate || v > unseen_score) {
          unseen_score = v;
          best[i].unseen_idx = j;
        }
      } else if (best[i].seen_idx == kNoCandidate || v > seen_score) {
        seen_score = v;
        best[i].seen_idx = j;
      }
    }
    if (best[i].seen_idx != kNoCandidate && best[i].unseen_idx != kNoCandidate) {
      best[i].diff = seen_score - unseen_score;
      critical.push_back(best[i].diff);
    }
  }
  // Each sample's prediction changes only at its own critical bias, so the
  // curve is a running count over samples ordered by that bias: best seen
  // below it, the tie rule at it, best unseen above it.
  std::vector<std::size_t> order;
  order.reserve(critical.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (best[i].seen_idx != kNoCandidate && best[i].unseen_idx != kNoCandidate) order.push_back(i);
  }
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return best[a].diff < best[b].diff; });
  std::sort(critical.begin(), critical.end());
  critical.erase(std::unique(critical.begin(), critical.end()), critical.end());

  constexpr double kInf = std::numeric_limits<double>::infinity();
  long long seen_hits = 0;
  long long unseen_hits = 0;
  auto count = [&](std::size_t i, double bias, int sign) {
    const std::size_t pred = predicts_unseen(best[i], bias) ? best[i].unseen_idx : best[i].seen_idx;
    if (pred == gt[i]) (sample_unseen[i] ? unseen_hits : seen_hits) += sign;
  };
  for (std::size_t i = 0; i < n; ++i) count(i, -kInf, +1);

  std::vector<CurvePoint> curve;
  curve.reserve(2 * critical.size() + 2);
  auto emit = [&] {
    curve.push_back({static_cast<double>(seen_hits) / static_cast<double>(seen_total),
                     static_cast<double>(unseen_hits) / static_cast<double>(unseen_total)});
  };
  emit();
  std::size_t next = 0;
  for (std::size_t k = 0; k < critical.size(); ++k) {
    const double b = critical[k];
    const std::size_t first = next;
    if (k > 0) emit();  // open interval below b
    for (; next < order.size() && best[order[next]].diff == b; ++next) {
      count(order[next], -kInf, -1);
      count(order[next], b, +1);
    }
    emit();
    for (std::size_t q = first; q < next; ++q) {
      count(order[q], b, -1);
      count(order[q], kInf, +1);
    }
  }
  emit();
  return curve;
}

std::vector<CurvePoint> bias_sweep(const Tensor& scores, const std::vector<std::size_t>& gt,
                                   const std::vector<bool>& candidate_unseen) {
  std::vector<bool> sample_unseen;
  sample_unseen.reserve(gt.size());
  for (std::size_t g : gt) {
    if (g >= candidate_unseen.size()) {
      throw ContractError("bias_sweep: ground truth is not among the candidates");
    }
    sample_unseen.push_back(candidate_unseen[g]);
  }
  return bias_sweep(scores, gt, sample_unseen, candidate_unseen);
}

double auc(std::vector<CurvePoint> curve) {
  std::sort(curve.begin(), curve.end(), [](const CurvePoint& a, const CurvePoint& b) {
    return a.seen < b.seen || (a.seen == b.seen && a.unseen > b.unseen);
  });
  double area = 0.0;
  for (std::size_t k = 1; k < curve.size(); ++k) {
    area += (curve[k].seen - curve[k - 1].seen) * 0.5 * (curve[k].unseen + curve[k - 1].unseen);
  }
  return area;
}

double best_h(const std::vector<CurvePoint>& curve) {
  double h = 0.0;
  for (const CurvePoint& p : curve) {
    const double s = p.seen + p.unseen;
    if (s > 0.0) h = std::max(h, 2.0 * p.seen * p.unseen / s);
  }
  return h;
}

EvalResult summarize(std::vector<CurvePoint> curve) {
  if (curve.empty()) throw ContractError("summarize: empty curve");
  EvalResult r;
  for (const CurvePoint& p : curve) {
    r.seen = std::max(r.seen, p.seen);
    r.unseen = std::max(r.unseen, p.unseen);
  }
  r.best_h = best_h(curve);
  r.auc = auc(curve);
  r.curve = std::move(curve);
  return r;
}

const char* mode_name(EvalMode m) { return m == EvalMode::kClosed ? "closed" : "open"; }

EvalResult evaluate(const ModelParams& params, const Dataset& data, const EvalOptions& options) {
  const CompositionSpace& space = data.space;
  const std::vector<const Sample*> samples = data.select(options.split);
  if (samples.empty()) throw ConfigError("evaluation split has no samples");

  std::vector<Pair> candidates =
      options.mode == EvalMode::kClosed ? space.test_pair_list() : open_world_space(space).pairs;
  if (options.split == Split::kVal && options.mode == EvalMode::kClosed) {
    candidates.clear();
    for (std::size_t i : space.val_pairs) candidates.push_back(space.pairs[i]);
  }
  auto is_seen = [&](Pair p) {
    const auto idx = space.index_of(p);
    return idx && space.seen_mask[*idx];
  };

  const std::size_t before = candidates.size();
  if (options.filter_quantile) {
    FeasibilityPlans plans = feasibility_plans(params, candidates);
    const std::vector<double> scores = feasibility_scores(plans.comp_to_prim, plans.prim_to_comp,
                                                          candidates, space.num_states());
    std::vector<bool> seen;
    for (const Pair& p : candidates) seen.push_back(is_seen(p));
    FilterResult kept = filter_compositions(scores, seen,
                                            FilterThreshold::at_quantile(*options.filter_quantile),
                                            options.keep_seen, options.filter_rule);
    std::vector<Pair> reduced;
    for (std::size_t i : kept.kept) reduced.push_back(candidates[i]);
    candidates = std::move(reduced);
  }

  std::vector<bool> candidate_unseen;
  for (const Pair& p : candidates) candidate_unseen.push_back(!is_seen(p));

  Tensor scores(samples.size(), candidates.size());
  std::vector<std::size_t> gt(samples.size(), kNoCandidate);
  std::vector<bool> sample_unseen(samples.size());
  std::size_t forced = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = *samples[i];
    const Pair truth{s.gt_state, s.gt_object};
    auto it = std::find(candidates.begin(), candidates.end(), truth);
    if (it != candidates.end()) {
      gt[i] = static_cast<std::size_t>(it - candidates.begin());
    } else {
      ++forced;
    }
    sample_unseen[i] = !is_seen(truth);
    Prediction p = predict(params, s.raw_patches, candidates, options.gamma, options.model);
    for (std::size_t j = 0; j < candidates.size(); ++j) scores(i, j) = p.scores[j];
  }
  if (forced > 0) {
    warn("filter removed the ground-truth pair of " + std::to_string(forced) +
         " evaluation samples; they count as errors");
  }

  EvalResult r = summarize(bias_sweep(scores, gt, sample_unseen, candidate_unseen));
  r.candidate_count = candidates.size();
  r.candidates_before_filter = before;
  r.forced_errors = forced;
  return r;
}

nlohmann::ordered_json to_json(const EvalResult& r) {
  auto round6 = [](double v) { return std::round(v * 1e6) / 1e6; };
  nlohmann::ordered_json j;
  j["S"] = round6(r.seen);
  j["U"] = round6(r.unseen);
  j["H"] = round6(r.best_h);
  j["AUC"] = round6(r.auc);
  j["candidate_count"] = r.candidate_count;
  j["candidates_before_filter"] = r.candidates_before_filter;
  j["forced_errors"] = r.forced_errors;
  nlohmann::ordered_json curve = nlohmann::ordered_json::array();
  for (const CurvePoint& p : r.curve) curve.push_back({round6(p.seen), round6(p.unseen)});
  j["curve"] = std::move(curve);
  return j;
}

}  // namespace tsca
