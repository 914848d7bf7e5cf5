#pragma once

// Seen/unseen evaluation with a calibration-bias sweep.

#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsca/data.hpp"
#include "tsca/model.hpp"
#include "tsca/tensor.hpp"
#include "tsca/transport.hpp"

namespace tsca {

struct CurvePoint {
  double seen = 0.0;
  double unseen = 0.0;

  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct EvalResult {
  double seen = 0.0;     // S: best seen accuracy over the sweep
  double unseen = 0.0;   // U: best unseen accuracy over the sweep
  double best_h = 0.0;   // H
  double auc = 0.0;
  std::vector<CurvePoint> curve;
  std::size_t candidate_count = 0;
  std::size_t candidates_before_filter = 0;
  std::size_t forced_errors = 0;  // test samples whose ground truth was filtered out
};

/// Marks a sample whose ground truth is not among the candidates.
inline constexpr std::size_t kNoCandidate = std::numeric_limits<std::size_t>::max();

/// scores is samples×candidates. A bias b is added to every unseen
/// candidate's score; per-sample argmax breaks ties toward the lower index.
/// The sweep visits -inf, +inf, every critical bias (best seen score minus
/// best unseen score of some sample) and the midpoints between consecutive
/// critical biases, ordered by increasing bias.
std::vector<CurvePoint> bias_sweep(const Tensor& scores, const std::vector<std::size_t>& gt,
                                   const std::vector<bool>& sample_unseen,
                                   const std::vector<bool>& candidate_unseen);
/// Convenience form: a sample is unseen when its ground-truth candidate is.
std::vector<CurvePoint> bias_sweep(const Tensor& scores, const std::vector<std::size_t>& gt,
                                   const std::vector<bool>& candidate_unseen);

/// Trapezoid of unseen over seen accuracy, points sorted by seen ascending
/// (unseen descending on ties).
double auc(std::vector<CurvePoint> curve);
/// max 2su / (s + u); 0 where s + u = 0.
double best_h(const std::vector<CurvePoint>& curve);

EvalResult summarize(std::vector<CurvePoint> curve);

enum class EvalMode { kClosed, kOpen };

const char* mode_name(EvalMode m);

struct EvalOptions {
  EvalMode mode = EvalMode::kClosed;
  double gamma = 0.8;
  std::optional<double> filter_quantile;  // engages the feasibility filter
  bool keep_seen = true;
  FilterRule filter_rule = FilterRule::kKeepAtLeast;
  Split split = Split::kTest;
  ModelOptions model;
};

/// Candidates are the test pairs (closed) or all of S×O (open), optionally
/// reduced by the feasibility filter.
EvalResult evaluate(const ModelParams& params, const Dataset& data, const EvalOptions& options);

/// {S,U,H,AUC,candidate_count,curve}; values rounded to 6 decimals.
nlohmann::ordered_json to_json(const EvalResult& r);

}  // namespace tsca
