// SPDX-License-Identifier: Apache-2.0
//
// Boundary benchmark harness: NMS thinning, tolerance matching, P/R/F
// curves with ODS/OIS, the multi-granularity protocol and FLOPs/parameter
// counting.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edmb/image_io.hpp"
#include "edmb/model.hpp"

namespace edmb {

/// Keeps pixels that are not strictly smaller than their two bilinearly
/// sampled neighbours along the local edge normal. The normal is the
/// dominant-curvature eigenvector of the Hessian of the map smoothed by a
/// 5x5, sigma = 1 Gaussian. Kept values are unchanged; others become 0.
Image nms_thin(const Image& prob);

enum class MatchMethod { automatic, exact, greedy };

struct MatchResult {
  int pred_pixels = 0;
  int gt_pixels = 0;
  int matched = 0;                   // one-to-one pairs
  std::vector<std::uint8_t> pred_hit;  // per pixel, 1 where a matched prediction sits
  bool used_greedy = false;
};

/// Maximum one-to-one matching of edge pixels with distance <= radius, where
/// radius = max_dist_frac * image diagonal. `automatic` switches to the
/// greedy matcher above kExactMatchLimit edge pixels.
MatchResult match_edges(const Image& pred_binary, const Image& gt_binary, double max_dist_frac,
                        MatchMethod method = MatchMethod::automatic);

inline constexpr int kExactMatchLimit = 10000;

/// Thresholds k/(n+1), k = 1..n.
std::vector<double> default_thresholds(int n);

struct Counts {
  double correct_pred = 0;  // predictions matched in some annotation
  double total_pred = 0;
  double matched_gt = 0;    // summed over annotations
  double total_gt = 0;

  Counts& operator+=(const Counts& o);
  double precision() const;
  double recall() const;
  double f() const;
};

double f_measure(double p, double r);

struct EvalOptions {
  int thresholds = 33;
  double max_dist = 0.0075;
  MatchMethod method = MatchMethod::automatic;
};

struct ImageRecord {
  std::string id;
  double best_threshold = 0;
  double best_f = 0;
  int best_sample = 0;
};

struct EvalReport {
  std::vector<double> thresholds;
  std::vector<double> precision, recall, f;
  double ods_threshold = 0, ods = 0, ods_p = 0, ods_r = 0;
  double ois = 0;
  std::vector<ImageRecord> images;
  std::int64_t params = -1;  // -1 when not measured
  std::int64_t flops = -1;
};

/// Per-threshold counts of one (thinned) prediction against its annotations.
std::vector<Counts> image_counts(const Image& pred, const std::vector<Image>& gts, const std::vector<double>& thresholds,
                                 const EvalOptions& opts);

/// preds[i] is image i's thinned map, gts[i] its annotation maps.
EvalReport f_curve(const std::vector<Image>& preds, const std::vector<std::vector<Image>>& gts,
                   const EvalOptions& opts = {}, const std::vector<std::string>& ids = {});

/// samples[i][m] is image i's m-th thinned map (same M for every image).
EvalReport eval_multigranularity(const std::vector<std::vector<Image>>& samples,
                                 const std::vector<std::vector<Image>>& gts, const EvalOptions& opts = {},
                                 const std::vector<std::string>& ids = {});

struct FlopsParams {
  std::int64_t params = 0;
  std::int64_t flops = 0;
  std::int64_t conv_macs = 0, linear_macs = 0, scan_macs = 0;
};

/// Learnable scalars and 2 x MACs of one inference forward at [1, C, H, W].
template <typename T>
FlopsParams count_flops_params(EdmbModel<T>& model, int channels, int height, int width);

/// Learnable scalars of parameters whose names start with `prefix`.
template <typename T>
std::int64_t count_params(const EdmbModel<T>& model, const std::string& prefix = "");

/// Tabular text followed by ods=, ois=, params=, flops= lines.
std::string format_report(const EvalReport& r);

}  // namespace edmb
