// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace lum {

// Probability that a random positive outranks a random negative; ties
// credit 0.5 (Mann-Whitney). Throws if only one class is present.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

// |top-k of ranked ∩ relevant| / |relevant|.
double recall_at_k(const std::vector<int64_t>& ranked, const std::set<int64_t>& relevant, int k);

struct ScalingPoint {
  double x = 0.0;  // model parameter count or sequence length
  double y = 0.0;  // metric (R@10)
};

struct FitResult {
  double slope = 0.0;      // a in y = a*ln(x) + b
  double intercept = 0.0;  // b
  double r2 = 0.0;
};

// Ordinary least squares of y on ln(x).
FitResult fit_scaling_law(const std::vector<ScalingPoint>& points);

struct BenchReport {
  std::string config;
  double median_seconds = 0.0;
  double baseline_median_seconds = 0.0;
  int64_t items_processed = 0;
  double throughput = 0.0;           // items per second, measured side
  double baseline_throughput = 0.0;
  double speedup = 0.0;              // measured vs baseline
  double rel_spread = 0.0;           // (max-min)/median across repetitions
  bool noisy = false;                // rel_spread above 20%, flagged not failed
};

}  // namespace lum
