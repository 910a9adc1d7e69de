// SPDX-License-Identifier: Apache-2.0
#include "lum/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lum {

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: score/label counts differ");
  int64_t n_pos = 0, n_neg = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("auc: label outside {0,1}");
    (y == 1 ? n_pos : n_neg) += 1;
  }
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("auc: needs at least one positive and one negative label");

  // rank-sum form; average ranks over ties keep the 0.5 tie credit exact
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (size_t p = i; p < j; ++p)
      if (labels[order[p]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

double recall_at_k(const std::vector<int64_t>& ranked, const std::set<int64_t>& relevant, int k) {
  if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
  if (relevant.empty()) throw std::invalid_argument("recall_at_k: empty relevant set");
  int64_t hit = 0;
  const size_t kk = std::min<size_t>(static_cast<size_t>(k), ranked.size());
  for (size_t i = 0; i < kk; ++i)
    if (relevant.count(ranked[i])) ++hit;
  return static_cast<double>(hit) / static_cast<double>(relevant.size());
}

FitResult fit_scaling_law(const std::vector<ScalingPoint>& points) {
  if (points.size() < 2) throw std::invalid_argument("fit_scaling_law: needs at least 2 points");
  std::vector<double> lx, y;
  for (const auto& p : points) {
    if (!(p.x > 0.0)) throw std::invalid_argument("fit_scaling_law: x must be positive");
    lx.push_back(std::log(p.x));
    y.push_back(p.y);
  }
  const double n = static_cast<double>(points.size());
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0)
    throw std::invalid_argument("fit_scaling_law: all x identical, fit is singular");
  FitResult fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0.0, ss_tot = 0.0;
  for (size_t i = 0; i < lx.size(); ++i) {
    const double pred = fit.slope * lx[i] + fit.intercept;
    ss_res += (y[i] - pred) * (y[i] - pred);
    ss_tot += (y[i] - my) * (y[i] - my);
  }
  fit.r2 = ss_tot == 0.0 ? (ss_res == 0.0 ? 1.0 : 0.0) : 1.0 - ss_res / ss_tot;
  return fit;
}

}  // namespace lum
