#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

namespace vlbm {

/// Average ranks (1-based); ties get the mean of their rank range.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  int n = static_cast<int>(x.size());
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  int i = 0;
  while (i < n) {
    int j = i;
    while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
    double r = 0.5 * (i + j) + 1.0;
    for (int k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Spearman's rank correlation: Pearson correlation of the rank vectors.
/// Returns NaN when either rank vector has zero variance (all-tied input).
inline double spearman(const std::vector<double>& est, const std::vector<double>& truth) {
  if (est.size() != truth.size()) throw std::invalid_argument("spearman: length mismatch");
  if (est.size() < 2) throw std::invalid_argument("spearman: need at least 2 points");
  std::vector<double> ra = average_ranks(est);
  std::vector<double> rb = average_ranks(truth);
  int n = static_cast<int>(ra.size());
  double ma = 0, mb = 0;
  for (int i = 0; i < n; ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (int i = 0; i < n; ++i) {
    double da = ra[i] - ma, db = rb[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return std::nan("");
  return sab / std::sqrt(saa * sbb);
}

/// max(truth) - truth[argmax(est)], raw and normalized by the truth range.
/// Ties in est break toward the lowest index.
inline std::pair<double, double> regret_at_1(const std::vector<double>& est,
                                             const std::vector<double>& truth) {
  if (est.size() != truth.size()) throw std::invalid_argument("regret_at_1: length mismatch");
  if (est.empty()) throw std::invalid_argument("regret_at_1: empty input");
  int pick = 0;
  for (int i = 1; i < static_cast<int>(est.size()); ++i)
    if (est[i] > est[pick]) pick = i;
  double best = *std::max_element(truth.begin(), truth.end());
  double worst = *std::min_element(truth.begin(), truth.end());
  double raw = best - truth[pick];
  double norm = (best > worst) ? raw / (best - worst) : 0.0;
  return {raw, norm};
}

inline double mae_metric(const std::vector<double>& est, const std::vector<double>& truth) {
  if (est.size() != truth.size()) throw std::invalid_argument("mae_metric: length mismatch");
  if (est.empty()) throw std::invalid_argument("mae_metric: empty input");
  double s = 0;
  for (size_t i = 0; i < est.size(); ++i) s += std::abs(est[i] - truth[i]);
  return s / est.size();
}

}  // namespace vlbm
