#include <algorithm>
#include <cmath>
#include <numeric>

#include "mlad/errors.hpp"
#include "mlad/eval.hpp"

namespace mlad {

double binary_auc(std::span<const double> scores, std::span<const std::size_t> labels) {
  if (scores.size() != labels.size()) throw DimensionError("binary_auc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  Vec rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] == 1) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) throw ValidationError("binary_auc: needs both classes");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

MetricReport compute_metrics(std::span<const std::size_t> preds, const Mat& scores,
                             std::span<const std::size_t> labels, std::size_t num_classes) {
  if (preds.size() != labels.size()) throw DimensionError("compute_metrics: length mismatch");
  if (!scores.empty() && (scores.rows() != labels.size() || scores.cols() != num_classes))
    throw DimensionError("compute_metrics: score matrix shape mismatch");
  if (labels.empty()) throw ValidationError("compute_metrics: no samples");
  const std::size_t C = num_classes;
  MetricReport r;
  r.confusion.assign(C, std::vector<std::size_t>(C, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= C || preds[i] >= C) throw IndexError("compute_metrics: class out of range");
    ++r.confusion[labels[i]][preds[i]];
    correct += labels[i] == preds[i];
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  r.support.assign(C, 0);
  r.per_class_f1.assign(C, 0.0);
  double macro = 0.0, weighted = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t predicted = 0;
    for (std::size_t t = 0; t < C; ++t) {
      r.support[c] += r.confusion[c][t];
      predicted += r.confusion[t][c];
    }
    const double tp = static_cast<double>(r.confusion[c][c]);
    const double denom = static_cast<double>(r.support[c] + predicted);
    r.per_class_f1[c] = denom > 0.0 ? 2.0 * tp / denom : 0.0;
    if (r.support[c] == 0) {
      ++r.zero_support_classes;
      continue;
    }
    macro += r.per_class_f1[c];
    weighted += r.per_class_f1[c] * static_cast<double>(r.support[c]);
    ++counted;
  }
  r.macro_f1 = macro / static_cast<double>(counted);
  r.weighted_f1 = weighted / static_cast<double>(labels.size());
  if (C == 2 && !scores.empty() && r.support[0] > 0 && r.support[1] > 0)
    r.auc = binary_auc(scores.column(1), labels);
  return r;
}

double silhouette_score(const Mat& x, std::span<const std::size_t> labels) {
  const std::size_t n = x.rows();
  if (labels.size() != n) throw DimensionError("silhouette_score: length mismatch");
  if (n < 2) throw ValidationError("silhouette_score: needs at least 2 samples");
  std::size_t C = 0;
  for (std::size_t l : labels) C = std::max(C, l + 1);
  std::vector<std::size_t> count(C, 0);
  for (std::size_t l : labels) ++count[l];
  std::size_t present = 0;
  for (std::size_t c : count) present += c > 0;
  if (present < 2) throw ValidationError("silhouette_score: needs at least 2 clusters");

  Mat dist(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      const auto a = x.row(i), b = x.row(j);
      for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
      dist(i, j) = dist(j, i) = std::sqrt(s);
    }
  double total = 0.0;
  Vec sums(C);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) sums[labels[j]] += dist(i, j);
    const std::size_t own = labels[i];
    if (count[own] < 2) continue;
    const double a = sums[own] / static_cast<double>(count[own] - 1);
    double b = INFINITY;
    for (std::size_t c = 0; c < C; ++c)
      if (c != own && count[c] > 0) b = std::min(b, sums[c] / static_cast<double>(count[c]));
    const double m = std::max(a, b);
    if (m > 0.0) total += (b - a) / m;
  }
  return total / static_cast<double>(n);
}

}  // namespace mlad
