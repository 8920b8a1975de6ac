#include <algorithm>
#include <cmath>
#include <numbers>

#include "mlad/errors.hpp"
#include "mlad/sad.hpp"

namespace mlad {

double posterior_entropy(std::span<const double> z, const ClassLatentTable& table, std::size_t m) {
  const auto& dists = table.dist.at(m);
  const std::size_t C = dists.size();
  if (C == 0) throw ValidationError("posterior_entropy: empty class table");
  Vec logp(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (dists[c].dim() != z.size()) throw DimensionError("posterior_entropy: latent width mismatch");
    const double prior = c < table.class_prior.size() ? table.class_prior[c] : 1.0 / C;
    logp[c] = std::log(std::max(prior, 1e-300)) + dists[c].log_density(z);
  }
  const double lse = log_sum_exp(logp);
  double h = 0.0;
  for (double l : logp) {
    const double lp = l - lse;
    h -= std::exp(lp) * lp;
  }
  return std::clamp(h, 0.0, std::log(static_cast<double>(C)));
}

Vec posterior_entropies(const Mat& z, const ClassLatentTable& table, std::size_t m) {
  Vec h(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) h[i] = posterior_entropy(z.row(i), table, m);
  return h;
}

namespace {

double percentile(const Vec& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double log_normal(double x, double mu, double sigma) {
  const double u = (x - mu) / sigma;
  return -0.5 * u * u - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

}  // namespace

double gmm_threshold(const GmmSplit& g) {
  const double s1 = g.stddev[0] * g.stddev[0], s2 = g.stddev[1] * g.stddev[1];
  const double a = -0.5 / s1 + 0.5 / s2;
  const double b = g.mean[0] / s1 - g.mean[1] / s2;
  const double c = -0.5 * g.mean[0] * g.mean[0] / s1 + 0.5 * g.mean[1] * g.mean[1] / s2 +
                   std::log(g.weight[0] / g.stddev[0]) - std::log(g.weight[1] / g.stddev[1]);
  const double lo = std::min(g.mean[0], g.mean[1]), hi = std::max(g.mean[0], g.mean[1]);
  const double mid = 0.5 * (lo + hi);
  Vec roots;
  if (std::abs(a) < 1e-12 * (std::abs(b) + std::abs(c) + 1.0)) {
    if (b != 0.0) roots.push_back(-c / b);
  } else {
    const double disc = b * b - 4.0 * a * c;
    if (disc >= 0.0) {
      const double qd = -0.5 * (b + std::copysign(std::sqrt(disc), b));
      if (qd != 0.0) roots.push_back(c / qd);
      roots.push_back(qd / a);
    }
  }
  if (roots.empty()) return mid;
  double best = roots.front();
  for (double r : roots) {
    const bool in_r = r >= lo && r <= hi, in_b = best >= lo && best <= hi;
    if ((in_r && !in_b) || (in_r == in_b && std::abs(r - mid) < std::abs(best - mid))) best = r;
  }
  return best;
}

GmmSplit fit_entropy_gmm(std::span<const double> h, const GmmOptions& opt) {
  if (h.size() < 4) throw ValidationError("fit_entropy_gmm: need at least 4 values");
  Vec sorted(h.begin(), h.end());
  std::sort(sorted.begin(), sorted.end());
  const double median = percentile(sorted, 0.5);

  GmmSplit g;
  g.mean[0] = percentile(sorted, 0.25);
  g.mean[1] = percentile(sorted, 0.75);
  double mean = 0.0, var = 0.0;
  for (double x : h) mean += x;
  mean /= static_cast<double>(h.size());
  for (double x : h) var += (x - mean) * (x - mean);
  var /= static_cast<double>(h.size());
  g.stddev[0] = g.stddev[1] = std::max(std::sqrt(var) / 2.0, opt.sigma_floor);

  bool collapsed = std::abs(g.mean[1] - g.mean[0]) < 1e-6;
  bool tol_reached = false;
  const std::size_t n = h.size();
  Vec resp(n);
  double prev_ll = -INFINITY;
  for (std::size_t it = 0; it < opt.max_iterations && !collapsed; ++it) {
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double l0 = std::log(g.weight[0]) + log_normal(h[i], g.mean[0], g.stddev[0]);
      const double l1 = std::log(g.weight[1]) + log_normal(h[i], g.mean[1], g.stddev[1]);
      const double mx = std::max(l0, l1);
      const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
      resp[i] = std::exp(l1 - lse);
      ll += lse;
    }
    ll /= static_cast<double>(n);
    double r1 = 0.0, s0 = 0.0, s1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      r1 += resp[i];
      s0 += (1.0 - resp[i]) * h[i];
      s1 += resp[i] * h[i];
    }
    const double r0 = static_cast<double>(n) - r1;
    g.iterations = it + 1;
    if (r0 / n < opt.weight_floor || r1 / n < opt.weight_floor) {
      collapsed = true;
      break;
    }
    g.mean[0] = s0 / r0;
    g.mean[1] = s1 / r1;
    double v0 = 0.0, v1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      v0 += (1.0 - resp[i]) * (h[i] - g.mean[0]) * (h[i] - g.mean[0]);
      v1 += resp[i] * (h[i] - g.mean[1]) * (h[i] - g.mean[1]);
    }
    g.stddev[0] = std::max(std::sqrt(v0 / r0), opt.sigma_floor);
    g.stddev[1] = std::max(std::sqrt(v1 / r1), opt.sigma_floor);
    g.weight[0] = r0 / n;
    g.weight[1] = r1 / n;
    if (std::abs(g.mean[1] - g.mean[0]) < 1e-6) {
      collapsed = true;
      break;
    }
    if (std::abs(ll - prev_ll) < opt.tolerance) {
      tol_reached = true;
      break;
    }
    prev_ll = ll;
  }

  if (g.mean[0] > g.mean[1]) {
    std::swap(g.mean[0], g.mean[1]);
    std::swap(g.stddev[0], g.stddev[1]);
    std::swap(g.weight[0], g.weight[1]);
  }
  if (collapsed) {
    g.converged = false;
    g.threshold = median;
  } else {
    g.converged = tol_reached;
    g.threshold = gmm_threshold(g);
  }
  return g;
}

ConfusionSplit select_low_confusion(std::span<const double> h, const GmmSplit& split) {
  ConfusionSplit out;
  for (std::size_t i = 0; i < h.size(); ++i) (h[i] < split.threshold ? out.low : out.high).push_back(i);
  if (out.low.empty())
    throw ValidationError("select_low_confusion: no sample below the threshold; use the "
                          "lowest-entropy half instead");
  return out;
}

std::vector<std::size_t> low_confusion_or_fallback(std::span<const double> h,
                                                   const GmmSplit& split) {
  std::vector<std::size_t> low;
  for (std::size_t i = 0; i < h.size(); ++i)
    if (h[i] < split.threshold) low.push_back(i);
  if (low.size() >= 2) return low;
  std::vector<std::size_t> order(h.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return h[a] < h[b]; });
  order.resize(std::max<std::size_t>(2, h.size() / 2));
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace mlad
