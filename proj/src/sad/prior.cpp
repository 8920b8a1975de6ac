#include <algorithm>
#include <cmath>
#include <numbers>

#include "mlad/errors.hpp"
#include "mlad/sad.hpp"

namespace mlad {

Vec eigen_reweight(std::span<const double> eigvals, ReweightMode mode) {
  const std::size_t d = eigvals.size();
  Vec w(d, 1.0 / static_cast<double>(d));
  if (mode == ReweightMode::kUniform || d == 0) return w;
  const double sign = mode == ReweightMode::kNormal ? -1.0 : 1.0;
  Vec logits(d);
  for (std::size_t k = 0; k < d; ++k) logits[k] = sign * eigvals[k];
  const double lse = log_sum_exp(logits);
  for (std::size_t k = 0; k < d; ++k) w[k] = std::exp(logits[k] - lse);
  return w;
}

double ModalityPrior::log_density(std::span<const double> z) const {
  const std::size_t d = mean.size();
  if (z.size() != d) throw DimensionError("prior log_density: width mismatch");
  Vec diff(d);
  for (std::size_t j = 0; j < d; ++j) diff[j] = z[j] - mean[j];
  const Vec proj = matvec_t(eig.eigvecs, diff);
  double quad = 0.0, logdet = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    quad += proj[k] * proj[k] / eig.eigvals[k];
    logdet += std::log(eig.eigvals[k]);
  }
  return -0.5 * (quad + logdet + static_cast<double>(d) * std::log(2.0 * std::numbers::pi));
}

Vec ModalityPrior::precision_times(std::span<const double> z) const {
  const std::size_t d = mean.size();
  Vec diff(d);
  for (std::size_t j = 0; j < d; ++j) diff[j] = z[j] - mean[j];
  Vec proj = matvec_t(eig.eigvecs, diff);
  for (std::size_t k = 0; k < d; ++k) proj[k] /= eig.eigvals[k];
  return matvec(eig.eigvecs, proj);
}

ModalityPrior fit_prior(const Mat& latents, std::span<const double> entropies, double ridge,
                        ReweightMode mode) {
  if (latents.rows() < 2) throw ValidationError("fit_prior: need at least 2 low-confusion samples");
  if (entropies.size() != latents.rows()) throw DimensionError("fit_prior: entropy count mismatch");
  if (ridge <= 0.0) throw ValidationError("fit_prior: ridge must be positive");
  Vec logits(entropies.size());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = -entropies[i];
  const double lse = log_sum_exp(logits);
  Vec w(logits.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(logits[i] - lse);

  ModalityPrior p;
  p.support_count = latents.rows();
  p.mean = weighted_mean(latents, w);
  p.cov = weighted_covariance(latents, w, p.mean);
  const std::size_t d = p.cov.rows();
  for (std::size_t i = 0; i < d; ++i) {
    p.cov(i, i) += ridge;
    for (std::size_t j = 0; j < i; ++j) {
      const double s = 0.5 * (p.cov(i, j) + p.cov(j, i));
      p.cov(i, j) = p.cov(j, i) = s;
    }
  }
  p.eig = sym_eig(p.cov);
  for (double& l : p.eig.eigvals) l = std::max(l, ridge);
  p.reweight = eigen_reweight(p.eig.eigvals, mode);
  return p;
}

}  // namespace mlad
