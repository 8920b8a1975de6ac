#include <algorithm>
#include <cmath>

#include "mlad/cad.hpp"
#include "mlad/errors.hpp"

namespace mlad {

namespace {

double entry_std(const Mat& a, double* mean_out) {
  const auto v = a.flat();
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  if (mean_out) *mean_out = mean;
  return std::sqrt(ss / static_cast<double>(v.size()));
}

struct ClassState {
  Mlp2::Cache psi_cache;
  Mat x_hat;
  Mat d0;     // X - psi(z)
  Mat n0;     // standard normal residual noise
  double d0_mean = 0.0;
  double d0_std = 0.0;
  Mat r;
  std::vector<std::size_t> sub;
  Mlp2::Cache rho_cache;
  Mat y;      // transformed (or raw) residual rows used in the cross term
  Mat x_sub;  // this class's inputs at the equalized rows
};

}  // namespace

Mat compute_residual(const Mat& x_c, const Mat& z_c, const ModalityTower& tower, double alpha,
                     Rng& residual_rng) {
  Mat d0 = x_c - tower.decoder().forward(z_c);
  const double sigma = alpha * entry_std(d0, nullptr);
  Mat r = d0;
  for (double& v : r.flat()) v += sigma * residual_rng.normal();
  return r;
}

CadModalityResult cad_modality_terms(ModalityTower& tower, std::span<const Mat> class_x,
                                     std::span<const Mat> class_z, const CadOptions& opt,
                                     Rng& sampling_rng, Rng& residual_rng, bool with_grad,
                                     double intra_weight, double cross_weight) {
  const std::size_t C = class_x.size();
  if (class_z.size() != C) throw DimensionError("cad: class count mismatch");
  std::size_t n_min = 0;
  for (std::size_t c = 0; c < C; ++c) {
    if (class_x[c].rows() == 0) throw ValidationError("cad: class " + std::to_string(c) +
                                                      " missing from batch");
    if (class_z[c].rows() != class_x[c].rows())
      throw DimensionError("cad: latent/input row mismatch");
    n_min = c == 0 ? class_x[c].rows() : std::min(n_min, class_x[c].rows());
  }
  const bool use_cross = opt.cross_term && C > 1;
  const double d = static_cast<double>(tower.sizes().input_dim);

  std::vector<ClassState> st(C);
  CadModalityResult res;
  res.class_intra.assign(C, 0.0);
  res.class_cross.assign(C, std::vector<double>(C, 0.0));

  for (std::size_t c = 0; c < C; ++c) {
    ClassState& s = st[c];
    const Mat& x = class_x[c];
    const std::size_t n = x.rows();
    s.x_hat = tower.decoder().forward(class_z[c], s.psi_cache);
    s.d0 = x - s.x_hat;
    s.d0_std = entry_std(s.d0, &s.d0_mean);
    s.n0 = standard_normal(residual_rng, n, x.cols());
    s.r = s.d0;
    const double sigma = opt.alpha * s.d0_std;
    {
      auto rv = s.r.flat();
      auto nv = s.n0.flat();
      for (std::size_t i = 0; i < rv.size(); ++i) rv[i] += sigma * nv[i];
    }
    const double scale_i = opt.reduction == CadReduction::kMean ? 1.0 / (static_cast<double>(n) * d) : 1.0;
    res.class_intra[c] = frobenius_sq(s.d0) * scale_i;

    if (use_cross) {
      if (n > n_min) {
        auto perm = sampling_rng.permutation(n);
        perm.resize(n_min);
        std::sort(perm.begin(), perm.end());
        s.sub = std::move(perm);
      } else {
        s.sub.resize(n);
        for (std::size_t i = 0; i < n; ++i) s.sub[i] = i;
      }
      Mat r_sub = select_rows(s.r, s.sub);
      s.y = opt.decode_residual ? tower.transform().forward(r_sub, s.rho_cache) : r_sub;
      s.x_sub = select_rows(x, s.sub);
    }
  }

  const double scale_x =
      opt.reduction == CadReduction::kMean ? 1.0 / (static_cast<double>(n_min) * d) : 1.0;
  if (use_cross)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t c2 = 0; c2 < C; ++c2)
        if (c2 != c) res.class_cross[c][c2] = frobenius_sq(st[c].y - st[c2].x_sub) * scale_x;

  if (!with_grad) return res;

  res.grad_z.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    ClassState& s = st[c];
    const Mat& x = class_x[c];
    const std::size_t n = x.rows();
    Mat g_r(n, x.cols());
    if (use_cross && cross_weight != 0.0) {
      Mat g_y(s.y.rows(), s.y.cols());
      for (std::size_t c2 = 0; c2 < C; ++c2) {
        if (c2 == c) continue;
        g_y += (s.y - st[c2].x_sub) * (2.0 * scale_x * cross_weight);
      }
      Mat g_rsub = opt.decode_residual ? tower.transform().backward(s.rho_cache, g_y) : g_y;
      for (std::size_t k = 0; k < s.sub.size(); ++k) {
        auto dst = g_r.row(s.sub[k]);
        const auto src = g_rsub.row(k);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
    }
    // R = D0 + alpha * std(D0) * N0
    Mat g_d0 = g_r;
    if (opt.alpha != 0.0 && s.d0_std > 0.0) {
      const double g_sigma = opt.alpha * dot(g_r.flat(), s.n0.flat());
      const double k = g_sigma / (static_cast<double>(s.d0.size()) * s.d0_std);
      auto gv = g_d0.flat();
      auto dv = s.d0.flat();
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += k * (dv[i] - s.d0_mean);
    }
    const double scale_i = opt.reduction == CadReduction::kMean ? 1.0 / (static_cast<double>(n) * d) : 1.0;
    // x_hat enters as -x_hat in D0; the intra term is ||x_hat - X||^2 = ||D0||^2.
    Mat g_xhat = g_d0 * -1.0;
    g_xhat += s.d0 * (-2.0 * scale_i * intra_weight);
    res.grad_z[c] = tower.decoder().backward(s.psi_cache, g_xhat);
  }
  return res;
}

CadLossResult loss_cad(std::span<ModalityTower> towers,
                       const std::vector<std::vector<Mat>>& class_x,
                       const std::vector<std::vector<Mat>>& class_z, const CadOptions& opt,
                       Rng& sampling_rng, Rng& residual_rng, bool with_grad) {
  const std::size_t M = towers.size();
  if (class_x.size() != M || class_z.size() != M) throw DimensionError("loss_cad: modality count");
  CadLossResult out;
  out.grad_z.resize(M);
  for (std::size_t m = 0; m < M; ++m) {
    const std::size_t C = class_x[m].size();
    const double w_intra = 1.0 / static_cast<double>(M * C);
    const double w_cross = C > 1 ? 1.0 / static_cast<double>(M * C * (C - 1)) : 0.0;
    auto r = cad_modality_terms(towers[m], class_x[m], class_z[m], opt, sampling_rng,
                                residual_rng, with_grad, w_intra, w_cross);
    for (std::size_t c = 0; c < C; ++c) {
      out.parts.intra += w_intra * r.class_intra[c];
      for (std::size_t c2 = 0; c2 < C; ++c2) out.parts.cross += w_cross * r.class_cross[c][c2];
    }
    out.grad_z[m] = std::move(r.grad_z);
  }
  out.parts.total = out.parts.intra + out.parts.cross;
  return out;
}

ReparamSample reparam_sample(const Mat& latents, Rng& sampling_rng) {
  ReparamSample s;
  s.mean = column_mean(latents);
  s.var = column_var(latents, s.mean);
  for (double& v : s.var) v = std::max(v, kVarianceFloor);
  s.eps = standard_normal(sampling_rng, latents.rows(), latents.cols());
  s.z = Mat(latents.rows(), latents.cols());
  for (std::size_t i = 0; i < latents.rows(); ++i)
    for (std::size_t j = 0; j < latents.cols(); ++j)
      s.z(i, j) = s.mean[j] + std::sqrt(s.var[j]) * s.eps(i, j);
  return s;
}

Mat reparam_backward(const Mat& latents, const ReparamSample& s, const Mat& grad_z) {
  const std::size_t n = latents.rows(), L = latents.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  Vec g_mean(L, 0.0), g_var(L, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < L; ++j) {
      g_mean[j] += grad_z(i, j);
      g_var[j] += grad_z(i, j) * s.eps(i, j);
    }
  const Vec raw_var = column_var(latents, s.mean);
  for (std::size_t j = 0; j < L; ++j)
    g_var[j] = raw_var[j] > kVarianceFloor ? g_var[j] / (2.0 * std::sqrt(s.var[j])) : 0.0;
  Mat g(n, L);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < L; ++j)
      g(i, j) = g_mean[j] * inv_n + g_var[j] * 2.0 * (latents(i, j) - s.mean[j]) * inv_n;
  return g;
}

}  // namespace mlad
