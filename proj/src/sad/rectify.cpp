#include <cmath>

#include "mlad/errors.hpp"
#include "mlad/sad.hpp"

namespace mlad {

Vec entropy_gate(std::span<const double> h, std::size_t m, double eps) {
  if (m >= h.size()) throw IndexError("entropy_gate: target out of range");
  Vec logits(h.size());
  for (std::size_t n = 0; n < h.size(); ++n) logits[n] = h[m] / (h[n] + eps);
  const double lse = log_sum_exp(logits);
  for (double& v : logits) v = std::exp(v - lse);
  return logits;
}

Rectifier::Rectifier(std::size_t num_modalities, std::size_t dim, Rng& init) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  auto make = [&] {
    Mat w(dim, dim);
    for (double& v : w.flat()) v = init.uniform(-bound, bound);
    return Param(std::move(w));
  };
  for (std::size_t m = 0; m < num_modalities; ++m) {
    AttentionMaps a;
    a.wq = make();
    a.wk = make();
    a.wv = make();
    maps_.push_back(std::move(a));
  }
}

std::vector<Param*> Rectifier::params() {
  std::vector<Param*> out;
  for (auto& a : maps_) {
    out.push_back(&a.wq);
    out.push_back(&a.wk);
    out.push_back(&a.wv);
  }
  return out;
}

namespace {

// Maps the compensation offset z~ - z into the update added to z.
Vec project_update(const Vec& delta, const ModalityPrior& prior, const SadOptions& opt) {
  if (!opt.cfmp) return delta;
  Vec p = matvec_t(prior.eig.eigvecs, delta);
  for (std::size_t k = 0; k < p.size(); ++k) p[k] *= prior.reweight[k];
  if (opt.literal_frame) return p;
  return matvec(prior.eig.eigvecs, p);
}

// Adjoint of project_update.
Vec project_update_adjoint(const Vec& g, const ModalityPrior& prior, const SadOptions& opt) {
  if (!opt.cfmp) return g;
  Vec p = opt.literal_frame ? g : matvec_t(prior.eig.eigvecs, g);
  for (std::size_t k = 0; k < p.size(); ++k) p[k] *= prior.reweight[k];
  return matvec(prior.eig.eigvecs, p);
}

}  // namespace

RectifyResult rectify(std::span<const Vec> z, std::span<const double> entropies,
                      std::span<const ModalityPrior> priors, const Rectifier& rectifier,
                      const SadOptions& opt) {
  const std::size_t M = z.size();
  if (M < 2) throw ValidationError("rectify: needs at least two modalities");
  if (entropies.size() != M || priors.size() != M || rectifier.num_modalities() != M)
    throw DimensionError("rectify: modality count mismatch");
  const std::size_t d = rectifier.dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (const Vec& v : z)
    if (v.size() != d) throw DimensionError("rectify: latent width mismatch");

  RectifyResult r;
  r.gates = Mat(M, M);
  r.pairs.resize(M);
  for (std::size_t m = 0; m < M; ++m) {
    const Vec gate = entropy_gate(entropies, m, opt.gate_eps);
    r.gates.set_row(m, gate);
    const AttentionMaps& maps = rectifier.target(m);
    const Vec q = matvec(maps.wq.value, z[m]);
    Vec comp(d, 0.0);
    r.pairs[m].resize(M);
    for (std::size_t n = 0; n < M; ++n) {
      if (n == m) continue;
      PairTrace& t = r.pairs[m][n];
      t.q = q;
      t.k = matvec(maps.wk.value, z[n]);
      t.v = matvec(maps.wv.value, z[n]);
      Mat s(d, d);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j)
          s(i, j) = q[i] * t.k[j] * inv_sqrt_d + (opt.additive_gate ? gate[n] : 0.0);
      t.attention = softmax_rows(s);
      const Vec c = matvec(t.attention, t.v);
      const double scale = opt.additive_gate ? 1.0 : gate[n];
      for (std::size_t i = 0; i < d; ++i) comp[i] += scale * c[i];
    }
    Vec delta(d);
    for (std::size_t i = 0; i < d; ++i) delta[i] = comp[i] - z[m][i];
    const Vec update = project_update(opt.cfmp ? delta : comp, priors[m], opt);
    Vec zh(d);
    for (std::size_t i = 0; i < d; ++i) zh[i] = z[m][i] + update[i];
    r.z_hat.push_back(std::move(zh));
    r.compensation.push_back(std::move(comp));
  }
  return r;
}

RectifyResult rectify(std::span<const Vec> z, const ClassLatentTable& table,
                      std::span<const ModalityPrior> priors, const Rectifier& rectifier,
                      const SadOptions& opt) {
  Vec h(z.size());
  for (std::size_t m = 0; m < z.size(); ++m) h[m] = posterior_entropy(z[m], table, m);
  return rectify(z, h, priors, rectifier, opt);
}

void rectify_backward(std::span<const Vec> z, const RectifyResult& fwd,
                      std::span<const ModalityPrior> priors, Rectifier& rectifier,
                      const SadOptions& opt, std::span<const Vec> grad_z_hat) {
  const std::size_t M = z.size();
  const std::size_t d = rectifier.dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t m = 0; m < M; ++m) {
    const Vec g_comp = project_update_adjoint(grad_z_hat[m], priors[m], opt);
    AttentionMaps& maps = rectifier.target(m);
    Vec g_q(d, 0.0);
    for (std::size_t n = 0; n < M; ++n) {
      if (n == m) continue;
      const PairTrace& t = fwd.pairs[m][n];
      const double scale = opt.additive_gate ? 1.0 : fwd.gates(m, n);
      Vec g_c(d);
      for (std::size_t i = 0; i < d; ++i) g_c[i] = scale * g_comp[i];
      Mat g_a(d, d);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) g_a(i, j) = g_c[i] * t.v[j];
      const Vec g_v = matvec_t(t.attention, g_c);
      const Mat g_s = softmax_rows_backward(t.attention, g_a);
      const Vec g_k = matvec_t(g_s, t.q);
      const Vec g_qn = matvec(g_s, t.k);
      for (std::size_t i = 0; i < d; ++i) g_q[i] += g_qn[i] * inv_sqrt_d;
      for (std::size_t i = 0; i < d; ++i) {
        const double gk = g_k[i] * inv_sqrt_d;
        auto wk = maps.wk.grad.row(i);
        auto wv = maps.wv.grad.row(i);
        for (std::size_t j = 0; j < d; ++j) {
          wk[j] += gk * z[n][j];
          wv[j] += g_v[i] * z[n][j];
        }
      }
    }
    for (std::size_t i = 0; i < d; ++i) {
      auto wq = maps.wq.grad.row(i);
      for (std::size_t j = 0; j < d; ++j) wq[j] += g_q[i] * z[m][j];
    }
  }
}

}  // namespace mlad
