#include <cmath>
#include <sstream>

#include "mlad/cad.hpp"
#include "mlad/errors.hpp"

namespace mlad {

std::vector<std::vector<std::size_t>> stratified_batches(std::span<const std::size_t> labels,
                                                         std::size_t num_classes,
                                                         std::size_t batch_size, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(labels[i]).push_back(i);
  std::size_t smallest = labels.size();
  for (const auto& c : by_class) smallest = std::min(smallest, c.size());
  if (smallest < 2) throw ValidationError("every class needs at least 2 training samples");
  std::size_t count = std::max<std::size_t>(1, labels.size() / std::max<std::size_t>(1, batch_size));
  count = std::min(count, smallest / 2);
  std::vector<std::vector<std::size_t>> batches(count);
  for (auto& idx : by_class) {
    rng.shuffle(std::span<std::size_t>(idx));
    for (std::size_t k = 0; k < idx.size(); ++k) batches[k % count].push_back(idx[k]);
  }
  for (auto& b : batches) std::sort(b.begin(), b.end());
  return batches;
}

Phase1StepResult phase1_step(std::span<ModalityTower> towers, const Phase1Batch& batch,
                             const Phase1Config& cfg, std::uint64_t draw_seed, bool with_grad) {
  const std::size_t M = towers.size();
  if (batch.x.size() != M) throw DimensionError("phase1_step: modality count");
  const std::size_t C = towers.front().sizes().num_classes;
  const std::size_t D = towers.front().depth();

  std::vector<std::vector<std::size_t>> rows(C);
  for (std::size_t i = 0; i < batch.labels.size(); ++i) rows.at(batch.labels[i]).push_back(i);
  for (std::size_t c = 0; c < C; ++c)
    if (rows[c].size() < 2)
      throw ValidationError("phase1_step: class " + std::to_string(c) +
                            " has fewer than 2 rows in the batch");

  Phase1StepResult out;
  std::vector<ModalityTower::Pass> passes;
  std::vector<std::vector<Mat>> grad_logits(M), grad_latent(M);
  for (std::size_t m = 0; m < M; ++m) {
    passes.push_back(towers[m].run(batch.x[m], D, true));
    grad_logits[m].resize(D);
    grad_latent[m].resize(D);
    for (std::size_t d = 0; d < D; ++d) {
      auto ce = cross_entropy(passes[m].logits[d], batch.labels);
      out.ce += ce.loss;
      grad_logits[m][d] = std::move(ce.grad);
    }
  }

  std::vector<std::size_t> depths;
  if (cfg.depth_mode == CadDepthMode::kFinal) {
    depths.push_back(D);
  } else {
    for (std::size_t d = 1; d <= D; ++d) depths.push_back(d);
  }
  const double depth_weight = cfg.cad_weight / static_cast<double>(depths.size());
  const double w_intra = 1.0 / static_cast<double>(M * C);
  const double w_cross = C > 1 ? 1.0 / static_cast<double>(M * C * (C - 1)) : 0.0;

  for (std::size_t dd : depths) {
    for (std::size_t m = 0; m < M; ++m) {
      Rng sampling = Rng::stream(draw_seed, "sampling", dd * 64 + m);
      Rng residual = Rng::stream(draw_seed, "residual", dd * 64 + m);
      std::vector<Mat> class_x, class_lat, class_z;
      std::vector<ReparamSample> samples;
      for (std::size_t c = 0; c < C; ++c) {
        class_x.push_back(select_rows(batch.x[m], rows[c]));
        class_lat.push_back(select_rows(passes[m].latent[dd - 1], rows[c]));
        samples.push_back(reparam_sample(class_lat.back(), sampling));
        class_z.push_back(samples.back().z);
      }
      auto terms = cad_modality_terms(towers[m], class_x, class_z, cfg.cad, sampling, residual,
                                      with_grad, depth_weight * w_intra, depth_weight * w_cross);
      for (std::size_t c = 0; c < C; ++c) {
        out.cad.intra += depth_weight * w_intra * terms.class_intra[c];
        for (std::size_t c2 = 0; c2 < C; ++c2)
          out.cad.cross += depth_weight * w_cross * terms.class_cross[c][c2];
      }
      if (!with_grad) continue;
      Mat& g = grad_latent[m][dd - 1];
      if (g.empty()) g = Mat(batch.x[m].rows(), towers[m].sizes().latent_dim);
      for (std::size_t c = 0; c < C; ++c) {
        Mat gl = reparam_backward(class_lat[c], samples[c], terms.grad_z[c]);
        for (std::size_t k = 0; k < rows[c].size(); ++k) {
          auto dst = g.row(rows[c][k]);
          const auto src = gl.row(k);
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
      }
    }
  }
  out.cad.total = out.cad.intra + out.cad.cross;
  out.loss = out.ce + out.cad.total;

  if (with_grad)
    for (std::size_t m = 0; m < M; ++m) towers[m].backward(passes[m], grad_latent[m], grad_logits[m]);
  return out;
}

DepthCache fit_depth_cache(const std::vector<ModalityTower>& towers,
                           const MultimodalDataset& train) {
  const auto idx = train.class_indices();
  DepthCache cache(towers.size());
  for (std::size_t m = 0; m < towers.size(); ++m) {
    const auto pass = towers[m].run(train.features[m], towers[m].depth(), false);
    for (std::size_t d = 0; d < towers[m].depth(); ++d) {
      std::vector<GaussianDiag> per_class;
      for (const auto& rows : idx) per_class.push_back(fit_class_distribution(select_rows(pass.latent[d], rows)));
      cache[m].push_back(std::move(per_class));
    }
  }
  return cache;
}

ClassLatentTable final_depth_table(const DepthCache& cache, const MultimodalDataset& train) {
  ClassLatentTable t;
  const auto counts = train.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c)
    t.class_prior.push_back(static_cast<double>(counts[c]) / static_cast<double>(train.size()));
  for (const auto& per_depth : cache) {
    t.dist.push_back(per_depth.back());
    t.exit_depth.emplace_back(counts.size(), per_depth.size());
  }
  return t;
}

Phase1Result phase1_train(std::vector<ModalityTower>& towers, const MultimodalDataset& train,
                          const Phase1Config& cfg, std::uint64_t seed) {
  train.validate();
  Phase1Result res;
  Rng batch_rng = Rng::stream(seed, "batch");
  std::vector<Param*> params;
  for (auto& t : towers)
    for (Param* p : t.params()) params.push_back(p);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.lr;
    if (cfg.lr_decay_every > 0)
      lr *= std::pow(cfg.lr_decay, static_cast<double>(epoch / cfg.lr_decay_every));
    const auto batches = stratified_batches(train.labels, train.num_classes, cfg.batch_size, batch_rng);
    double sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      Phase1Batch batch;
      for (const Mat& f : train.features) batch.x.push_back(select_rows(f, batches[b]));
      for (std::size_t i : batches[b]) batch.labels.push_back(train.labels[i]);
      zero_grads(params);
      const std::uint64_t draw_seed = Rng::stream(seed, "draws", epoch * 100003 + b).next_u64();
      const auto step = phase1_step(towers, batch, cfg, draw_seed, true);
      if (!std::isfinite(step.loss)) {
        std::ostringstream msg;
        msg << "phase1: non-finite loss at epoch " << epoch + 1 << " batch " << b + 1
            << " (ce=" << step.ce << ", intra=" << step.cad.intra << ", cross=" << step.cad.cross
            << ")";
        throw NumericalError(msg.str());
      }
      adam_all(params, lr, cfg.weight_decay);
      sum += step.loss;
    }
    res.epoch_loss.push_back(sum / static_cast<double>(batches.size()));
  }
  res.cache = fit_depth_cache(towers, train);
  res.table = final_depth_table(res.cache, train);
  return res;
}

}  // namespace mlad
