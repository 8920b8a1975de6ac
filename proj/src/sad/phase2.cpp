#include <cmath>
#include <sstream>

#include "mlad/errors.hpp"
#include "mlad/sad.hpp"

namespace mlad {

TotalLoss total_loss(const SadInputs& in, std::span<const std::size_t> rows,
                     std::span<const ModalityPrior> priors, Rectifier& rectifier,
                     ClassifierHead& head, const SadOptions& opt, double nll_weight,
                     bool with_grad) {
  const std::size_t B = rows.size();
  if (B == 0) throw ValidationError("total_loss: empty batch");
  const std::size_t M = priors.size();
  const std::size_t d = in.z[rows[0]][0].size();
  const double nll_scale = 1.0 / static_cast<double>(M * B);

  TotalLoss out;
  std::vector<RectifyResult> fwd(B);
  std::vector<std::vector<Vec>> zh(B);
  Mat features(B, M * d);
  std::vector<std::size_t> labels(B);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t i = rows[b];
    labels[b] = in.labels.at(i);
    if (opt.cmr) {
      fwd[b] = rectify(in.z[i], in.entropies.row(i), priors, rectifier, opt);
      zh[b] = fwd[b].z_hat;
    } else {
      zh[b] = in.z[i];
    }
    for (std::size_t m = 0; m < M; ++m) {
      out.nll -= priors[m].log_density(zh[b][m]) * nll_scale;
      for (std::size_t j = 0; j < d; ++j) features(b, m * d + j) = zh[b][m][j];
    }
  }
  const Mat logits = head.map.forward(features);
  auto ce = cross_entropy(logits, labels);
  out.ce = ce.loss;
  out.loss = nll_weight * out.nll + out.ce;
  if (!with_grad) return out;

  const Mat g_feat = head.map.backward(features, ce.grad);
  if (!opt.cmr) return out;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<Vec> g(M);
    for (std::size_t m = 0; m < M; ++m) {
      g[m] = priors[m].precision_times(zh[b][m]);
      for (std::size_t j = 0; j < d; ++j)
        g[m][j] = g[m][j] * nll_weight * nll_scale + g_feat(b, m * d + j);
    }
    rectify_backward(in.z[rows[b]], fwd[b], priors, rectifier, opt, g);
  }
  return out;
}

Phase2Result phase2_train(const SadInputs& train, std::span<const ModalityPrior> priors,
                          Rectifier& rectifier, ClassifierHead& head, const SadOptions& opt,
                          const Phase2Config& cfg, std::uint64_t seed) {
  std::vector<Param*> params;
  if (opt.cmr) params = rectifier.params();
  head.map.collect(params);
  Rng batch_rng = Rng::stream(seed, "phase2-batch");
  const std::size_t N = train.labels.size();
  const std::size_t bs = std::max<std::size_t>(1, std::min(cfg.batch_size, N));
  Phase2Result res;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = batch_rng.permutation(N);
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < N; start += bs) {
      const std::size_t end = std::min(N, start + bs);
      std::span<const std::size_t> rows(order.data() + start, end - start);
      zero_grads(params);
      const auto step = total_loss(train, rows, priors, rectifier, head, opt, cfg.nll_weight, true);
      if (!std::isfinite(step.loss)) {
        std::ostringstream msg;
        msg << "phase2: non-finite loss at epoch " << epoch + 1 << " (nll=" << step.nll
            << ", ce=" << step.ce << ")";
        throw NumericalError(msg.str());
      }
      adam_all(params, cfg.lr, cfg.weight_decay);
      sum += step.loss;
      ++count;
    }
    res.epoch_loss.push_back(sum / static_cast<double>(count));
  }
  return res;
}

SadInputs sad_inputs(const MladModel& model, const MultimodalDataset& ds) {
  const std::size_t M = model.towers.size();
  if (ds.num_modalities() != M) throw DimensionError("sad_inputs: modality count mismatch");
  SadInputs in;
  in.labels = ds.labels;
  in.z.assign(ds.size(), std::vector<Vec>(M));
  in.entropies = Mat(ds.size(), M);
  for (std::size_t m = 0; m < M; ++m) {
    const auto exits = choose_exit_batch(model.towers[m], model.policy, m, ds.features[m],
                                         model.dynamic_exit);
    const Vec h = posterior_entropies(exits.latent, model.table, m);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto row = exits.latent.row(i);
      in.z[i][m].assign(row.begin(), row.end());
      in.entropies(i, m) = h[i];
    }
  }
  return in;
}

std::vector<ModalityPrior> fit_priors(const SadInputs& train, std::size_t num_modalities,
                                      const SadOptions& opt, std::vector<GmmSplit>* splits) {
  std::vector<ModalityPrior> priors;
  if (splits) splits->clear();
  for (std::size_t m = 0; m < num_modalities; ++m) {
    const Vec h = train.entropies.column(m);
    const GmmSplit split = fit_entropy_gmm(h);
    const auto low = low_confusion_or_fallback(h, split);
    Mat lat(low.size(), train.z.front()[m].size());
    Vec hl(low.size());
    for (std::size_t k = 0; k < low.size(); ++k) {
      lat.set_row(k, train.z[low[k]][m]);
      hl[k] = h[low[k]];
    }
    priors.push_back(fit_prior(lat, hl, opt.ridge, opt.reweight));
    if (splits) splits->push_back(split);
  }
  return priors;
}

namespace {

Prediction finish(const MladModel& model, std::vector<Vec> z, const Vec& h,
                  std::vector<std::size_t> depth, bool keep_attention) {
  const std::size_t M = z.size();
  Prediction p;
  p.exit_depth = std::move(depth);
  p.entropies = h;
  std::vector<Vec> zh = z;
  if (model.sad.cmr) {
    auto r = rectify(z, h, model.priors, model.rectifier, model.sad);
    zh = std::move(r.z_hat);
    p.gates = std::move(r.gates);
    if (keep_attention) {
      p.attention.resize(M);
      for (std::size_t m = 0; m < M; ++m)
        for (auto& t : r.pairs[m]) p.attention[m].push_back(std::move(t.attention));
    }
  } else {
    p.gates = Mat(M, M);
    for (std::size_t m = 0; m < M; ++m)
      p.gates.set_row(m, entropy_gate(h, m, model.sad.gate_eps));
  }
  Vec feat;
  for (const Vec& v : zh) feat.insert(feat.end(), v.begin(), v.end());
  const Mat logits = model.head.map.forward(Mat::row_vector(feat));
  const auto row = logits.row(0);
  p.logits.assign(row.begin(), row.end());
  p.probabilities = softmax_rows(logits).values();
  p.label = 0;
  for (std::size_t c = 1; c < p.logits.size(); ++c)
    if (p.logits[c] > p.logits[p.label]) p.label = c;
  return p;
}

}  // namespace

Prediction predict(const MladModel& model, std::span<const Vec> x, bool keep_attention) {
  const std::size_t M = model.towers.size();
  if (x.size() != M) throw DimensionError("predict: modality count mismatch");
  std::vector<Vec> z(M);
  Vec h(M);
  std::vector<std::size_t> depth(M);
  for (std::size_t m = 0; m < M; ++m) {
    const auto e = choose_exit_batch(model.towers[m], model.policy, m, Mat::row_vector(x[m]),
                                     model.dynamic_exit);
    depth[m] = e.depth[0];
    const auto row = e.latent.row(0);
    z[m].assign(row.begin(), row.end());
    h[m] = posterior_entropy(z[m], model.table, m);
  }
  return finish(model, std::move(z), h, std::move(depth), keep_attention);
}

std::vector<Prediction> predict_batch(const MladModel& model, const MultimodalDataset& ds,
                                      bool keep_attention) {
  const std::size_t M = model.towers.size();
  if (ds.num_modalities() != M) throw DimensionError("predict_batch: modality count mismatch");
  std::vector<BatchExit> exits;
  for (std::size_t m = 0; m < M; ++m)
    exits.push_back(choose_exit_batch(model.towers[m], model.policy, m, ds.features[m],
                                      model.dynamic_exit));
  std::vector<Prediction> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::vector<Vec> z(M);
    Vec h(M);
    std::vector<std::size_t> depth(M);
    for (std::size_t m = 0; m < M; ++m) {
      const auto row = exits[m].latent.row(i);
      z[m].assign(row.begin(), row.end());
      depth[m] = exits[m].depth[i];
      h[m] = posterior_entropy(z[m], model.table, m);
    }
    out.push_back(finish(model, std::move(z), h, std::move(depth), keep_attention));
  }
  return out;
}

}  // namespace mlad
