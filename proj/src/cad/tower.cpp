#include <algorithm>
#include <string>

#include "mlad/cad.hpp"
#include "mlad/errors.hpp"

namespace mlad {

ModalityTower::ModalityTower(const TowerSizes& sizes, Rng& init) : sizes_(sizes) {
  if (sizes.depth == 0) throw ValidationError("tower depth must be >= 1");
  if (sizes.input_dim == 0 || sizes.num_classes == 0 || sizes.width == 0 ||
      sizes.latent_dim == 0)
    throw ValidationError("tower sizes must be positive");
  std::size_t prev = sizes.input_dim;
  for (std::size_t d = 0; d < sizes.depth; ++d) {
    blocks_.emplace_back(prev, sizes.width, init);
    heads_.emplace_back(sizes.width, sizes.latent_dim, init);
    aux_.emplace_back(sizes.latent_dim, sizes.num_classes, init);
    prev = sizes.width;
  }
  decoder_ = Mlp2(sizes.latent_dim, sizes.decoder_hidden, sizes.input_dim, init);
  transform_ = Mlp2(sizes.input_dim, sizes.transform_hidden, sizes.input_dim, init);
}

ModalityTower::Pass ModalityTower::run(const Mat& x, std::size_t depth, bool with_logits) const {
  if (depth < 1 || depth > sizes_.depth) throw ValidationError("depth out of range");
  if (x.cols() != sizes_.input_dim) throw DimensionError("tower input width mismatch");
  Pass p;
  p.input = x;
  const Mat* h = &p.input;
  for (std::size_t d = 0; d < depth; ++d) {
    p.pre.push_back(blocks_[d].forward(*h));
    p.hidden.push_back(relu(p.pre.back()));
    h = &p.hidden.back();
    p.latent.push_back(heads_[d].forward(*h));
    if (with_logits) p.logits.push_back(aux_[d].forward(p.latent.back()));
  }
  return p;
}

Mat ModalityTower::forward_to_depth(const Mat& x, std::size_t d) const {
  if (d < 1 || d > sizes_.depth) throw ValidationError("depth out of range");
  if (x.cols() != sizes_.input_dim) throw DimensionError("tower input width mismatch");
  Mat h = x;
  for (std::size_t k = 0; k < d; ++k) h = relu(blocks_[k].forward(h));
  return heads_[d - 1].forward(h);
}

void ModalityTower::backward(const Pass& pass, std::span<const Mat> grad_latent,
                             std::span<const Mat> grad_logits) {
  const std::size_t depth = pass.latent.size();
  Mat g_hidden;  // gradient flowing into block d's output from block d+1
  for (std::size_t d = depth; d-- > 0;) {
    Mat g_lat;
    if (d < grad_latent.size() && !grad_latent[d].empty()) g_lat = grad_latent[d];
    if (d < grad_logits.size() && !grad_logits[d].empty()) {
      Mat g = aux_[d].backward(pass.latent[d], grad_logits[d]);
      if (g_lat.empty())
        g_lat = std::move(g);
      else
        g_lat += g;
    }
    if (!g_lat.empty()) {
      Mat g = heads_[d].backward(pass.hidden[d], g_lat);
      if (g_hidden.empty())
        g_hidden = std::move(g);
      else
        g_hidden += g;
    }
    if (g_hidden.empty()) continue;
    Mat g_pre = relu_backward(pass.pre[d], g_hidden);
    if (d == 0) {
      blocks_[d].accumulate(pass.input, g_pre);
      g_hidden = Mat();
    } else {
      g_hidden = blocks_[d].backward(pass.hidden[d - 1], g_pre);
    }
  }
}

std::vector<Param*> ModalityTower::params() {
  std::vector<Param*> out;
  for (auto& [name, p] : named_params()) out.push_back(p);
  return out;
}

std::vector<std::pair<std::string, Param*>> ModalityTower::named_params() {
  std::vector<std::pair<std::string, Param*>> out;
  auto add = [&](const std::string& prefix, Linear& l) {
    out.emplace_back(prefix + "/weight", &l.weight());
    out.emplace_back(prefix + "/bias", &l.bias());
  };
  for (std::size_t d = 0; d < blocks_.size(); ++d) {
    const std::string k = std::to_string(d + 1);
    add("block" + k, blocks_[d]);
    add("head" + k, heads_[d]);
    add("aux" + k, aux_[d]);
  }
  add("decoder/l1", decoder_.first());
  add("decoder/l2", decoder_.second());
  add("transform/l1", transform_.first());
  add("transform/l2", transform_.second());
  return out;
}

GaussianDiag fit_class_distribution(const Mat& latents) {
  if (latents.rows() < 2) throw ValidationError("fit_class_distribution: need at least 2 rows");
  GaussianDiag g;
  g.mean = column_mean(latents);
  g.var = column_var(latents, g.mean);
  for (double& v : g.var) v = std::max(v, kVarianceFloor);
  return g;
}

std::vector<ModalityTower> init_towers(const MultimodalDataset& ds, const TowerSizes& proto,
                                       std::uint64_t seed) {
  std::vector<ModalityTower> towers;
  for (std::size_t m = 0; m < ds.num_modalities(); ++m) {
    TowerSizes s = proto;
    s.input_dim = ds.features[m].cols();
    s.num_classes = ds.num_classes;
    Rng init = Rng::stream(seed, "init", m);
    towers.emplace_back(s, init);
  }
  return towers;
}

}  // namespace mlad
