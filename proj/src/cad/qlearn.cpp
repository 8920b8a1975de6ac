#include <algorithm>
#include <cmath>

#include "mlad/cad.hpp"
#include "mlad/errors.hpp"

namespace mlad {

ExitPolicy ExitPolicy::init(const std::vector<ModalityTower>& towers, std::uint64_t seed,
                            double gamma) {
  ExitPolicy p;
  p.gamma = gamma;
  for (std::size_t m = 0; m < towers.size(); ++m) {
    Rng init = Rng::stream(seed, "init-q", m);
    std::vector<Linear> heads;
    for (std::size_t d = 1; d < towers[m].depth(); ++d)
      heads.emplace_back(towers[m].sizes().latent_dim, 2, init);
    p.q_heads.push_back(std::move(heads));
  }
  return p;
}

bool ExitPolicy::prefers_exit(std::size_t m, std::size_t d, std::span<const double> state) const {
  const Linear& head = q_heads.at(m).at(d - 1);
  const auto& w = head.weight().value;
  const auto b = head.bias().value.row(0);
  double q_continue = b[0], q_exit = b[1];
  for (std::size_t k = 0; k < state.size(); ++k) {
    q_continue += state[k] * w(k, 0);
    q_exit += state[k] * w(k, 1);
  }
  return q_exit > q_continue;
}

double exploration_rate(const QLearnConfig& cfg, std::size_t episode) {
  if (cfg.episodes <= 1) return cfg.eps_end;
  const double t = static_cast<double>(episode) / static_cast<double>(cfg.episodes - 1);
  return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * std::min(t, 1.0);
}

double bellman_target(bool exit, double reward, double gamma, double next_value) {
  return exit ? reward : gamma * next_value;
}

std::vector<std::vector<Vec>> depth_rewards(std::vector<ModalityTower>& towers,
                                            const DepthCache& cache,
                                            const MultimodalDataset& train,
                                            const CadOptions& cad, bool per_class,
                                            std::size_t draws, std::uint64_t seed) {
  const auto idx = train.class_indices();
  const std::size_t C = train.num_classes;
  std::vector<std::vector<Vec>> loss(towers.size());
  for (std::size_t m = 0; m < towers.size(); ++m) {
    std::vector<Mat> class_x;
    for (const auto& rows : idx) class_x.push_back(select_rows(train.features[m], rows));
    for (std::size_t d = 0; d < towers[m].depth(); ++d) {
      Vec per(C, 0.0);
      for (std::size_t k = 0; k < std::max<std::size_t>(1, draws); ++k) {
        Rng sampling = Rng::stream(seed, "reward-sampling", (m * 64 + d) * 1024 + k);
        Rng residual = Rng::stream(seed, "reward-residual", (m * 64 + d) * 1024 + k);
        std::vector<Mat> class_z;
        for (std::size_t c = 0; c < C; ++c) {
          const GaussianDiag& g = cache[m][d][c];
          Vec sd(g.var.size());
          for (std::size_t j = 0; j < sd.size(); ++j) sd[j] = std::sqrt(g.var[j]);
          Mat z(idx[c].size(), g.dim());
          for (std::size_t i = 0; i < z.rows(); ++i) z.set_row(i, gaussian_sample(sampling, g.mean, sd));
          class_z.push_back(std::move(z));
        }
        auto t = cad_modality_terms(towers[m], class_x, class_z, cad, sampling, residual, false,
                                    0.0, 0.0);
        Vec draw(C, 0.0);
        double global = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          double cross = 0.0;
          for (std::size_t c2 = 0; c2 < C; ++c2) cross += t.class_cross[c][c2];
          if (C > 1) cross /= static_cast<double>(C - 1);
          draw[c] = t.class_intra[c] + cross;
          global += draw[c] / static_cast<double>(C);
        }
        for (std::size_t c = 0; c < C; ++c) per[c] += per_class ? draw[c] : global;
      }
      for (double& v : per) v /= static_cast<double>(std::max<std::size_t>(1, draws));
      loss[m].push_back(std::move(per));
    }
  }
  return loss;
}

namespace {

struct Transition {
  std::size_t row;
  std::size_t depth;  // 1-based layer where the action was taken
  bool exit;
};

double max_q(const Linear& head, std::span<const double> state) {
  const auto& w = head.weight().value;
  const auto b = head.bias().value.row(0);
  double q0 = b[0], q1 = b[1];
  for (std::size_t k = 0; k < state.size(); ++k) {
    q0 += state[k] * w(k, 0);
    q1 += state[k] * w(k, 1);
  }
  return std::max(q0, q1);
}

}  // namespace

QLearnResult qlearn_train(std::vector<ModalityTower>& towers, ExitPolicy& policy,
                          ClassLatentTable& table, const DepthCache& cache,
                          const MultimodalDataset& train, const QLearnConfig& cfg,
                          const CadOptions& cad, std::uint64_t seed) {
  const std::size_t M = towers.size();
  QLearnResult res;
  const auto losses = depth_rewards(towers, cache, train, cad, cfg.per_class_reward,
                                    cfg.reward_draws, seed);
  res.rewards = losses;
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t c = 0; c < train.num_classes; ++c) {
      double shift = 0.0;
      if (cfg.normalize_rewards) {
        shift = losses[m][0][c];
        for (const auto& per_d : losses[m]) shift = std::min(shift, per_d[c]);
      }
      for (auto& per_d : res.rewards[m]) per_d[c] = std::exp(-(per_d[c] - shift));
    }

  std::vector<std::vector<Mat>> latents(M);
  for (std::size_t m = 0; m < M; ++m)
    latents[m] = towers[m].run(train.features[m], towers[m].depth(), false).latent;

  Rng explore = Rng::stream(seed, "exploration");
  Rng pick = Rng::stream(seed, "qlearn-batch");
  const std::size_t N = train.size();

  for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
    const double eps = exploration_rate(cfg, ep);
    std::vector<std::size_t> batch(std::min(cfg.batch, N));
    for (auto& i : batch) i = pick.uniform_int(N);
    double ep_loss = 0.0;
    std::size_t ep_count = 0;
    for (std::size_t m = 0; m < M; ++m) {
      const std::size_t D = towers[m].depth();
      if (D < 2) continue;
      std::vector<Transition> episode;
      for (std::size_t i : batch) {
        for (std::size_t d = 1; d < D; ++d) {
          const auto state = latents[m][d - 1].row(i);
          bool exit;
          if (explore.uniform() < eps)
            exit = explore.uniform() < 0.5;
          else
            exit = policy.prefers_exit(m, d, state);
          episode.push_back({i, d, exit});
          if (exit) break;
        }
      }
      std::vector<std::vector<std::pair<std::size_t, std::pair<std::size_t, double>>>> per_layer(D - 1);
      for (const Transition& t : episode) {
        const std::size_t c = train.labels[t.row];
        double target;
        if (t.exit) {
          target = bellman_target(true, res.rewards[m][t.depth - 1][c], policy.gamma, 0.0);
        } else {
          const double next = t.depth + 1 < D
                                  ? max_q(policy.q_heads[m][t.depth], latents[m][t.depth].row(t.row))
                                  : res.rewards[m][D - 1][c];
          target = bellman_target(false, 0.0, policy.gamma, next);
        }
        per_layer[t.depth - 1].push_back({t.row, {t.exit ? 1 : 0, target}});
      }
      for (std::size_t d = 0; d + 1 < D; ++d) {
        const auto& items = per_layer[d];
        if (items.empty()) continue;
        Linear& head = policy.q_heads[m][d];
        Mat states(items.size(), latents[m][d].cols());
        for (std::size_t k = 0; k < items.size(); ++k) states.set_row(k, latents[m][d].row(items[k].first));
        const Mat q = head.forward(states);
        Mat g(items.size(), 2);
        const double inv = 1.0 / static_cast<double>(items.size());
        for (std::size_t k = 0; k < items.size(); ++k) {
          const std::size_t a = items[k].second.first;
          const double diff = q(k, a) - items[k].second.second;
          g(k, a) = 2.0 * diff * inv;
          ep_loss += diff * diff;
          ++ep_count;
        }
        head.weight().zero_grad();
        head.bias().zero_grad();
        head.accumulate(states, g);
        adam_step(head.weight(), cfg.lr, 0.0);
        adam_step(head.bias(), cfg.lr, 0.0);
      }
    }
    res.episode_loss.push_back(ep_count ? ep_loss / static_cast<double>(ep_count) : 0.0);
  }

  for (std::size_t m = 0; m < M; ++m) {
    const std::size_t D = towers[m].depth();
    for (std::size_t c = 0; c < train.num_classes; ++c) {
      std::size_t chosen = D;
      for (std::size_t d = 1; d < D; ++d)
        if (policy.prefers_exit(m, d, cache[m][d - 1][c].mean)) {
          chosen = d;
          break;
        }
      table.exit_depth[m][c] = chosen;
      table.dist[m][c] = cache[m][chosen - 1][c];
    }
  }
  return res;
}

ExitChoice choose_exit(const ModalityTower& tower, const ExitPolicy& policy, std::size_t m,
                       std::span<const double> x) {
  const Mat row = Mat::row_vector(x);
  auto batch = choose_exit_batch(tower, policy, m, row, true);
  ExitChoice out;
  out.depth = batch.depth[0];
  const auto r = batch.latent.row(0);
  out.latent.assign(r.begin(), r.end());
  return out;
}

BatchExit choose_exit_batch(const ModalityTower& tower, const ExitPolicy& policy, std::size_t m,
                            const Mat& x, bool dynamic) {
  const std::size_t D = tower.depth();
  const auto pass = tower.run(x, D, false);
  BatchExit out;
  out.depth.assign(x.rows(), D);
  out.latent = Mat(x.rows(), tower.sizes().latent_dim);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (dynamic)
      for (std::size_t d = 1; d < D; ++d)
        if (policy.prefers_exit(m, d, pass.latent[d - 1].row(i))) {
          out.depth[i] = d;
          break;
        }
    out.latent.set_row(i, pass.latent[out.depth[i] - 1].row(i));
  }
  return out;
}

}  // namespace mlad
