#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mlad/errors.hpp"
#include "mlad/sad.hpp"
#include "oracles.hpp"

using namespace mlad;
using namespace mlad::testing;

namespace {

ClassLatentTable identical_table(std::size_t classes, std::size_t dim, Vec prior) {
  ClassLatentTable t;
  t.dist.resize(1);
  for (std::size_t c = 0; c < classes; ++c) t.dist[0].push_back({Vec(dim, 0.0), Vec(dim, 1.0)});
  t.exit_depth.assign(1, std::vector<std::size_t>(classes, 1));
  t.class_prior = std::move(prior);
  return t;
}

double normal_pdf(double x, double mu, double sigma) {
  const double u = (x - mu) / sigma;
  return std::exp(-0.5 * u * u) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

}  // namespace

TEST_CASE("posterior_entropy examples") {
  const auto t4 = identical_table(4, 3, {0.25, 0.25, 0.25, 0.25});
  CHECK(posterior_entropy(Vec{0.3, -1.0, 2.0}, t4, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  auto t = identical_table(3, 2, {0.7, 0.2, 0.1});
  CHECK(posterior_entropy(Vec{1.0, 1.0}, t, 0) == doctest::Approx(0.801819).epsilon(1e-6));
  // Common rescaling of every class likelihood leaves the posterior unchanged.
  auto scaled = t;
  for (double& p : scaled.class_prior) p *= 7.0;
  CHECK(posterior_entropy(Vec{1.0, 1.0}, scaled, 0) ==
        doctest::Approx(posterior_entropy(Vec{1.0, 1.0}, t, 0)).epsilon(1e-12));

  auto far = identical_table(2, 2, {0.5, 0.5});
  far.dist[0][1].mean = {100.0, 100.0};
  CHECK(posterior_entropy(Vec{0.0, 0.0}, far, 0) < 1e-8);

  Rng rng(3);
  ClassLatentTable r = identical_table(5, 4, {0.1, 0.2, 0.3, 0.25, 0.15});
  for (int trial = 0; trial < 200; ++trial) {
    for (auto& g : r.dist[0]) {
      g.mean = random_vec(rng, 4, 3.0);
      for (double& v : g.var) v = rng.uniform(0.01, 2.0);
    }
    const double h = posterior_entropy(random_vec(rng, 4, 5.0), r, 0);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(5.0));
  }
}

TEST_CASE("gmm threshold and EM") {
  GmmSplit g;
  g.mean[0] = 0.0;
  g.mean[1] = 2.0;
  g.stddev[0] = g.stddev[1] = 0.5;
  CHECK(gmm_threshold(g) == doctest::Approx(1.0).epsilon(1e-12));

  Rng rng(4);
  Vec h;
  for (int i = 0; i < 500; ++i) h.push_back(0.1 + 0.01 * rng.normal());
  for (int i = 0; i < 500; ++i) h.push_back(1.2 + 0.01 * rng.normal());
  const GmmSplit fit = fit_entropy_gmm(h);
  CHECK(fit.converged);
  CHECK(std::abs(fit.mean[0] - 0.1) < 0.02);
  CHECK(std::abs(fit.mean[1] - 1.2) < 0.02);
  CHECK(fit.threshold > fit.mean[0]);
  CHECK(fit.threshold < fit.mean[1]);
  CHECK(fit.weight[0] + fit.weight[1] == doctest::Approx(1.0));

  const GmmSplit flat = fit_entropy_gmm(Vec(10, 0.42));
  CHECK_FALSE(flat.converged);
  CHECK(flat.threshold == 0.42);

  CHECK_THROWS_AS(fit_entropy_gmm(Vec{1.0, 2.0, 3.0}), ValidationError);
}

TEST_CASE("gmm weighted densities cross at the threshold") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const double m0 = rng.uniform(0.0, 0.5), m1 = rng.uniform(0.8, 1.5);
    const double s0 = rng.uniform(0.03, 0.15), s1 = rng.uniform(0.03, 0.15);
    const std::size_t n0 = 100 + rng.uniform_int(300), n1 = 100 + rng.uniform_int(300);
    Vec h;
    for (std::size_t i = 0; i < n0; ++i) h.push_back(m0 + s0 * rng.normal());
    for (std::size_t i = 0; i < n1; ++i) h.push_back(m1 + s1 * rng.normal());
    const GmmSplit g = fit_entropy_gmm(h);
    REQUIRE(g.converged);
    auto diff = [&](double x) {
      return g.weight[0] * normal_pdf(x, g.mean[0], g.stddev[0]) -
             g.weight[1] * normal_pdf(x, g.mean[1], g.stddev[1]);
    };
    CHECK(std::abs(diff(g.threshold)) < 1e-8);
    CHECK(diff(g.threshold - 0.01) > 0.0);
    CHECK(diff(g.threshold + 0.01) < 0.0);
  }
}

TEST_CASE("select_low_confusion") {
  GmmSplit g;
  g.threshold = 0.5;
  const Vec h{0.1, 0.9};
  const auto s = select_low_confusion(h, g);
  CHECK(s.low == std::vector<std::size_t>{0});
  CHECK(s.high == std::vector<std::size_t>{1});

  const Vec all_low{0.1, 0.2, 0.3};
  const auto s2 = select_low_confusion(all_low, g);
  CHECK(s2.low.size() == 3);
  CHECK(s2.high.empty());

  const Vec all_high{0.6, 0.9, 0.7, 0.8};
  CHECK_THROWS_AS(select_low_confusion(all_high, g), ValidationError);
  CHECK(low_confusion_or_fallback(all_high, g) == std::vector<std::size_t>{0, 2});

  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Vec hr = random_vec(rng, 20);
    g.threshold = rng.uniform(-0.9, 1.0);
    if (std::none_of(hr.begin(), hr.end(), [&](double v) { return v < g.threshold; })) continue;
    const auto part = select_low_confusion(hr, g);
    CHECK(part.low.size() + part.high.size() == hr.size());
  }
}

TEST_CASE("fit_prior examples") {
  const Mat z{{1.0, 2.0}, {3.0, 0.0}, {-1.0, 1.0}};
  const ModalityPrior p = fit_prior(z, Vec{0.3, 0.3, 0.3});
  CHECK(p.mean[0] == doctest::Approx(1.0));
  CHECK(p.mean[1] == doctest::Approx(1.0));
  CHECK(p.support_count == 3);

  const Mat two{{1.0, 0.0}, {0.0, 3.0}};
  const ModalityPrior q = fit_prior(two, Vec{0.0, std::log(2.0)});
  CHECK(q.mean[0] == doctest::Approx(2.0 / 3.0));
  CHECK(q.mean[1] == doctest::Approx(1.0));

  const Vec w = eigen_reweight(Vec{1.0, 1.0, 1.0}, ReweightMode::kNormal);
  for (double v : w) CHECK(v == doctest::Approx(1.0 / 3.0));
  const Vec a = eigen_reweight(Vec{0.5, 2.0, 3.0}, ReweightMode::kNormal);
  const Vec b = eigen_reweight(Vec{10.5, 12.0, 13.0}, ReweightMode::kNormal);
  for (std::size_t k = 0; k < 3; ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-14));
  CHECK(a[0] > a[2]);
  const Vec neg = eigen_reweight(Vec{0.5, 2.0, 3.0}, ReweightMode::kNegative);
  CHECK(neg[2] > neg[0]);

  Rng rng(6);
  const ModalityPrior r = random_prior(rng, 6);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(r.cov(i, j) - r.cov(j, i)) < 1e-10);
  double wsum = 0.0;
  for (std::size_t k = 0; k < 6; ++k) {
    CHECK(r.eig.eigvals[k] >= 1e-3);
    CHECK(r.reweight[k] >= 0.0);
    wsum += r.reweight[k];
  }
  CHECK(wsum == doctest::Approx(1.0));
  const Vec expect = eigen_reweight(r.eig.eigvals, ReweightMode::kNormal);
  CHECK(r.reweight == expect);

  // Density at the mode reduces to the normalizer.
  double logdet = 0.0;
  for (double l : r.eig.eigvals) logdet += std::log(l);
  CHECK(r.log_density(r.mean) ==
        doctest::Approx(-0.5 * (logdet + 6.0 * std::log(2.0 * std::numbers::pi))).epsilon(1e-12));

  CHECK_THROWS_AS(fit_prior(Mat(1, 2), Vec{0.0}), ValidationError);
}

TEST_CASE("entropy_gate") {
  const Vec g = entropy_gate(Vec{0.7, 0.7}, 0, 1e-6);
  CHECK(g[1] == doctest::Approx(0.5).epsilon(1e-12));
  const Vec g2 = entropy_gate(Vec{1.0, 0.5}, 0, 1e-6);
  CHECK(g2[1] == doctest::Approx(std::exp(2.0) / (std::exp(1.0) + std::exp(2.0))).epsilon(1e-5));
  CHECK(g2[0] + g2[1] == doctest::Approx(1.0));
  // A near-zero source entropy saturates instead of overflowing.
  const Vec sat = entropy_gate(Vec{1.0, 0.0}, 0, 1e-6);
  CHECK(sat[1] == doctest::Approx(1.0));

  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const double ha = rng.uniform(0.05, 1.3), hb = rng.uniform(0.05, 1.3);
    const double step = 1e-6;
    const double up = entropy_gate(Vec{ha + step, hb}, 0, 1e-6)[1];
    const double down = entropy_gate(Vec{ha - step, hb}, 0, 1e-6)[1];
    CHECK((up - down) / (2.0 * step) > 0.0);
    const double ba_up = entropy_gate(Vec{ha + step, hb}, 1, 1e-6)[0];
    const double ba_down = entropy_gate(Vec{ha - step, hb}, 1, 1e-6)[0];
    CHECK(ba_up < ba_down);
  }
}

TEST_CASE("rectify matches the step-by-step oracle") {
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(500 + trial);
    const std::size_t M = trial % 3 == 0 ? 3 : 2;
    const std::size_t d = 3;
    Rectifier rect(M, d, rng);
    std::vector<Vec> z;
    std::vector<ModalityPrior> priors;
    Vec h;
    for (std::size_t m = 0; m < M; ++m) {
      z.push_back(random_vec(rng, d, 2.0));
      priors.push_back(random_prior(rng, d));
      h.push_back(rng.uniform(0.05, 1.3));
    }
    const auto got = rectify(z, h, priors, rect, SadOptions{});
    const auto want = oracle_rectify(z, h, priors, rect, 1e-6);
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(got.z_hat[m][i] - want[m][i]) < 1e-10);
    for (std::size_t m = 0; m < M; ++m) {
      double s = 0.0;
      for (std::size_t n = 0; n < M; ++n) s += got.gates(m, n);
      CHECK(s == doctest::Approx(1.0));
    }
  }
}

TEST_CASE("rectify special cases") {
  Rng rng(12);
  // Compensation equal to the feature leaves it unchanged (d = 1 makes the
  // attention map trivially [1]).
  Rectifier one(2, 1, rng);
  std::vector<Vec> z{{0.8}, {-1.3}};
  const Vec h{0.4, 0.9};
  std::vector<ModalityPrior> p1{fit_prior(Mat{{0.0}, {1.0}, {2.0}}, Vec{0.1, 0.1, 0.1}),
                                fit_prior(Mat{{0.0}, {1.0}, {2.0}}, Vec{0.1, 0.1, 0.1})};
  const double gate = entropy_gate(h, 0, 1e-6)[1];
  one.target(0).wv.value(0, 0) = z[0][0] / (gate * z[1][0]);
  const auto fixed = rectify(z, h, p1, one, SadOptions{});
  CHECK(fixed.compensation[0][0] == doctest::Approx(z[0][0]).epsilon(1e-14));
  CHECK(fixed.z_hat[0][0] == doctest::Approx(z[0][0]).epsilon(1e-14));

  // All reweighting mass on u_1: the update is parallel to u_1.
  const std::size_t d = 4;
  Rectifier rect(2, d, rng);
  std::vector<ModalityPrior> priors{random_prior(rng, d), random_prior(rng, d)};
  for (auto& p : priors) p.reweight = {1.0, 0.0, 0.0, 0.0};
  std::vector<Vec> zz{random_vec(rng, d), random_vec(rng, d)};
  const auto r = rectify(zz, Vec{0.5, 0.2}, priors, rect, SadOptions{});
  for (std::size_t m = 0; m < 2; ++m) {
    Vec diff(d);
    for (std::size_t i = 0; i < d; ++i) diff[i] = r.z_hat[m][i] - zz[m][i];
    const Vec u1 = priors[m].eig.eigvecs.column(0);
    const double along = dot(diff, u1);
    for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(diff[i] - along * u1[i]) < 1e-12);
  }

  // CFMP off adds the compensation directly.
  SadOptions off;
  off.cfmp = false;
  const auto r2 = rectify(zz, Vec{0.5, 0.2}, priors, rect, off);
  for (std::size_t i = 0; i < d; ++i)
    CHECK(r2.z_hat[0][i] == doctest::Approx(zz[0][i] + r2.compensation[0][i]));

  // The additive gate shifts every score equally, so the gate drops out.
  SadOptions add;
  add.additive_gate = true;
  const auto r3 = rectify(zz, Vec{0.5, 0.2}, priors, rect, add);
  const auto r4 = rectify(zz, Vec{0.9, 0.1}, priors, rect, add);
  for (std::size_t i = 0; i < d; ++i)
    CHECK(r3.compensation[0][i] == doctest::Approx(r4.compensation[0][i]).epsilon(1e-12));
}

namespace {

struct Toy {
  SadInputs in;
  std::vector<ModalityPrior> priors;
  Rectifier rect;
  ClassifierHead head;
};

Toy toy(std::uint64_t seed, ReweightMode mode) {
  Toy t;
  Rng rng(seed);
  const std::size_t d = 3, M = 2, N = 6;
  for (std::size_t i = 0; i < N; ++i) {
    t.in.z.push_back({random_vec(rng, d, 1.5), random_vec(rng, d, 1.5)});
    t.in.labels.push_back(i % 3);
  }
  t.in.entropies = random_mat(rng, N, M);
  for (double& v : t.in.entropies.flat()) v = std::abs(v);
  for (std::size_t m = 0; m < M; ++m) t.priors.push_back(random_prior(rng, d, mode));
  t.rect = Rectifier(M, d, rng);
  t.head = ClassifierHead(M * d, 3, rng);
  return t;
}

}  // namespace

TEST_CASE("total loss gradients match finite differences") {
  struct Variant {
    SadOptions opt;
    ReweightMode mode;
  };
  std::vector<Variant> variants(6);
  variants[1].opt.literal_frame = true;
  variants[2].opt.cfmp = false;
  variants[3].opt.additive_gate = true;
  variants[4].mode = ReweightMode::kNegative;
  variants[5].opt.cmr = false;
  std::uint64_t seed = 40;
  for (auto& v : variants) {
    Toy t = toy(seed++, v.mode);
    std::vector<Param*> params = t.rect.params();
    t.head.map.collect(params);
    const std::vector<std::size_t> rows{0, 1, 2, 3, 4, 5};
    zero_grads(params);
    total_loss(t.in, rows, t.priors, t.rect, t.head, v.opt, 0.7, true);
    auto loss = [&] {
      return total_loss(t.in, rows, t.priors, t.rect, t.head, v.opt, 0.7, false).loss;
    };
    if (!v.opt.cmr) params.erase(params.begin(), params.begin() + 6);
    CHECK(finite_diff_check(loss, params, 1e-6, 9) < 1e-4);
  }
}

TEST_CASE("phase2 training decreases the loss and is deterministic") {
  Rng rng(3);
  const std::size_t d = 4, N = 60;
  SadInputs in;
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t c = i % 3;
    Vec a = random_vec(rng, d, 0.5), b = random_vec(rng, d, 0.5);
    a[c] += 1.5;
    b[c] += 1.0;
    in.z.push_back({a, b});
    in.labels.push_back(c);
  }
  in.entropies = random_mat(rng, N, 2, 1.0);
  for (double& v : in.entropies.flat()) v = std::abs(v);
  std::vector<ModalityPrior> priors;
  for (std::size_t m = 0; m < 2; ++m) {
    Mat lat(N, d);
    for (std::size_t i = 0; i < N; ++i) lat.set_row(i, in.z[i][m]);
    priors.push_back(fit_prior(lat, in.entropies.column(m)));
  }
  Phase2Config cfg;
  cfg.epochs = 40;
  cfg.batch_size = 16;
  cfg.lr = 1e-2;
  auto run = [&](Rectifier& rect, ClassifierHead& head) {
    return phase2_train(in, priors, rect, head, SadOptions{}, cfg, 5);
  };
  Rng init(1);
  Rectifier rect(2, d, init);
  ClassifierHead head(2 * d, 3, init);
  const auto res = run(rect, head);
  for (std::size_t w = 5; w + 5 <= res.epoch_loss.size(); w += 5) {
    double prev = 0.0, cur = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
      prev += res.epoch_loss[w - 5 + k];
      cur += res.epoch_loss[w + k];
    }
    CHECK(cur <= prev);
  }
  Rng init2(1);
  Rectifier rect2(2, d, init2);
  ClassifierHead head2(2 * d, 3, init2);
  run(rect2, head2);
  CHECK(head2.map.weight().value == head.map.weight().value);
  CHECK(rect2.target(1).wq.value == rect.target(1).wq.value);
}

namespace {

MladModel trained_model(const MultimodalDataset& train, std::uint64_t seed) {
  MladModel model;
  TowerSizes sizes;
  sizes.depth = 3;
  sizes.width = 24;
  sizes.latent_dim = 8;
  sizes.decoder_hidden = 24;
  sizes.transform_hidden = 24;
  model.towers = init_towers(train, sizes, seed);
  Phase1Config p1;
  p1.epochs = 25;
  p1.batch_size = 32;
  p1.lr = 2e-3;
  auto r1 = phase1_train(model.towers, train, p1, seed);
  QLearnConfig q;
  q.episodes = 300;
  q.lr = 1e-2;
  q.reward_draws = 4;
  model.policy = ExitPolicy::init(model.towers, seed, q.gamma);
  model.table = r1.table;
  qlearn_train(model.towers, model.policy, model.table, r1.cache, train, q, p1.cad, seed);
  const SadInputs in = sad_inputs(model, train);
  model.priors = fit_priors(in, 2, model.sad, nullptr);
  Rng init = Rng::stream(seed, "init-sad");
  model.rectifier = Rectifier(2, sizes.latent_dim, init);
  model.head = ClassifierHead(2 * sizes.latent_dim, train.num_classes, init);
  Phase2Config p2;
  p2.epochs = 20;
  p2.batch_size = 32;
  p2.lr = 5e-3;
  phase2_train(in, model.priors, model.rectifier, model.head, model.sad, p2, seed);
  return model;
}

}  // namespace

TEST_CASE("predict on separable data") {
  SynthSpec spec;
  spec.dims = {12, 12};
  spec.samples_per_class = 60;
  spec.class_separation = 8.0;
  spec.seed = 7;
  const MultimodalDataset raw = synth_generate(spec);
  const Split split = stratified_split(raw, 0.6, 0.1, 7);
  const MultimodalDataset ds = FeatureStats::fit(raw.subset(split.train)).normalize(raw);
  const MultimodalDataset train = ds.subset(split.train), test = ds.subset(split.test);
  const MladModel model = trained_model(train, 7);

  const auto preds = predict_batch(model, test, true);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    const auto best = std::max_element(p.logits.begin(), p.logits.end()) - p.logits.begin();
    CHECK(static_cast<std::size_t>(best) == p.label);
    correct += p.label == test.labels[i];
    for (std::size_t d : p.exit_depth) {
      CHECK(d >= 1);
      CHECK(d <= 3);
    }
    CHECK(p.attention.size() == 2);
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(preds.size()) >= 0.99);

  // The single-sample path agrees with the batch path.
  std::vector<Vec> x{Vec(test.features[0].row(0).begin(), test.features[0].row(0).end()),
                     Vec(test.features[1].row(0).begin(), test.features[1].row(0).end())};
  const auto single = predict(model, x);
  CHECK(single.logits == preds[0].logits);
}
