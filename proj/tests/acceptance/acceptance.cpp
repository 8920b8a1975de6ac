// Acceptance suite. Runs the requested criteria (all when no arguments are
// given) and prints one PASS/FAIL line per criterion. Exit status is 0 only
// if every requested criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "mlad/commands.hpp"
#include "mlad/linalg.hpp"
#include "oracles.hpp"

using namespace mlad;
using namespace mlad::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ExperimentConfig fixture(const std::string& name) {
  return load_config(std::filesystem::path(MLAD_CONFIG_DIR) / (name + ".json"));
}

// ---- 1: analytic gradients against central differences ----

double cad_gradient_error() {
  double worst = 0.0;
  for (auto reduction : {CadReduction::kMean, CadReduction::kSum}) {
    for (bool decode : {true, false}) {
      Rng init(21);
      std::vector<ModalityTower> towers;
      towers.emplace_back(tiny_sizes(3, 3, 1), init);
      towers.emplace_back(tiny_sizes(4, 3, 1), init);
      Rng rng(6);
      std::vector<std::vector<Mat>> xs(2);
      std::vector<std::vector<Param>> zp(2);
      const std::size_t rows[] = {3, 4, 2};
      for (std::size_t m = 0; m < 2; ++m)
        for (std::size_t c = 0; c < 3; ++c) {
          xs[m].push_back(random_mat(rng, rows[c], m == 0 ? 3 : 4));
          zp[m].emplace_back(random_mat(rng, rows[c], 5));
        }
      CadOptions opt;
      opt.alpha = 0.3;
      opt.reduction = reduction;
      opt.decode_residual = decode;
      auto zs = [&] {
        std::vector<std::vector<Mat>> out(2);
        for (std::size_t m = 0; m < 2; ++m)
          for (auto& p : zp[m]) out[m].push_back(p.value);
        return out;
      };
      std::vector<Param*> params;
      for (auto& t : towers) {
        t.decoder().collect(params);
        t.transform().collect(params);
      }
      for (auto& pm : zp)
        for (auto& p : pm) params.push_back(&p);
      zero_grads(params);
      Rng s(3), r(4);
      auto res = loss_cad(towers, xs, zs(), opt, s, r, true);
      for (std::size_t m = 0; m < 2; ++m)
        for (std::size_t c = 0; c < 3; ++c) zp[m][c].grad = res.grad_z[m][c];
      auto loss = [&] {
        Rng s2(3), r2(4);
        return loss_cad(towers, xs, zs(), opt, s2, r2, false).parts.total;
      };
      worst = std::max(worst, finite_diff_check(loss, params, 1e-6, 48));
    }
  }
  return worst;
}

double phase1_gradient_error() {
  double worst = 0.0;
  for (auto mode : {CadDepthMode::kAll, CadDepthMode::kFinal}) {
    for (bool cross : {true, false}) {
      Rng init = Rng::stream(11, "init");
      std::vector<ModalityTower> towers;
      towers.emplace_back(tiny_sizes(3, 3, 2), init);
      towers.emplace_back(tiny_sizes(4, 3, 2), init);
      Rng rng = Rng::stream(11, "data");
      Phase1Batch batch;
      batch.labels = {0, 1, 2, 0, 1, 2, 0, 1, 0};
      batch.x.push_back(random_mat(rng, 9, 3, 2.0));
      batch.x.push_back(random_mat(rng, 9, 4, 2.0));
      Phase1Config cfg;
      cfg.depth_mode = mode;
      cfg.cad.alpha = 0.2;
      cfg.cad.cross_term = cross;
      std::vector<Param*> params;
      for (auto& t : towers)
        for (Param* p : t.params()) params.push_back(p);
      zero_grads(params);
      phase1_step(towers, batch, cfg, 77, true);
      auto loss = [&] { return phase1_step(towers, batch, cfg, 77, false).loss; };
      worst = std::max(worst, finite_diff_check(loss, params, 1e-6, 48));
    }
  }
  return worst;
}

double total_loss_gradient_error() {
  struct Case {
    SadOptions opt;
    ReweightMode mode = ReweightMode::kNormal;
  };
  std::vector<Case> cases(6);
  cases[1].opt.literal_frame = true;
  cases[2].opt.cfmp = false;
  cases[3].opt.additive_gate = true;
  cases[4].mode = ReweightMode::kNegative;
  cases[5].mode = ReweightMode::kUniform;
  double worst = 0.0;
  std::uint64_t seed = 90;
  for (const auto& k : cases) {
    Rng rng(seed++);
    const std::size_t d = 3, M = 2, N = 6;
    SadInputs in;
    for (std::size_t i = 0; i < N; ++i) {
      in.z.push_back({random_vec(rng, d, 1.5), random_vec(rng, d, 1.5)});
      in.labels.push_back(i % 3);
    }
    in.entropies = random_mat(rng, N, M);
    for (double& v : in.entropies.flat()) v = std::abs(v);
    std::vector<ModalityPrior> priors;
    for (std::size_t m = 0; m < M; ++m) priors.push_back(random_prior(rng, d, k.mode));
    Rectifier rect(M, d, rng);
    ClassifierHead head(M * d, 3, rng);
    std::vector<Param*> params = rect.params();
    head.map.collect(params);
    const std::vector<std::size_t> rows{0, 1, 2, 3, 4, 5};
    zero_grads(params);
    total_loss(in, rows, priors, rect, head, k.opt, 0.7, true);
    auto loss = [&] { return total_loss(in, rows, priors, rect, head, k.opt, 0.7, false).loss; };
    worst = std::max(worst, finite_diff_check(loss, params, 1e-6, 48));
  }
  return worst;
}

Outcome gradient_oracle() {
  const double cad = cad_gradient_error();
  const double p1 = phase1_gradient_error();
  const double tot = total_loss_gradient_error();
  const double worst = std::max({cad, p1, tot});
  return {worst < 1e-4,
          fmt("max relative error %.2e (L_CAD %.2e, phase-1 %.2e, L_tot %.2e; need < 1e-4)", worst,
              cad, p1, tot)};
}

// ---- 2: equation oracles ----

Outcome equation_oracles() {
  double cad_err = 0.0;
  CadOptions opt;
  opt.reduction = CadReduction::kSum;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(2000 + trial);
    Rng init = Rng::stream(trial, "init");
    const std::size_t M = 1 + trial % 2, C = 2 + trial % 3;
    std::vector<ModalityTower> towers;
    for (std::size_t m = 0; m < M; ++m) towers.emplace_back(tiny_sizes(3 + m, C, 1), init);
    std::vector<std::vector<Mat>> xs(M), zs(M);
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t c = 0; c < C; ++c) {
        xs[m].push_back(random_mat(rng, 2, 3 + m));
        zs[m].push_back(random_mat(rng, 2, 5));
      }
    opt.alpha = trial % 2 == 0 ? 0.1 : 0.0;
    Rng sampling(7), residual(8);
    const auto got = loss_cad(towers, xs, zs, opt, sampling, residual, false).parts;
    const auto want = oracle_cad(towers, xs, zs, opt.alpha, Rng(8));
    for (auto [g, w] : {std::pair{got.intra, want.intra}, std::pair{got.cross, want.cross},
                        std::pair{got.total, want.total}})
      cad_err = std::max(cad_err, std::abs(g - w) / std::max(1.0, std::abs(w)));
  }

  double rect_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(3000 + trial);
    const std::size_t M = 2 + trial % 2, d = 2 + trial % 3;
    Rectifier rect(M, d, rng);
    std::vector<Vec> z;
    std::vector<ModalityPrior> priors;
    Vec h;
    for (std::size_t m = 0; m < M; ++m) {
      z.push_back(random_vec(rng, d, 2.0));
      priors.push_back(random_prior(rng, d));
      h.push_back(rng.uniform(0.05, 1.3));
    }
    const SadOptions sad;
    const auto got = rectify(z, h, priors, rect, sad);
    const auto want = oracle_rectify(z, h, priors, rect, sad.gate_eps);
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t i = 0; i < d; ++i)
        rect_err = std::max(rect_err, std::abs(got.z_hat[m][i] - want[m][i]));
  }
  return {cad_err < 1e-10 && rect_err < 1e-10,
          fmt("loss_cad max error %.2e, rectify max error %.2e over 100 instances each (need < 1e-10)",
              cad_err, rect_err)};
}

// ---- 3: symmetric eigendecomposition ----

Outcome sym_eig_accuracy() {
  Rng rng(33);
  double ortho = 0.0, recon = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = trial < 4 ? 32 : 1 + rng.uniform_int(32);
    const Mat a = random_symmetric(rng, n);
    const SymEig e = sym_eig(a);
    ortho = std::max(ortho, max_abs_diff(matmul_tn(e.eigvecs, e.eigvecs), Mat::identity(n)));
    recon = std::max(recon, max_abs_diff(reconstruct(e), a));
  }
  return {ortho < 1e-8 && recon < 1e-8,
          fmt("orthonormality error %.2e, reconstruction error %.2e (need < 1e-8)", ortho, recon)};
}

// ---- 4: entropy GMM threshold ----

double normal_pdf(double x, double mu, double sigma) {
  const double u = (x - mu) / sigma;
  return std::exp(-0.5 * u * u) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

Outcome gmm_threshold_recovery() {
  Rng rng(44);
  Vec h;
  std::vector<int> comp;
  for (int i = 0; i < 1000; ++i) {
    const int k = rng.uniform() < 0.5 ? 0 : 1;
    h.push_back((k == 0 ? 0.2 : 1.1) + 0.05 * rng.normal());
    comp.push_back(k);
  }
  const GmmSplit g = fit_entropy_gmm(h);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < h.size(); ++i) agree += (h[i] > g.threshold) == (comp[i] == 1);
  const double purity = static_cast<double>(agree) / static_cast<double>(h.size());
  const double d0 = g.weight[0] * normal_pdf(g.threshold, g.mean[0], g.stddev[0]);
  const double d1 = g.weight[1] * normal_pdf(g.threshold, g.mean[1], g.stddev[1]);
  const double gap = std::abs(d0 - d1);
  const double rel_gap = gap / std::max(d0, d1);
  const double e0 = std::abs(g.mean[0] - 0.2), e1 = std::abs(g.mean[1] - 1.1);
  return {e0 < 0.03 && e1 < 0.03 && purity >= 0.95 && gap < 1e-8 && rel_gap < 1e-8,
          fmt("means %.4f/%.4f (errors %.4f/%.4f, need < 0.03), purity %.3f (need >= 0.95), "
              "density gap %.2e, relative %.2e (need < 1e-8)",
              g.mean[0], g.mean[1], e0, e1, purity, gap, rel_gap)};
}

// ---- 5: exit depth follows the depth profile ----

Outcome exit_depth_direction() {
  const ExperimentConfig cfg = fixture("depth_profile");
  const MultimodalDataset ds = experiment_dataset(cfg);
  const auto& profile = cfg.synth.depth_profile;
  const std::size_t deepest = *std::max_element(profile.begin(), profile.end());
  std::size_t ok = 0;
  std::string depths;
  for (std::uint64_t seed : cfg.seeds) {
    const Split sp = stratified_split(ds, cfg.train_frac, cfg.val_frac, seed);
    const MultimodalDataset train = ds.subset(sp.train);
    PipelineState st;
    const Variant full;
    run_phase1(st, train, cfg.pipeline, full, seed);
    run_qlearn(st, train, cfg.pipeline, full, seed);
    bool seed_ok = true;
    for (const auto& row : st.model.table.exit_depth) {
      std::size_t shallow_max = 0, deep_min = SIZE_MAX;
      for (std::size_t c = 0; c < row.size(); ++c) {
        if (profile[c] == 1) shallow_max = std::max(shallow_max, row[c]);
        if (profile[c] == deepest) deep_min = std::min(deep_min, row[c]);
      }
      seed_ok = seed_ok && shallow_max <= deep_min;
      depths += " [";
      for (std::size_t d : row) depths += std::to_string(d);
      depths += "]";
    }
    ok += seed_ok;
  }
  return {ok >= 4, fmt("shallow <= deep on %zu of %zu seeds (need >= 4); exit depths per "
                       "seed and modality:%s",
                       ok, cfg.seeds.size(), depths.c_str())};
}

// ---- 6: cross term improves latent separability ----

double latent_silhouette(const PipelineState& st, const MultimodalDataset& test) {
  const MultimodalDataset x = st.stats.normalize(test);
  double total = 0.0;
  for (std::size_t m = 0; m < x.num_modalities(); ++m) {
    const auto& tower = st.model.towers[m];
    const auto pass = tower.run(x.features[m], tower.depth(), false);
    total += silhouette_score(pass.latent.back(), x.labels);
  }
  return total / static_cast<double>(x.num_modalities());
}

Outcome rccr_separability() {
  const ExperimentConfig cfg = fixture("confusable");
  const MultimodalDataset ds = experiment_dataset(cfg);
  std::size_t ok = 0;
  std::string detail;
  for (std::uint64_t seed : cfg.seeds) {
    const Split sp = stratified_split(ds, cfg.train_frac, cfg.val_frac, seed);
    const MultimodalDataset train = ds.subset(sp.train), test = ds.subset(sp.test);
    double s[2];
    for (int with_cross = 1; with_cross >= 0; --with_cross) {
      Variant v;
      v.toggles.rccr = with_cross == 1;
      PipelineState st;
      run_phase1(st, train, cfg.pipeline, v, seed);
      s[with_cross] = latent_silhouette(st, test);
    }
    ok += s[1] > s[0];
    detail += fmt(" %.3f/%.3f", s[1], s[0]);
  }
  return {ok >= 4, fmt("with > without on %zu of %zu seeds (need >= 4); silhouette with/without:%s",
                       ok, cfg.seeds.size(), detail.c_str())};
}

// ---- 7, 8, 10: sweeps on confusable data ----

std::map<std::string, double> sweep_means(const ExperimentConfig& cfg,
                                          const std::vector<Variant>& variants,
                                          const std::vector<double>& sigmas) {
  const MultimodalDataset ds = experiment_dataset(cfg);
  const NoiseKind kinds[] = {NoiseKind::kGaussian};
  const auto cells =
      noise_sweep(ds, cfg.pipeline, variants, sigmas, kinds, cfg.seeds, sweep_options(cfg));
  std::map<std::string, double> out;
  for (const auto& v : variants)
    for (double s : sigmas) out[v.name + "@" + fmt("%g", s)] = mean_accuracy(cells, v.name, s);
  return out;
}

Outcome ablation_direction() {
  const ExperimentConfig cfg = fixture("confusable");
  const auto variants = single_toggle_ablations();
  const auto acc = sweep_means(cfg, variants, {5.0});
  const double full = acc.at("full@5");
  bool below = true;
  std::string largest;
  double largest_drop = -1.0;
  std::string detail = fmt("full %.4f", full);
  for (const auto& v : variants) {
    if (v.name == "full") continue;
    const double a = acc.at(v.name + "@5");
    below = below && a < full;
    if (full - a > largest_drop) {
      largest_drop = full - a;
      largest = v.name;
    }
    detail += fmt(", %s %.4f", v.name.c_str(), a);
  }
  return {below && largest == "no-rccr",
          fmt("mean accuracy at sigma 5: %s; every ablation below full: %s; largest drop: %s "
              "(need no-rccr)",
              detail.c_str(), below ? "yes" : "no", largest.c_str())};
}

Outcome robustness_direction() {
  const ExperimentConfig cfg = fixture("confusable");
  std::vector<Variant> variants{Variant{}, parse_variant("no-cmr")};
  const auto acc = sweep_means(cfg, variants, {0.0, 10.0});
  const double full_drop = acc.at("full@0") - acc.at("full@10");
  const double cmr_drop = acc.at("no-cmr@0") - acc.at("no-cmr@10");
  return {full_drop < cmr_drop,
          fmt("accuracy drop sigma 0 -> 10: full %.4f (%.4f -> %.4f), no-cmr %.4f (%.4f -> %.4f)",
              full_drop, acc.at("full@0"), acc.at("full@10"), cmr_drop, acc.at("no-cmr@0"),
              acc.at("no-cmr@10"))};
}

Outcome reweighting_order() {
  const ExperimentConfig cfg = fixture("confusable");
  std::vector<Variant> variants;
  for (auto mode : {ReweightMode::kNormal, ReweightMode::kUniform, ReweightMode::kNegative}) {
    Variant v;
    v.reweight = mode;
    v.name = to_string(mode);
    variants.push_back(v);
  }
  const auto acc = sweep_means(cfg, variants, {0.0});
  const double n = acc.at("normal@0"), u = acc.at("none@0"), g = acc.at("negative@0");
  return {n >= u && u >= g,
          fmt("mean accuracy normal %.4f, no-reweight %.4f, negative %.4f", n, u, g)};
}

// ---- 9: gate direction under corruption ----

Outcome gate_direction() {
  const ExperimentConfig cfg = fixture("separable");
  const MultimodalDataset ds = experiment_dataset(cfg);
  std::size_t affected = 0, both = 0;
  bool means_ok = true;
  std::string detail;
  for (std::uint64_t seed : cfg.seeds) {
    const Split sp = stratified_split(ds, cfg.train_frac, cfg.val_frac, seed);
    const MultimodalDataset train = ds.subset(sp.train), test = ds.subset(sp.test);
    const PipelineState st = train_pipeline(train, cfg.pipeline, cfg.variant(), seed);
    const FeatureStats bounds = FeatureStats::fit(train);
    const MultimodalDataset noisy = inject_noise(test, cfg.noise, seed, &bounds);
    const auto clean = evaluate(st, test), corrupt = evaluate(st, noisy);
    double ab0 = 0.0, ab1 = 0.0, ba0 = 0.0, ba1 = 0.0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const Mat& p = clean.predictions[i].gates;
      const Mat& q = corrupt.predictions[i].gates;
      ab0 += p(0, 1);
      ab1 += q(0, 1);
      ba0 += p(1, 0);
      ba1 += q(1, 0);
      if (std::abs(q(0, 1) - p(0, 1)) > 1e-12 || std::abs(q(1, 0) - p(1, 0)) > 1e-12) {
        ++affected;
        both += q(0, 1) > p(0, 1) && q(1, 0) < p(1, 0);
      }
    }
    const double n = static_cast<double>(test.size());
    means_ok = means_ok && ab1 > ab0 && ba1 < ba0;
    detail += fmt(" [A<-B %.3f->%.3f, B<-A %.3f->%.3f]", ab0 / n, ab1 / n, ba0 / n, ba1 / n);
  }
  const double frac = affected ? static_cast<double>(both) / static_cast<double>(affected) : 0.0;
  return {means_ok && frac >= 0.9,
          fmt("both gates move as expected on %zu of %zu affected samples (%.3f, need >= 0.9); "
              "mean gates clean->corrupt per seed:%s",
              both, affected, frac, detail.c_str())};
}

// ---- 11: end-to-end sanity ----

Outcome end_to_end() {
  const ExperimentConfig cfg = fixture("separable");
  const MultimodalDataset ds = experiment_dataset(cfg);
  const std::uint64_t seed = cfg.seeds.front();
  const Split sp = stratified_split(ds, cfg.train_frac, cfg.val_frac, seed);
  const MultimodalDataset train = ds.subset(sp.train), test = ds.subset(sp.test);
  Evaluation runs[2];
  for (auto& r : runs) r = evaluate(train_pipeline(train, cfg.pipeline, cfg.variant(), seed), test);
  const auto& a = runs[0].report;
  const auto& b = runs[1].report;
  bool same = a.accuracy == b.accuracy && a.weighted_f1 == b.weighted_f1 &&
              a.macro_f1 == b.macro_f1 && a.confusion == b.confusion;
  for (std::size_t i = 0; i < test.size(); ++i)
    same = same && runs[0].predictions[i].logits == runs[1].predictions[i].logits;
  return {a.accuracy >= 0.99 && same,
          fmt("test accuracy %.4f (need >= 0.99), second run bit-identical: %s", a.accuracy,
              same ? "yes" : "no")};
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {1, "gradient oracle", gradient_oracle},
    {2, "equation oracles", equation_oracles},
    {3, "sym_eig", sym_eig_accuracy},
    {4, "GMM threshold", gmm_threshold_recovery},
    {5, "exit-depth direction", exit_depth_direction},
    {6, "RCCR separability", rccr_separability},
    {7, "ablation direction", ablation_direction},
    {8, "robustness direction", robustness_direction},
    {9, "gate direction", gate_direction},
    {10, "reweighting order", reweighting_order},
    {11, "end-to-end sanity", end_to_end},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) {
    try {
      wanted.push_back(std::stoi(argv[i]));
    } catch (const std::exception&) {
      std::fprintf(stderr, "usage: %s [criterion number...]\n", argv[0]);
      return 2;
    }
  }
  if (wanted.empty())
    for (const auto& c : kCriteria) wanted.push_back(c.id);

  int failures = 0;
  for (int id : wanted) {
    const auto it = std::find_if(std::begin(kCriteria), std::end(kCriteria),
                                 [&](const Criterion& c) { return c.id == id; });
    if (it == std::end(kCriteria)) {
      std::fprintf(stderr, "unknown criterion %d\n", id);
      return 2;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = it->run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d: %s %s: %s [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", it->name,
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
