#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "mlad/errors.hpp"
#include "mlad/eval.hpp"

using namespace mlad;

namespace {

// Pairwise-comparison AUC: P(s_pos > s_neg) + 0.5 P(tie).
double pairwise_auc(const Vec& s, const std::vector<std::size_t>& y) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        den += 1.0;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / den;
}

double naive_silhouette(const Mat& x, const std::vector<std::size_t>& y) {
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < x.cols(); ++k) s += (x(i, k) - x(j, k)) * (x(i, k) - x(j, k));
    return std::sqrt(s);
  };
  double total = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double a = 0.0, na = 0.0;
    double b = 1e300;
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0, n = 0.0;
      for (std::size_t j = 0; j < x.rows(); ++j)
        if (y[j] == c && j != i) {
          s += dist(i, j);
          n += 1.0;
        }
      if (c == y[i]) {
        a = s;
        na = n;
      } else if (n > 0) {
        b = std::min(b, s / n);
      }
    }
    if (na == 0) continue;
    a /= na;
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(x.rows());
}

PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.tower.depth = 2;
  cfg.tower.width = 12;
  cfg.tower.latent_dim = 6;
  cfg.tower.decoder_hidden = 12;
  cfg.tower.transform_hidden = 12;
  cfg.phase1.epochs = 4;
  cfg.phase1.batch_size = 32;
  cfg.phase1.lr = 2e-3;
  cfg.qlearn.episodes = 20;
  cfg.phase2.epochs = 4;
  cfg.phase2.batch_size = 32;
  cfg.phase2.lr = 5e-3;
  return cfg;
}

MultimodalDataset small_data(std::uint64_t seed = 3) {
  SynthSpec spec;
  spec.num_classes = 3;
  spec.dims = {6, 5};
  spec.samples_per_class = 30;
  spec.seed = seed;
  return synth_generate(spec);
}

}  // namespace

TEST_CASE("accuracy and F1 on a small example") {
  const std::vector<std::size_t> y{0, 1, 1}, p{0, 1, 0};
  const auto r = compute_metrics(p, Mat(), y, 2);
  CHECK(r.accuracy == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  // class 0: tp 1, fp 1, fn 0 -> 2/3; class 1: tp 1, fn 1 -> 2/3
  CHECK(r.per_class_f1[0] == doctest::Approx(2.0 / 3.0));
  CHECK(r.per_class_f1[1] == doctest::Approx(2.0 / 3.0));
  CHECK(r.weighted_f1 == doctest::Approx(2.0 / 3.0));
  CHECK(r.macro_f1 == doctest::Approx(2.0 / 3.0));
  CHECK(r.confusion[1][0] == 1);
  CHECK_FALSE(r.auc.has_value());
}

TEST_CASE("zero-support classes are excluded from macro F1") {
  const std::vector<std::size_t> y{0, 0, 1}, p{0, 0, 1};
  const auto r = compute_metrics(p, Mat(), y, 3);
  CHECK(r.zero_support_classes == 1);
  CHECK(r.macro_f1 == doctest::Approx(1.0));
  CHECK(r.weighted_f1 == doctest::Approx(1.0));
}

TEST_CASE("metric input checks") {
  const std::vector<std::size_t> y{0, 1}, p{0};
  CHECK_THROWS_AS(compute_metrics(p, Mat(), y, 2), DimensionError);
  const std::vector<std::size_t> bad{0, 5};
  CHECK_THROWS_AS(compute_metrics(bad, Mat(), y, 2), IndexError);
  const Vec s{0.1, 0.2};
  const std::vector<std::size_t> one{1, 1};
  CHECK_THROWS_AS(binary_auc(s, one), ValidationError);
}

TEST_CASE("perfectly separating scores give AUC 1") {
  const Vec s{0.1, 0.2, 0.8, 0.9};
  const std::vector<std::size_t> y{0, 0, 1, 1};
  CHECK(binary_auc(s, y) == 1.0);
  Mat probs(4, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    probs(i, 1) = s[i];
    probs(i, 0) = 1.0 - s[i];
  }
  const std::vector<std::size_t> p{0, 0, 1, 1};
  const auto r = compute_metrics(p, probs, y, 2);
  REQUIRE(r.auc.has_value());
  CHECK(*r.auc == 1.0);
}

TEST_CASE("AUC matches pairwise counting, with ties") {
  for (std::size_t n : {50u, 1000u}) {
    Rng rng(n);
    Vec s(n);
    std::vector<std::size_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.uniform() < 0.4 ? 1 : 0;
      // coarse rounding forces ties
      s[i] = std::round((rng.normal() + (y[i] ? 0.7 : 0.0)) * 4.0) / 4.0;
    }
    y[0] = 0;
    y[1] = 1;
    CHECK(binary_auc(s, y) == doctest::Approx(pairwise_auc(s, y)).epsilon(1e-12));
  }
}

TEST_CASE("AUC is invariant under strictly increasing transforms") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Vec s(60), t(60);
    std::vector<std::size_t> y(60);
    for (std::size_t i = 0; i < 60; ++i) {
      y[i] = i % 3 == 0;
      s[i] = rng.normal() + 0.5 * static_cast<double>(y[i]);
      t[i] = std::exp(3.0 * s[i]) + 7.0;
    }
    CHECK(binary_auc(s, y) == doctest::Approx(binary_auc(t, y)).epsilon(1e-14));
  }
}

TEST_CASE("silhouette against a direct computation") {
  Rng rng(5);
  Mat x(30, 3);
  std::vector<std::size_t> y(30);
  for (std::size_t i = 0; i < 30; ++i) {
    y[i] = i % 3;
    for (std::size_t k = 0; k < 3; ++k) x(i, k) = rng.normal() + 2.0 * static_cast<double>(y[i] == k);
  }
  CHECK(silhouette_score(x, y) == doctest::Approx(naive_silhouette(x, y)).epsilon(1e-12));
  // well separated clusters score close to 1
  for (std::size_t i = 0; i < 30; ++i) x(i, 0) = 100.0 * static_cast<double>(y[i]);
  CHECK(silhouette_score(x, y) > 0.9);
  const std::vector<std::size_t> one(30, 0);
  CHECK_THROWS_AS(silhouette_score(x, one), ValidationError);
}

TEST_CASE("ablation variants and reweight names") {
  const auto v = single_toggle_ablations();
  REQUIRE(v.size() == 5);
  CHECK(v[0].name == "full");
  CHECK(v[1].name == "no-de");
  CHECK(v[2].name == "no-rccr");
  CHECK(v[3].name == "no-cfmp");
  CHECK(v[4].name == "no-cmr");
  for (auto m : {ReweightMode::kNormal, ReweightMode::kUniform, ReweightMode::kNegative})
    CHECK(parse_reweight_mode(to_string(m)) == m);
  CHECK_THROWS_AS(parse_reweight_mode("sideways"), ValidationError);
}

TEST_CASE("disabling dynamic exit sends every sample to the last layer") {
  const auto ds = small_data();
  const Split split = stratified_split(ds, 0.6, 0.1, 1);
  Variant v;
  v.toggles.de = false;
  const auto st = train_pipeline(ds.subset(split.train), small_config(), v, 1);
  CHECK(st.qlearn_loss.empty());
  const auto ev = evaluate(st, ds.subset(split.test));
  for (const auto& p : ev.predictions)
    for (std::size_t d : p.exit_depth) CHECK(d == 2);
}

TEST_CASE("a zero-sigma sweep cell equals plain training and evaluation") {
  const auto ds = small_data();
  const auto cfg = small_config();
  const std::vector<Variant> variants{Variant{}};
  const double sigmas[] = {0.0};
  const NoiseKind kinds[] = {NoiseKind::kGaussian};
  const std::uint64_t seeds[] = {4};
  SweepOptions opt;
  const auto cells = noise_sweep(ds, cfg, variants, sigmas, kinds, seeds, opt);
  REQUIRE(cells.size() == 1);

  const Split split = stratified_split(ds, opt.train_frac, opt.val_frac, 4);
  const auto st = train_pipeline(ds.subset(split.train), cfg, Variant{}, 4);
  const auto ev = evaluate(st, ds.subset(split.test));
  CHECK(cells[0].report.accuracy == ev.report.accuracy);
  CHECK(cells[0].report.weighted_f1 == ev.report.weighted_f1);
}

TEST_CASE("sweep grid shape, determinism and summaries") {
  const auto ds = small_data();
  const auto cfg = small_config();
  std::vector<Variant> variants(2);
  variants[1].toggles.cmr = false;
  variants[1].name = variants[1].toggles.name();
  const double sigmas[] = {0.0, 1.0};
  const NoiseKind kinds[] = {NoiseKind::kGaussian, NoiseKind::kSaltPepper};
  const std::uint64_t seeds[] = {1, 2};
  SweepOptions opt;
  opt.target_modalities = {0};
  const auto a = noise_sweep(ds, cfg, variants, sigmas, kinds, seeds, opt);
  CHECK(a.size() == 2 * 2 * 2 * 2);
  const auto b = noise_sweep(ds, cfg, variants, sigmas, kinds, seeds, opt);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].variant == b[i].variant);
    CHECK(a[i].report.accuracy == b[i].report.accuracy);
    CHECK(a[i].report.confusion == b[i].report.confusion);
  }
  const auto summary = summarize(a);
  CHECK(summary.size() == 2 * 2 * 2);
  for (const auto& s : summary) {
    CHECK(s.runs == 2);
    CHECK(s.accuracy_std >= 0.0);
  }
  // Clean cells do not depend on the noise kind: both kinds share the split.
  for (const auto& c : a)
    if (c.sigma == 0.0 && c.kind == NoiseKind::kSaltPepper)
      for (const auto& g : a)
        if (g.sigma == 0.0 && g.kind == NoiseKind::kGaussian && g.seed == c.seed &&
            g.variant == c.variant)
          CHECK(g.report.accuracy == c.report.accuracy);

  const auto dir = std::filesystem::temp_directory_path() / "mlad_test_eval";
  std::filesystem::create_directories(dir);
  write_sweep_csv(dir / "sweep.csv", a);
  write_sweep_json(dir / "sweep.json", a);
  std::ifstream csv(dir / "sweep.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  CHECK(lines == a.size() + 1);
  std::ifstream js(dir / "sweep.json");
  const auto doc = nlohmann::json::parse(js);
  CHECK(doc["cells"].size() == a.size());
  CHECK(doc["summary"].size() == summary.size());
  std::filesystem::remove_all(dir);
}

TEST_CASE("sweep rejects empty axes and negative sigma") {
  const auto ds = small_data();
  const std::vector<Variant> variants{Variant{}};
  const double bad[] = {-1.0};
  const NoiseKind kinds[] = {NoiseKind::kGaussian};
  const std::uint64_t seeds[] = {1};
  CHECK_THROWS_AS(noise_sweep(ds, small_config(), variants, bad, kinds, seeds, {}),
                  ValidationError);
  CHECK_THROWS_AS(noise_sweep(ds, small_config(), {}, bad, kinds, seeds, {}), ValidationError);
}
