#include <cmath>
#include <fstream>
#include <map>

#include "json.hpp"

#include "mlad/errors.hpp"
#include "mlad/eval.hpp"

namespace mlad {

std::vector<SweepCell> noise_sweep(const MultimodalDataset& ds, const PipelineConfig& cfg,
                                   std::span<const Variant> variants,
                                   std::span<const double> sigmas,
                                   std::span<const NoiseKind> kinds,
                                   std::span<const std::uint64_t> seeds, const SweepOptions& opt) {
  if (variants.empty() || sigmas.empty() || kinds.empty() || seeds.empty())
    throw ValidationError("noise_sweep: empty grid axis");
  for (double s : sigmas)
    if (!(s >= 0.0) || !std::isfinite(s)) throw ValidationError("noise_sweep: sigma must be >= 0");
  ds.validate(true);
  std::vector<SweepCell> cells;
  for (std::uint64_t seed : seeds) {
    const Split split = stratified_split(ds, opt.train_frac, opt.val_frac, seed);
    const MultimodalDataset clean_train = ds.subset(split.train);
    const FeatureStats bounds = FeatureStats::fit(clean_train);
    for (NoiseKind kind : kinds) {
      for (double sigma : sigmas) {
        MultimodalDataset noisy = ds;
        if (sigma > 0.0) {
          NoiseSpec spec;
          spec.kind = kind;
          spec.sigma = sigma;
          spec.fraction = opt.fraction;
          spec.target_modalities = opt.target_modalities;
          noisy = inject_noise(ds, spec, seed, &bounds);
        }
        const MultimodalDataset train = opt.noise_on_train ? noisy.subset(split.train) : clean_train;
        const MultimodalDataset test = noisy.subset(split.test);
        for (const Variant& v : variants) {
          const PipelineState st = train_pipeline(train, cfg, v, seed);
          cells.push_back({v.name, kind, sigma, seed, evaluate(st, test).report});
        }
      }
    }
  }
  return cells;
}

std::vector<SweepCell> ablation_run(const MultimodalDataset& ds, const PipelineConfig& cfg,
                                    std::span<const Variant> variants,
                                    std::span<const double> sigmas,
                                    std::span<const std::uint64_t> seeds, const SweepOptions& opt) {
  const std::vector<Variant> defaults = single_toggle_ablations();
  const std::span<const Variant> used = variants.empty() ? std::span<const Variant>(defaults) : variants;
  const NoiseKind kinds[] = {NoiseKind::kGaussian};
  return noise_sweep(ds, cfg, used, sigmas, kinds, seeds, opt);
}

namespace {

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  sd = 0.0;
  if (v.size() < 2) return;
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
}

}  // namespace

std::vector<SweepSummary> summarize(std::span<const SweepCell> cells) {
  struct Acc {
    std::vector<double> acc, wf1, mf1;
  };
  std::vector<SweepSummary> out;
  std::vector<Acc> accs;
  for (const SweepCell& c : cells) {
    std::size_t k = 0;
    while (k < out.size() &&
           !(out[k].variant == c.variant && out[k].kind == c.kind && out[k].sigma == c.sigma))
      ++k;
    if (k == out.size()) {
      out.push_back({c.variant, c.kind, c.sigma});
      accs.emplace_back();
    }
    accs[k].acc.push_back(c.report.accuracy);
    accs[k].wf1.push_back(c.report.weighted_f1);
    accs[k].mf1.push_back(c.report.macro_f1);
  }
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k].runs = accs[k].acc.size();
    mean_std(accs[k].acc, out[k].accuracy_mean, out[k].accuracy_std);
    mean_std(accs[k].wf1, out[k].weighted_f1_mean, out[k].weighted_f1_std);
    mean_std(accs[k].mf1, out[k].macro_f1_mean, out[k].macro_f1_std);
  }
  return out;
}

double mean_accuracy(std::span<const SweepCell> cells, const std::string& variant, double sigma) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const SweepCell& c : cells)
    if (c.variant == variant && c.sigma == sigma) {
      sum += c.report.accuracy;
      ++n;
    }
  if (n == 0) throw ValidationError("mean_accuracy: no cells for variant '" + variant + "'");
  return sum / static_cast<double>(n);
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepCell> cells) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "variant,noise,sigma,seed,accuracy,weighted_f1,macro_f1,auc\n";
  out.precision(17);
  for (const SweepCell& c : cells) {
    out << c.variant << ',' << to_string(c.kind) << ',' << c.sigma << ',' << c.seed << ','
        << c.report.accuracy << ',' << c.report.weighted_f1 << ',' << c.report.macro_f1 << ',';
    if (c.report.auc) out << *c.report.auc;
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_sweep_json(const std::filesystem::path& path, std::span<const SweepCell> cells) {
  nlohmann::json cj = nlohmann::json::array();
  for (const SweepCell& c : cells) {
    nlohmann::json j = {{"variant", c.variant},
                        {"noise", to_string(c.kind)},
                        {"sigma", c.sigma},
                        {"seed", c.seed},
                        {"accuracy", c.report.accuracy},
                        {"weighted_f1", c.report.weighted_f1},
                        {"macro_f1", c.report.macro_f1},
                        {"per_class_f1", c.report.per_class_f1},
                        {"confusion", c.report.confusion}};
    if (c.report.auc) j["auc"] = *c.report.auc;
    cj.push_back(std::move(j));
  }
  nlohmann::json sj = nlohmann::json::array();
  for (const SweepSummary& s : summarize(cells))
    sj.push_back({{"variant", s.variant},
                  {"noise", to_string(s.kind)},
                  {"sigma", s.sigma},
                  {"runs", s.runs},
                  {"accuracy_mean", s.accuracy_mean},
                  {"accuracy_std", s.accuracy_std},
                  {"weighted_f1_mean", s.weighted_f1_mean},
                  {"weighted_f1_std", s.weighted_f1_std},
                  {"macro_f1_mean", s.macro_f1_mean},
                  {"macro_f1_std", s.macro_f1_std}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << nlohmann::json{{"cells", cj}, {"summary", sj}}.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace mlad
