#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlad/cad.hpp"
#include "mlad/data.hpp"
#include "mlad/sad.hpp"

namespace mlad {

struct MetricReport {
  double accuracy = 0.0;
  double weighted_f1 = 0.0;
  double macro_f1 = 0.0;  // over classes with nonzero support
  std::optional<double> auc;  // binary problems only
  Vec per_class_f1;
  std::vector<std::size_t> support;
  std::vector<std::vector<std::size_t>> confusion;  // [true][pred]
  std::size_t zero_support_classes = 0;
};

// `scores` holds per-class probabilities (N x C) and may be empty; AUC is
// reported only for C = 2 with both classes present.
MetricReport compute_metrics(std::span<const std::size_t> preds, const Mat& scores,
                             std::span<const std::size_t> labels, std::size_t num_classes);

// Rank-statistic AUC of `scores` for the positive label 1, ties by midranks.
double binary_auc(std::span<const double> scores, std::span<const std::size_t> labels);

// Mean silhouette coefficient under Euclidean distance. Samples in singleton
// clusters score 0.
double silhouette_score(const Mat& x, std::span<const std::size_t> labels);

struct AblationToggles {
  bool de = true;    // dynamic exit; off forces every sample to the last layer
  bool rccr = true;  // cross-class residual term of the CAD loss
  bool cfmp = true;  // eigen reweighting of the compensation
  bool cmr = true;   // cross-modal rectification before the head

  std::string name() const;  // "full" or e.g. "no-rccr"
  bool operator==(const AblationToggles&) const = default;
};

// A trained configuration in a sweep or ablation table.
struct Variant {
  std::string name = "full";
  AblationToggles toggles;
  ReweightMode reweight = ReweightMode::kNormal;
};

std::vector<Variant> single_toggle_ablations();  // full, no-de, no-rccr, no-cfmp, no-cmr
std::string to_string(ReweightMode mode);
ReweightMode parse_reweight_mode(const std::string& s);

struct PipelineConfig {
  TowerSizes tower;
  Phase1Config phase1;
  QLearnConfig qlearn;
  SadOptions sad;
  Phase2Config phase2;
  bool normalize_features = true;
};

// Model plus everything produced on the way, in stage order.
struct PipelineState {
  FeatureStats stats;
  bool normalized = true;  // inputs are z-scored with `stats`
  MladModel model;
  DepthCache cache;
  std::vector<double> phase1_loss;
  std::vector<std::vector<Vec>> rewards;
  std::vector<double> qlearn_loss;
  std::vector<GmmSplit> splits;
  std::vector<double> phase2_loss;
};

// The four training stages. `train` is the raw training split; each stage
// reapplies the normalization fitted in the first.
void run_phase1(PipelineState& st, const MultimodalDataset& train, const PipelineConfig& cfg,
                const Variant& variant, std::uint64_t seed);
void run_qlearn(PipelineState& st, const MultimodalDataset& train, const PipelineConfig& cfg,
                const Variant& variant, std::uint64_t seed);
void run_priors(PipelineState& st, const MultimodalDataset& train, const PipelineConfig& cfg,
                const Variant& variant);
void run_phase2(PipelineState& st, const MultimodalDataset& train, const PipelineConfig& cfg,
                const Variant& variant, std::uint64_t seed);

PipelineState train_pipeline(const MultimodalDataset& train, const PipelineConfig& cfg,
                             const Variant& variant, std::uint64_t seed);

struct Evaluation {
  MetricReport report;
  std::vector<Prediction> predictions;
};

Evaluation evaluate(const PipelineState& st, const MultimodalDataset& test,
                    bool keep_attention = false);

struct SweepOptions {
  double train_frac = 0.6;
  double val_frac = 0.1;
  double fraction = 0.5;                  // share of rows corrupted
  std::vector<std::size_t> target_modalities;  // empty: every modality
  bool noise_on_train = true;
};

struct SweepCell {
  std::string variant;
  NoiseKind kind = NoiseKind::kGaussian;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  MetricReport report;
};

// Trains and evaluates every (variant, kind, sigma, seed) cell. For a given
// seed the split, initialization and corrupted row set are shared by all
// variants and sigmas.
std::vector<SweepCell> noise_sweep(const MultimodalDataset& ds, const PipelineConfig& cfg,
                                   std::span<const Variant> variants,
                                   std::span<const double> sigmas,
                                   std::span<const NoiseKind> kinds,
                                   std::span<const std::uint64_t> seeds, const SweepOptions& opt);

// noise_sweep over single-toggle variants (or the given ones) with Gaussian
// noise.
std::vector<SweepCell> ablation_run(const MultimodalDataset& ds, const PipelineConfig& cfg,
                                    std::span<const Variant> variants,
                                    std::span<const double> sigmas,
                                    std::span<const std::uint64_t> seeds, const SweepOptions& opt);

struct SweepSummary {
  std::string variant;
  NoiseKind kind = NoiseKind::kGaussian;
  double sigma = 0.0;
  std::size_t runs = 0;
  double accuracy_mean = 0.0, accuracy_std = 0.0;
  double weighted_f1_mean = 0.0, weighted_f1_std = 0.0;
  double macro_f1_mean = 0.0, macro_f1_std = 0.0;
};

// Mean and sample standard deviation over seeds per (variant, kind, sigma),
// in first-appearance order.
std::vector<SweepSummary> summarize(std::span<const SweepCell> cells);
double mean_accuracy(std::span<const SweepCell> cells, const std::string& variant, double sigma);

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepCell> cells);
void write_sweep_json(const std::filesystem::path& path, std::span<const SweepCell> cells);

}  // namespace mlad
