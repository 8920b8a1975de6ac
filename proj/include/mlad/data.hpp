#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mlad/mat.hpp"

namespace mlad {

struct MultimodalDataset {
  std::vector<std::string> modality_names;
  std::vector<Mat> features;  // one N x d^m matrix per modality
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t num_modalities() const { return features.size(); }
  std::vector<std::size_t> class_counts() const;
  // Row indices of each class, ascending.
  std::vector<std::vector<std::size_t>> class_indices() const;
  MultimodalDataset subset(std::span<const std::size_t> idx) const;

  // Shape and label checks; `require_two_per_class` enforces the minimum
  // needed for per-class distribution fitting.
  void validate(bool require_two_per_class = true) const;
};

// Per-feature statistics taken from a training split.
struct FeatureStats {
  std::vector<Vec> mean;
  std::vector<Vec> std;  // floored at 1e-12
  std::vector<Vec> min;
  std::vector<Vec> max;

  static FeatureStats fit(const MultimodalDataset& train);
  // z-score with the stored statistics; a pure transform.
  MultimodalDataset normalize(const MultimodalDataset& ds) const;
};

enum class NoiseKind { kGaussian, kSaltPepper };

struct NoiseSpec {
  NoiseKind kind = NoiseKind::kGaussian;
  double sigma = 0.0;
  double fraction = 0.5;
  std::vector<std::size_t> target_modalities;  // empty: all modalities
  std::string seed_stream = "noise";

  void validate() const;
};

NoiseKind parse_noise_kind(const std::string& s);
std::string to_string(NoiseKind k);

// Affected rows: the first floor(fraction * N) entries of a seeded permutation.
std::vector<std::size_t> noise_affected_rows(std::size_t n, double fraction, std::uint64_t seed,
                                             const std::string& stream);

// Corruption probability per feature for salt-and-pepper noise.
double salt_pepper_probability(double sigma);

// Returns a corrupted copy. `bounds` supplies the per-feature min/max used by
// salt-and-pepper; if absent they are taken from `ds` itself.
MultimodalDataset inject_noise(const MultimodalDataset& ds, const NoiseSpec& spec,
                               std::uint64_t seed, const FeatureStats* bounds = nullptr);

struct ConfusionPair {
  std::size_t a = 0;
  std::size_t b = 0;
  double strength = 0.0;
  std::vector<std::size_t> modalities;  // empty: all modalities
};

struct SynthSpec {
  std::size_t num_classes = 4;
  std::size_t num_modalities = 2;
  std::vector<std::size_t> dims{32, 32};
  std::size_t samples_per_class = 100;
  std::vector<ConfusionPair> confusion_pairs;
  // Per-class depth needed to separate it; empty means all 1.
  std::vector<std::size_t> depth_profile;
  std::size_t tower_depth = 5;
  double class_separation = 4.0;
  double noise_std = 1.0;
  double displacement_fraction = 0.0;
  double displacement_strength = 0.6;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthResult {
  MultimodalDataset dataset;
  // Generating class means per modality (C x d^m) before displacement.
  std::vector<Mat> class_means;
};

SynthResult synth_generate_full(const SynthSpec& spec);
MultimodalDataset synth_generate(const SynthSpec& spec);

// Bayes accuracy between classes a and b under the generating isotropic
// Gaussians of all modalities (equal priors): Phi(||mu_a - mu_b|| / (2 sigma)).
double synth_pair_bayes_accuracy(const SynthResult& synth, double noise_std, std::size_t a,
                                 std::size_t b);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// Per-class proportional allocation; rounding remainder goes to test.
Split stratified_split(const MultimodalDataset& ds, double train_frac, double val_frac,
                       std::uint64_t seed);

// CSV + manifest ingestion. The manifest is JSON:
//   {"modalities": [{"name": ..., "path": ...}], "labels": ..., "num_classes": C}
// with paths relative to the manifest's directory.
MultimodalDataset load_dataset(const std::filesystem::path& manifest);
void write_dataset(const MultimodalDataset& ds, const std::filesystem::path& dir,
                   const std::string& manifest_name = "manifest.json");

Mat read_csv_matrix(const std::filesystem::path& path);
void write_csv_matrix(const Mat& m, const std::filesystem::path& path);

}  // namespace mlad
