#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mlad/data.hpp"
#include "mlad/eval.hpp"

namespace mlad {

struct SweepSettings {
  std::vector<double> sigmas{0.0, 5.0, 10.0};
  std::vector<NoiseKind> kinds{NoiseKind::kGaussian};
  std::vector<ReweightMode> reweight{ReweightMode::kNormal};
  bool noise_on_train = true;
};

struct AblateSettings {
  std::vector<std::string> variants{"full", "no-de", "no-rccr", "no-cfmp", "no-cmr"};
  std::vector<double> sigmas{5.0};
};

struct ExperimentConfig {
  std::string dataset_manifest;  // empty: generate from `synth`
  SynthSpec synth;
  double train_frac = 0.6;
  double val_frac = 0.1;
  PipelineConfig pipeline;
  AblationToggles ablation;
  NoiseSpec noise;  // applied to the test split by `eval`
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  SweepSettings sweep;
  AblateSettings ablate;
  std::size_t max_attention_samples = 16;  // per-sample attention maps kept in diagnostics
  std::string output_dir = "runs/mlad";

  void validate() const;
  Variant variant() const;  // toggles + reweight of this config
};

// Keys absent from the document keep their defaults; unknown keys are
// rejected so typos do not silently fall back.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Full effective configuration, every field present.
std::string dump_config(const ExperimentConfig& cfg);

SynthSpec parse_synth_spec(const std::string& json_text);

// "full", "no-de", or several disabled parts joined by '+', e.g. "no-rccr+no-cmr".
Variant parse_variant(const std::string& name, ReweightMode reweight = ReweightMode::kNormal);

}  // namespace mlad
