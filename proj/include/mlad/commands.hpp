#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mlad/checkpoint.hpp"
#include "mlad/config.hpp"

namespace mlad {

// Exclusive ownership of an output directory for one command. A lock left
// behind by a process that no longer exists is taken over.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& out_dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

// Dataset named by the config: the manifest if given, otherwise generated.
MultimodalDataset experiment_dataset(const ExperimentConfig& cfg);

// Writes <out>/data/{manifest.json, *.csv}; returns the manifest path.
std::filesystem::path cmd_gen_data(const SynthSpec& spec, const std::filesystem::path& out);

struct TrainRequest {
  std::string stage = "all";  // phase1, qlearn, priors, phase2 or all
  bool restart = false;       // discard an existing checkpoint first
};

// Runs the requested stage(s) into <out>/checkpoints. "all" resumes after
// the last completed stage of a checkpoint made with the same config and
// seed.
CheckpointManifest cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out,
                             std::uint64_t seed, const TrainRequest& req, std::ostream& log);

// Evaluates the complete checkpoint on the test split (with cfg.noise) and
// writes reports/eval.json, reports/predictions.csv and
// diagnostics/diagnostics.json.
MetricReport cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& out,
                      std::uint64_t seed, std::ostream& log);

// Noise protocol of the sweep and ablation grids.
SweepOptions sweep_options(const ExperimentConfig& cfg);

// Grids over cfg.sweep / cfg.ablate; write reports/{sweep,ablation}.{csv,json}.
std::vector<SweepCell> cmd_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                 std::ostream& log);
std::vector<SweepCell> cmd_ablate(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                  std::ostream& log);

// Thread count from MLAD_THREADS (unset: 1).
std::size_t thread_override();

}  // namespace mlad
