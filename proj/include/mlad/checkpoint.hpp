#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "mlad/eval.hpp"

namespace mlad {

enum class Stage { kPhase1 = 0, kQLearn = 1, kPriors = 2, kPhase2 = 3 };
inline constexpr std::size_t kNumStages = 4;

std::string to_string(Stage s);
Stage parse_stage(const std::string& s);  // phase1, qlearn, priors, phase2

std::string sha256_hex(const std::filesystem::path& file);

struct MatrixEntry {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string sha256;
  Stage stage = Stage::kPhase1;
};

struct CheckpointManifest {
  static constexpr int kSchemaVersion = 1;

  int schema_version = kSchemaVersion;
  std::string config;  // effective config the checkpoint was trained with
  std::uint64_t seed = 0;
  std::array<bool, kNumStages> complete{};
  std::map<std::string, MatrixEntry> files;  // relative path -> entry
  std::string meta;  // JSON: sizes, exit depths, priors' scalars, gmm splits

  // Stages done form a prefix of phase1, qlearn, priors, phase2.
  bool has(Stage s) const { return complete[static_cast<std::size_t>(s)]; }
  // First stage not yet complete; kNumStages when all are.
  std::size_t next_stage() const;
};

// Directory layout: manifest.json plus one binary matrix file per entry,
// e.g. towers/m0/block1/weight.bin.
class Checkpoint {
 public:
  explicit Checkpoint(std::filesystem::path dir) : dir_(std::move(dir)) {}

  const std::filesystem::path& dir() const { return dir_; }
  bool exists() const;
  CheckpointManifest read_manifest() const;

  // Starts an empty checkpoint, removing any previous content.
  void reset(const std::string& config, std::uint64_t seed) const;
  // Writes the artifacts of `stage` from `st` and marks it complete. Throws
  // StageChainError unless every earlier stage is complete; later stages
  // are invalidated.
  void save_stage(Stage stage, const PipelineState& st) const;
  // Restores everything up to and including `upto`, verifying each file's
  // digest. Throws StageChainError if `upto` is not complete.
  PipelineState load(Stage upto) const;

 private:
  void write_manifest(const CheckpointManifest& m) const;
  std::filesystem::path dir_;
};

}  // namespace mlad
