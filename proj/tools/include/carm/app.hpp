#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "carm/eval.hpp"
#include "carm/training.hpp"

namespace carm::app {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Bad flags, bad config values or missing required settings.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Runs one command line (without the program name). Progress goes to `out`,
// diagnostics and usage text to `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Environment variable naming the directory relative paths resolve against.
inline constexpr const char* kDataRootVariable = "CARM_DATA_ROOT";
inline constexpr const char* kConfigEchoFile = "config_echo.json";

struct AblationCell {
  InitKind init = InitKind::pretext;
  TuneMode mode = TuneMode::full;
  bool use_demographics = true;

  std::string label() const;
  friend bool operator==(const AblationCell&, const AblationCell&) = default;
};

// Full fine-tuning and two-layer probing from both initialisations,
// one-layer probing from the pretext task, and full fine-tuning from the
// pretext task without demographics.
std::vector<AblationCell> ablation_grid();

struct AblationSettings {
  std::filesystem::path pretext_checkpoint;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  TrainConfig base;  // optimiser, epochs and augmentation shared by every cell
};

struct AblationRun {
  AblationCell cell;
  std::uint64_t seed = 0;
  EvalReport report;
  std::vector<bool> trainable;
  std::uint64_t frozen_hash_before = 0;  // trunk (probe2) or everything but head.fc2 (probe1)
  std::uint64_t frozen_hash_after = 0;
};

struct AblationResult {
  std::vector<AblationRun> runs;

  // Median test micro F1 over seeds.
  double median_f1(const AblationCell& cell) const;
};

// Trains and evaluates every cell for every seed on a split classification
// manifest. Each run writes into out_dir/<label>-s<seed>; the combined
// report goes to out_dir.
AblationResult run_ablation(const AblationSettings& settings, const DatasetManifest& manifest,
                            const std::filesystem::path& out_dir, std::ostream* log = nullptr);

// Hash of the tensors a tuning mode must leave untouched.
std::uint64_t frozen_hash(const ModelParams& params, const std::vector<bool>& trainable);

}  // namespace carm::app
