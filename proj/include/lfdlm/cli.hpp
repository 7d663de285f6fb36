#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfdlm/aerial_branch.hpp"
#include "lfdlm/benchmark.hpp"
#include "lfdlm/dataset_io.hpp"
#include "lfdlm/fusion.hpp"
#include "lfdlm/sits_preprocess.hpp"
#include "lfdlm/temporal_branch.hpp"
#include "lfdlm/training.hpp"

namespace lfdlm::cli {

namespace fs = std::filesystem;

/// A prerequisite output of an earlier subcommand is absent.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Another process holds the run directory lock.
class LockBusyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kMissingArtifact = 3,
  kDataError = 4,
  kLockBusy = 5,
};

struct ExperimentConfig {
  ScaleProfile scale = ScaleProfile::toy();
  /// Existing dataset; when absent `gen-data` synthesizes one from `synthetic`.
  std::optional<fs::path> manifest;
  SyntheticSpec synthetic = SyntheticSpec::defaults(ScaleProfile::toy(), 0);
  AerialBranchConfig aerial = AerialBranchConfig::toy();
  TemporalBranchConfig temporal = TemporalBranchConfig::toy();
  FusionSpec fusion;
  TrainConfig train;
  TimingBudget budget;
  FilterPolicy filter;
  fs::path output_dir = "runs/default";

  /// Throws ConfigError naming the first inconsistent field.
  void validate() const;
  BranchSpec branch(BranchKind kind) const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// Reads a JSON file and applies dotted KEY=VALUE overrides before validation.
  static ExperimentConfig load(const fs::path& path, const std::vector<std::string>& overrides);
};

/// Sets the dotted path of `assignment` ("a.b.c=value"). Values are parsed as JSON when
/// possible and stored as strings otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Full command line including the program name. Returns an ExitCode.
int run(int argc, char** argv);
int run(const std::vector<std::string>& args);

}  // namespace lfdlm::cli
