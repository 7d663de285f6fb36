#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfdlm/dataset_io.hpp"
#include "lfdlm/fusion.hpp"
#include "lfdlm/sits_preprocess.hpp"
#include "lfdlm/training.hpp"

namespace lfdlm {

/// Reference inference times (seconds) on the full test set.
namespace published_timing {
inline constexpr double kBaseline = 396.0;
inline constexpr double kTemporal = 229.0;
inline constexpr double kAerial = 429.0;
inline constexpr double kLateFusion = 594.0;
inline constexpr double kEnsemble = 943.0;
}  // namespace published_timing

struct TimingBudget {
  double baseline_seconds = published_timing::kBaseline;
  double max_ratio = 2.5;

  void validate() const;
  nlohmann::json to_json() const;
  static TimingBudget from_json(const nlohmann::json& j, const TimingBudget& base);
};

struct TimingReport {
  std::string model_id;
  double seconds = 0.0;
  double ratio = 0.0;
  bool within_budget = false;
  int64_t samples = 0;

  nlohmann::json to_json() const;
  static TimingReport from_json(const nlohmann::json& j);
};

/// ratio = seconds / baseline_seconds; within_budget = ratio <= max_ratio.
TimingReport make_timing_report(const std::string& model_id, double seconds, const TimingBudget& budget,
                                int64_t samples = 0);

/// Models run for one timed configuration. One member is a single branch; several are fused.
struct InferencePlan {
  std::vector<BranchModel*> members;
  FusionSpec fusion;
};

struct TimingOptions {
  int64_t batch_size = 12;
  /// Count sample loading and SITS preprocessing inside the timed region.
  bool include_loading = true;
  int64_t warmup_batches = 1;
  FilterPolicy filter;
};

/// Wall-clock of loading, preprocessing, every member forward, alignment, fusion and argmax over
/// the test split. One warm-up batch runs first and is not timed.
TimingReport time_inference(const std::string& model_id, const InferencePlan& plan, const DatasetManifest& data,
                            const TimingBudget& budget, const TimingOptions& options = {});

/// Table of (model, seconds, relative time), sorted by ratio ascending.
std::string compare(std::vector<TimingReport> reports);

}  // namespace lfdlm
