#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lfdlm/aerial_branch.hpp"
#include "lfdlm/dataset_io.hpp"
#include "lfdlm/evaluation.hpp"
#include "lfdlm/sits_preprocess.hpp"
#include "lfdlm/temporal_branch.hpp"

namespace lfdlm {

enum class BranchKind { aerial, temporal };
std::string_view to_string(BranchKind kind);
BranchKind branch_from_string(std::string_view text);

struct TrainConfig {
  double lr_init = 1e-4;
  double lr_final = 1e-7;
  double decay_power = 1.0;
  int64_t max_epochs = 30;
  int64_t patience = 15;
  int64_t batch_size = 12;
  double ce_weight = 1.0;
  double dice_weight = 1.0;
  double weight_decay = 0.01;
  uint64_t seed = 0;
  /// Drop the 'other' class from the loss as well as from the metrics.
  bool ignore_other_in_loss = false;
  bool augment = true;
  /// Caps the total number of optimizer steps (0 = max_epochs full passes).
  int64_t max_steps = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
};

struct TrainState {
  int64_t epoch = 0;
  int64_t global_step = 0;
  double best_val_metric = -std::numeric_limits<double>::infinity();
  double best_val_loss = std::numeric_limits<double>::infinity();
  int64_t epochs_since_improvement = 0;
  uint64_t rng_seed = 0;

  nlohmann::json to_json() const;
};

struct EpochRecord {
  int64_t epoch = 0;
  int64_t global_step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_miou = 0.0;
  double lr = 0.0;

  nlohmann::json to_json() const;
};

/// ce * CE + dice * (1 - mean_c (2 sum p g + s) / (sum p + sum g + s)), p = softmax(logits).
/// logits [B, C, H, W], target [B, H, W] int64. Throws DataError on out-of-range targets.
torch::Tensor combined_loss(const torch::Tensor& logits, const torch::Tensor& target, double ce_weight = 1.0,
                            double dice_weight = 1.0, std::optional<int64_t> ignore_index = std::nullopt,
                            double smooth = 1.0);

/// Polynomial decay from lr_init at step 0 to lr_final at total_steps.
double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg);

/// Counts epochs without a strict decrease of the monitored loss.
class EarlyStopping {
 public:
  explicit EarlyStopping(int64_t patience) : patience_(patience) {}
  /// Returns true once `patience` consecutive epochs failed to improve.
  bool update(double monitored);
  int64_t epochs_since_improvement() const { return since_; }
  double best() const { return best_; }

 private:
  int64_t patience_;
  int64_t since_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

/// Network choice plus the geometry it runs at.
struct BranchSpec {
  BranchKind kind = BranchKind::aerial;
  ScaleProfile profile = ScaleProfile::toy();
  AerialBranchConfig aerial = AerialBranchConfig::toy();
  TemporalBranchConfig temporal = TemporalBranchConfig::toy();

  nlohmann::json to_json() const;
  static BranchSpec from_json(const nlohmann::json& j);
};

/// One trainable branch behind a common interface.
class BranchModel {
 public:
  explicit BranchModel(const BranchSpec& spec);

  const BranchSpec& spec() const { return spec_; }
  torch::nn::Module& module();
  std::vector<torch::Tensor> parameters();
  void train(bool on = true);
  void to(torch::Dtype dtype);
  void set_input_statistics(const ChannelStats& stats);

  /// Native-resolution logits: aerial [B, 13, H, W]; temporal [B, 13, h, w].
  torch::Tensor logits(const Batch& batch);
  /// Loss of one labelled batch, supervised at the configured resolution.
  torch::Tensor loss(const Batch& batch, const TrainConfig& cfg);
  /// Class probabilities at aerial resolution [B, 13, H, W].
  torch::Tensor probabilities(const Batch& batch);

  AerialBranch aerial{nullptr};
  TemporalBranch temporal{nullptr};

 private:
  BranchSpec spec_;
};

/// Majority label of each (H / crop)-sized block of [B, H, W] labels; ties go to the lowest id.
torch::Tensor pool_labels(const torch::Tensor& labels, int64_t out_size);

/// Filtered and monthly-averaged copy of the sample when its SITS has more than 12 frames.
/// A stack with no cloudless frame is averaged unfiltered.
Sample prepare_sample(const Sample& sample, const FilterPolicy& policy = {});

struct TrainHooks {
  /// Replaces the computed (val_loss, val_miou) of an epoch when it returns a value.
  std::function<std::optional<std::pair<double, double>>(int64_t epoch)> validation_override;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::vector<EpochRecord> history;
  TrainState state;
  std::vector<double> step_losses;
};

/// Trains one branch with AdamW and the polynomial schedule. Keeps the checkpoint with the best
/// validation mIoU and stops early when validation loss has not improved for `patience` epochs.
/// Writes best.pt and history.jsonl under `out_dir`.
TrainResult train_branch(const BranchSpec& spec, std::span<const Sample> train, std::span<const Sample> val,
                         const TrainConfig& cfg, const ChannelStats& stats, const std::filesystem::path& out_dir,
                         const TrainHooks& hooks = {});
TrainResult train_branch(const BranchSpec& spec, const DatasetManifest& data, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir, const TrainHooks& hooks = {});

/// Loads and prepares every sample of one split.
std::vector<Sample> load_split(const DatasetManifest& data, Split split);

struct Checkpoint {
  BranchModel model;
  nlohmann::json meta;
};

void save_checkpoint(BranchModel& model, const TrainState& state, const std::filesystem::path& path);
/// Throws DataError when the file is missing or its stored config digest does not match.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Aerial-resolution probabilities for every sample, keyed in input order.
std::vector<torch::Tensor> predict_probabilities(BranchModel& model, std::span<const Sample> samples,
                                                 int64_t batch_size);
/// Confusion matrix of argmax predictions against the sample masks.
ConfusionMatrix evaluate_model(BranchModel& model, std::span<const Sample> samples, int64_t batch_size);

}  // namespace lfdlm
