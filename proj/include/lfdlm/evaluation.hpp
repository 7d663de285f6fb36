#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lfdlm/core_types.hpp"

namespace lfdlm {

/// Global confusion counts; rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int64_t n_classes = kNumClasses);

  /// Adds one count per pixel. Throws DataError on shape mismatch or out-of-range ids.
  void accumulate(const torch::Tensor& pred, const torch::Tensor& truth);
  void accumulate(const LabelMask& pred, const LabelMask& truth);
  void merge(const ConfusionMatrix& other);

  const torch::Tensor& counts() const { return counts_; }  // int64 [n, n]
  int64_t n_classes() const { return counts_.size(0); }
  int64_t total() const;
  /// Rows divided by their sums (double); all-zero rows stay zero.
  torch::Tensor row_normalized() const;

  nlohmann::json to_json() const;
  static ConfusionMatrix from_json(const nlohmann::json& j);

 private:
  torch::Tensor counts_;
};

ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMask& pred, const LabelMask& truth);

struct IoUReport {
  std::string model_id;
  /// IoU of the 12 scored classes in nomenclature order; nullopt when the union is empty.
  std::array<std::optional<double>, kNumClasses - 1> per_label{};
  double miou = 0.0;
  int64_t pixel_count = 0;

  std::vector<int64_t> undefined_classes() const;
  nlohmann::json to_json() const;
  static IoUReport from_json(const nlohmann::json& j);
};

/// Per-class IoU over the scored classes and their mean over defined entries.
/// Throws DataError when the matrix is empty or no scored class is defined.
IoUReport iou_report(const ConfusionMatrix& cm, const std::string& model_id = "");

struct RenderedReports {
  std::filesystem::path table_text;
  std::filesystem::path table_csv;
  std::filesystem::path confusion_csv;
  std::filesystem::path confusion_png;
  std::filesystem::path summary_json;
};

/// Plain-text label-by-model table (labels as rows, one column per report).
std::string format_iou_table(const std::vector<IoUReport>& reports);

/// Writes the IoU table (text and CSV), the row-normalized confusion grid and heatmap,
/// and a summary JSON under `out_dir`.
RenderedReports render_reports(const std::vector<IoUReport>& reports, const ConfusionMatrix& cm,
                               const std::filesystem::path& out_dir);

}  // namespace lfdlm
