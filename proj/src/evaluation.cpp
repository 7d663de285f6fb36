#include "lfdlm/evaluation.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "lfdlm/io.hpp"

namespace lfdlm {

ConfusionMatrix::ConfusionMatrix(int64_t n_classes) : counts_(torch::zeros({n_classes, n_classes}, torch::kInt64)) {}

void ConfusionMatrix::accumulate(const torch::Tensor& pred, const torch::Tensor& truth) {
  if (pred.sizes() != truth.sizes()) throw DataError("confusion matrix: prediction and truth differ in shape");
  const int64_t n = n_classes();
  const auto p = pred.to(torch::kInt64).flatten();
  const auto t = truth.to(torch::kInt64).flatten();
  if (p.numel() == 0) return;
  if ((p < 0).any().item<bool>() || (p >= n).any().item<bool>() || (t < 0).any().item<bool>() ||
      (t >= n).any().item<bool>()) {
    throw DataError("confusion matrix: class id out of range");
  }
  counts_ += torch::bincount(t * n + p, {}, n * n).view({n, n});
}

void ConfusionMatrix::accumulate(const LabelMask& pred, const LabelMask& truth) {
  accumulate(pred.labels(), truth.labels());
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_classes() != n_classes()) throw DataError("confusion matrix: class counts differ");
  counts_ += other.counts_;
}

int64_t ConfusionMatrix::total() const { return counts_.sum().item<int64_t>(); }

torch::Tensor ConfusionMatrix::row_normalized() const {
  const auto c = counts_.to(torch::kFloat64);
  const auto rows = c.sum(1, true);
  return torch::where(rows > 0, c / rows.clamp_min(1.0), torch::zeros_like(c));
}

nlohmann::json ConfusionMatrix::to_json() const {
  std::vector<std::vector<int64_t>> rows;
  const auto acc = counts_.accessor<int64_t, 2>();
  for (int64_t i = 0; i < n_classes(); ++i) {
    rows.emplace_back();
    for (int64_t j = 0; j < n_classes(); ++j) rows.back().push_back(acc[i][j]);
  }
  return {{"counts", rows}};
}

ConfusionMatrix ConfusionMatrix::from_json(const nlohmann::json& j) {
  const auto rows = j.at("counts").get<std::vector<std::vector<int64_t>>>();
  ConfusionMatrix cm(static_cast<int64_t>(rows.size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw DataError("confusion matrix JSON is not square");
    for (size_t k = 0; k < rows.size(); ++k) cm.counts_[i][k] = rows[i][k];
  }
  return cm;
}

ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMask& pred, const LabelMask& truth) {
  cm.accumulate(pred, truth);
  return cm;
}

// ---------------------------------------------------------------------------

std::vector<int64_t> IoUReport::undefined_classes() const {
  std::vector<int64_t> out;
  for (size_t c = 0; c < per_label.size(); ++c) {
    if (!per_label[c]) out.push_back(static_cast<int64_t>(c));
  }
  return out;
}

nlohmann::json IoUReport::to_json() const {
  const auto& names = Nomenclature::flair().classes();
  nlohmann::json labels = nlohmann::json::array();
  for (size_t c = 0; c < per_label.size(); ++c) {
    labels.push_back({{"label", std::string(names[c])}, {"iou", per_label[c] ? nlohmann::json(*per_label[c]) : nlohmann::json()}});
  }
  return {{"model_id", model_id}, {"per_label", labels}, {"miou", miou}, {"pixel_count", pixel_count}};
}

IoUReport IoUReport::from_json(const nlohmann::json& j) {
  IoUReport r;
  r.model_id = j.value("model_id", "");
  r.miou = j.at("miou").get<double>();
  r.pixel_count = j.value("pixel_count", int64_t{0});
  const auto& labels = j.at("per_label");
  for (size_t c = 0; c < r.per_label.size() && c < labels.size(); ++c) {
    if (!labels[c].at("iou").is_null()) r.per_label[c] = labels[c].at("iou").get<double>();
  }
  return r;
}

IoUReport iou_report(const ConfusionMatrix& cm, const std::string& model_id) {
  if (cm.n_classes() != kNumClasses) throw DataError("iou_report expects a 13-class confusion matrix");
  const int64_t total = cm.total();
  if (total == 0) throw DataError("iou_report on an empty evaluation set");
  const auto acc = cm.counts().accessor<int64_t, 2>();
  IoUReport r;
  r.model_id = model_id;
  r.pixel_count = total;
  double sum = 0.0;
  int defined = 0;
  for (int64_t c : Nomenclature::flair().scored()) {
    int64_t row = 0, col = 0;
    for (int64_t k = 0; k < kNumClasses; ++k) {
      row += acc[c][k];
      col += acc[k][c];
    }
    const int64_t uni = row + col - acc[c][c];
    if (uni == 0) continue;
    const double iou = static_cast<double>(acc[c][c]) / static_cast<double>(uni);
    r.per_label[static_cast<size_t>(c)] = iou;
    sum += iou;
    ++defined;
  }
  if (defined == 0) throw DataError("iou_report: no scored class present in truth or prediction");
  r.miou = sum / defined;
  return r;
}

// ---------------------------------------------------------------------------

namespace {

std::string percent(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", *v * 100.0);
  return buf;
}

}  // namespace

std::string format_iou_table(const std::vector<IoUReport>& reports) {
  const auto& names = Nomenclature::flair().classes();
  size_t label_width = 5;
  for (size_t c = 0; c + 1 < names.size(); ++c) label_width = std::max(label_width, names[c].size());
  std::vector<size_t> widths;
  for (const auto& r : reports) widths.push_back(std::max<size_t>(8, r.model_id.size()));

  std::ostringstream out;
  auto row = [&](const std::string& label, const std::vector<std::string>& cells) {
    out << label << std::string(label_width - label.size() + 2, ' ');
    for (size_t i = 0; i < cells.size(); ++i) {
      out << std::string(widths[i] - cells[i].size() + 2, ' ') << cells[i];
    }
    out << '\n';
  };
  std::vector<std::string> header;
  for (const auto& r : reports) header.push_back(r.model_id);
  row("label", header);
  for (size_t c = 0; c + 1 < names.size(); ++c) {
    std::vector<std::string> cells;
    for (const auto& r : reports) cells.push_back(percent(r.per_label[c]));
    row(std::string(names[c]), cells);
  }
  std::vector<std::string> miou;
  for (const auto& r : reports) miou.push_back(percent(r.miou));
  row("mIoU", miou);
  return out.str();
}

RenderedReports render_reports(const std::vector<IoUReport>& reports, const ConfusionMatrix& cm,
                               const std::filesystem::path& out_dir) {
  if (reports.empty()) throw DataError("render_reports: no reports");
  if (cm.total() == 0) throw DataError("render_reports: empty confusion matrix");
  std::filesystem::create_directories(out_dir);
  RenderedReports paths{out_dir / "iou_table.txt", out_dir / "iou_table.csv", out_dir / "confusion_matrix.csv",
                        out_dir / "confusion_matrix.png", out_dir / "summary.json"};
  const auto& names = Nomenclature::flair().classes();

  io::write_text(paths.table_text, format_iou_table(reports));

  std::ostringstream csv;
  csv << "label";
  for (const auto& r : reports) csv << ',' << r.model_id;
  csv << '\n';
  for (size_t c = 0; c + 1 < names.size(); ++c) {
    csv << '"' << names[c] << '"';
    for (const auto& r : reports) csv << ',' << (r.per_label[c] ? std::to_string(*r.per_label[c]) : "");
    csv << '\n';
  }
  csv << "mIoU";
  for (const auto& r : reports) csv << ',' << std::to_string(r.miou);
  csv << '\n';
  io::write_text(paths.table_csv, csv.str());

  const auto norm = cm.row_normalized();
  const auto acc = norm.accessor<double, 2>();
  const int64_t n = cm.n_classes();
  std::ostringstream grid;
  grid << "truth\\prediction";
  for (int64_t k = 0; k < n; ++k) grid << ",\"" << names[static_cast<size_t>(k)] << '"';
  grid << '\n';
  for (int64_t i = 0; i < n; ++i) {
    grid << '"' << names[static_cast<size_t>(i)] << '"';
    for (int64_t k = 0; k < n; ++k) grid << ',' << acc[i][k];
    grid << '\n';
  }
  io::write_text(paths.confusion_csv, grid.str());

  constexpr int kCell = 32;
  cv::Mat gray(static_cast<int>(n) * kCell, static_cast<int>(n) * kCell, CV_8UC1);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t k = 0; k < n; ++k) {
      const auto v = static_cast<uchar>(std::lround(acc[i][k] * 255.0));
      gray(cv::Rect(static_cast<int>(k) * kCell, static_cast<int>(i) * kCell, kCell, kCell)).setTo(v);
    }
  }
  cv::Mat heat;
  cv::applyColorMap(gray, heat, cv::COLORMAP_VIRIDIS);
  if (!cv::imwrite(paths.confusion_png.string(), heat)) {
    throw DataError("cannot write heatmap " + paths.confusion_png.string());
  }

  nlohmann::json summary{{"reports", nlohmann::json::array()}, {"confusion_matrix", cm.to_json()}};
  for (const auto& r : reports) summary["reports"].push_back(r.to_json());
  io::write_text(paths.summary_json, summary.dump(2));
  return paths;
}

}  // namespace lfdlm
