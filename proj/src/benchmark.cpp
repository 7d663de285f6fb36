#include "lfdlm/benchmark.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>

namespace lfdlm {

void TimingBudget::validate() const {
  if (!(baseline_seconds > 0.0) || !(max_ratio > 0.0)) {
    throw ConfigError("budget: baseline_seconds and max_ratio must be positive");
  }
}

nlohmann::json TimingBudget::to_json() const {
  return {{"baseline_seconds", baseline_seconds}, {"max_ratio", max_ratio}};
}

TimingBudget TimingBudget::from_json(const nlohmann::json& j, const TimingBudget& base) {
  TimingBudget b = base;
  try {
    b.baseline_seconds = j.value("baseline_seconds", b.baseline_seconds);
    b.max_ratio = j.value("max_ratio", b.max_ratio);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("budget: ") + e.what());
  }
  return b;
}

nlohmann::json TimingReport::to_json() const {
  return {{"model_id", model_id},
          {"seconds", seconds},
          {"ratio", ratio},
          {"within_budget", within_budget},
          {"samples", samples}};
}

TimingReport TimingReport::from_json(const nlohmann::json& j) {
  return {j.at("model_id").get<std::string>(), j.at("seconds").get<double>(), j.at("ratio").get<double>(),
          j.at("within_budget").get<bool>(), j.value("samples", int64_t{0})};
}

TimingReport make_timing_report(const std::string& model_id, double seconds, const TimingBudget& budget,
                                int64_t samples) {
  budget.validate();
  const double ratio = seconds / budget.baseline_seconds;
  return {model_id, seconds, ratio, ratio <= budget.max_ratio, samples};
}

namespace {

torch::Tensor infer_batch(const InferencePlan& plan, const Batch& batch) {
  std::vector<torch::Tensor> probs;
  for (auto* model : plan.members) probs.push_back(model->probabilities(batch));
  const auto fused = probs.size() == 1 ? probs.front() : fuse(probs, plan.fusion);
  return argmax_labels(fused);
}

}  // namespace

TimingReport time_inference(const std::string& model_id, const InferencePlan& plan, const DatasetManifest& data,
                            const TimingBudget& budget, const TimingOptions& options) {
  if (plan.members.empty()) throw ConfigError("time_inference: no models in the plan");
  if (plan.members.size() > 1) plan.fusion.validate();
  const auto entries = data.split(Split::test);
  if (entries.empty()) throw DataError("time_inference: the manifest has no test samples");

  torch::NoGradGuard no_grad;
  for (auto* model : plan.members) model->train(false);
  auto load = [&](const ManifestEntry& e) { return prepare_sample(load_sample(data, e), options.filter); };
  const auto batch_size = static_cast<size_t>(options.batch_size);

  {
    std::vector<Sample> warm;
    const size_t n = std::min(entries.size(), batch_size * static_cast<size_t>(std::max<int64_t>(0, options.warmup_batches)));
    for (size_t i = 0; i < n; ++i) warm.push_back(load(entries[i]));
    BatchIterator it(warm, options.batch_size);
    while (auto batch = it.next()) infer_batch(plan, *batch);
  }

  std::vector<Sample> preloaded;
  if (!options.include_loading) {
    for (const auto& e : entries) preloaded.push_back(load(e));
  }

  const auto start = std::chrono::steady_clock::now();
  for (size_t first = 0; first < entries.size(); first += batch_size) {
    const size_t last = std::min(entries.size(), first + batch_size);
    std::vector<Sample> chunk;
    if (options.include_loading) {
      for (size_t i = first; i < last; ++i) chunk.push_back(load(entries[i]));
    } else {
      chunk.assign(preloaded.begin() + static_cast<std::ptrdiff_t>(first),
                   preloaded.begin() + static_cast<std::ptrdiff_t>(last));
    }
    infer_batch(plan, collate(chunk));
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return make_timing_report(model_id, seconds, budget, static_cast<int64_t>(entries.size()));
}

std::string compare(std::vector<TimingReport> reports) {
  std::stable_sort(reports.begin(), reports.end(),
                   [](const TimingReport& a, const TimingReport& b) { return a.ratio < b.ratio; });
  size_t width = 5;
  for (const auto& r : reports) width = std::max(width, r.model_id.size());
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s  %20s  %13s\n", static_cast<int>(width), "Model", "Inference time (sec.)",
                "Relative time");
  out << line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof(line), "%-*s  %20.3f  %13.2f\n", static_cast<int>(width), r.model_id.c_str(),
                  r.seconds, r.ratio);
    out << line;
  }
  return out.str();
}

}  // namespace lfdlm
