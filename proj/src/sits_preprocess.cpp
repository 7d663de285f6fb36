#include "lfdlm/sits_preprocess.hpp"

#include <map>

namespace lfdlm {

void FilterPolicy::validate() const {
  if (prob_threshold < 0.0 || prob_threshold > 1.0) {
    throw ConfigError("filter prob_threshold must be in [0, 1]");
  }
  if (max_cloudy_fraction < 0.0 || max_cloudy_fraction > 1.0) {
    throw ConfigError("filter max_cloudy_fraction must be in [0, 1]");
  }
}

SitsStack filter_cloudy(const SitsStack& stack, const FilterPolicy& policy) {
  policy.validate();
  const auto& masks = stack.cloud_snow_masks();
  const int64_t pixels = masks.size(1) * masks.size(2);
  // Integer counts keep the comparison exact.
  const auto cloudy = (masks > policy.prob_threshold).flatten(1).sum(1).to(torch::kInt64);
  const auto counts = cloudy.accessor<int64_t, 1>();

  std::vector<int64_t> keep;
  for (int64_t t = 0; t < stack.length(); ++t) {
    if (static_cast<double>(counts[t]) <= policy.max_cloudy_fraction * static_cast<double>(pixels)) {
      keep.push_back(t);
    }
  }
  if (keep.empty()) {
    throw DataError("no cloudless acquisitions for patch '" + stack.patch_id() + "'");
  }
  if (static_cast<int64_t>(keep.size()) == stack.length()) return stack;

  const auto index = torch::tensor(keep, torch::kInt64);
  std::vector<Date> dates;
  for (int64_t t : keep) dates.push_back(stack.dates()[static_cast<size_t>(t)]);
  return SitsStack(stack.frames().index_select(0, index), std::move(dates),
                   masks.index_select(0, index), stack.patch_id());
}

SitsStack monthly_average(const SitsStack& stack) {
  if (stack.length() == 0) throw DataError("monthly_average of an empty stack");
  std::map<int, std::vector<int64_t>> by_month;
  for (int64_t t = 0; t < stack.length(); ++t) {
    by_month[stack.dates()[static_cast<size_t>(t)].month].push_back(t);
  }
  const int year = stack.dates().front().year;
  std::vector<torch::Tensor> frames, masks;
  std::vector<Date> dates;
  for (const auto& [month, ts] : by_month) {
    const auto index = torch::tensor(ts, torch::kInt64);
    frames.push_back(stack.frames().index_select(0, index).mean(0));
    masks.push_back(stack.cloud_snow_masks().index_select(0, index).mean(0));
    dates.push_back(Date{year, month, 15});
  }
  return SitsStack(torch::stack(frames), std::move(dates), torch::stack(masks), stack.patch_id());
}

SitsStack preprocess(const SitsStack& stack, const FilterPolicy& policy) {
  return monthly_average(filter_cloudy(stack, policy));
}

}  // namespace lfdlm
