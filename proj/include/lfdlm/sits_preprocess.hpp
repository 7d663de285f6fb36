#pragma once

#include "lfdlm/core_types.hpp"

namespace lfdlm {

/// Frame rejection rule for cloud/snow contamination. Cloud and snow are not distinguished.
struct FilterPolicy {
  double prob_threshold = 0.5;
  double max_cloudy_fraction = 0.05;

  void validate() const;
};

/// Keeps frames whose fraction of pixels with mask > prob_threshold is at most
/// max_cloudy_fraction. Throws DataError("no cloudless acquisitions ...") when nothing survives.
SitsStack filter_cloudy(const SitsStack& stack, const FilterPolicy& policy);

/// One frame per calendar month that has data: the per-pixel mean of that month's frames,
/// dated on the 15th. Masks are averaged the same way.
SitsStack monthly_average(const SitsStack& stack);

/// filter_cloudy followed by monthly_average; the result has between 1 and 12 frames.
SitsStack preprocess(const SitsStack& stack, const FilterPolicy& policy);

}  // namespace lfdlm
