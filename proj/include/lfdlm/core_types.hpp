#pragma once

#include <array>
#include <chrono>
#include <compare>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace lfdlm {

inline constexpr int64_t kNumClasses = 13;
inline constexpr int64_t kAerialChannels = 5;
inline constexpr int64_t kSitsBands = 10;

/// Thrown when input data violates a domain invariant.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when a configuration value or combination is invalid.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fixed 13-class land-cover nomenclature; the last entry is the unscored 'other'.
class Nomenclature {
 public:
  static const Nomenclature& flair();

  const std::array<std::string_view, kNumClasses>& classes() const { return classes_; }
  std::string_view name(int64_t index) const { return classes_.at(static_cast<size_t>(index)); }
  int64_t other_index() const { return other_index_; }
  /// Class indices that enter IoU/mIoU, in table order.
  std::vector<int64_t> scored() const;
  int64_t index_of(std::string_view name) const;

 private:
  Nomenclature();
  std::array<std::string_view, kNumClasses> classes_;
  int64_t other_index_;
};

/// Calendar date of one acquisition.
struct Date {
  int year = 1970;
  int month = 1;
  int day = 1;

  static Date parse(std::string_view iso);  // YYYY-MM-DD
  std::string iso() const;
  /// 1-based day of the year.
  int day_of_year() const;
  bool valid() const;

  auto operator<=>(const Date&) const = default;
};

std::ostream& operator<<(std::ostream& out, const Date& date);

enum class ScaleName { toy, full };

std::string_view to_string(ScaleName name);
ScaleName scale_name_from_string(std::string_view text);

/// Geometry shared by every sample of a dataset.
///
/// center_crop is the number of SITS pixels covering the aerial footprint and is
/// always sits_size / 4 (10 of 40 at full scale).
class ScaleProfile {
 public:
  static ScaleProfile full();
  static ScaleProfile toy(int64_t aerial_size = 64, int64_t sits_size = 8);
  /// Throws ConfigError when the pair breaks the crop ratio or size rules.
  static ScaleProfile make(ScaleName name, int64_t aerial_size, int64_t sits_size);

  ScaleName name() const { return name_; }
  int64_t aerial_size() const { return aerial_size_; }
  int64_t sits_size() const { return sits_size_; }
  int64_t center_crop() const { return center_crop_; }
  /// Aerial pixels per SITS pixel along one axis (51.2 at full scale).
  double sits_pixel_footprint() const {
    return static_cast<double>(aerial_size_) / static_cast<double>(center_crop_);
  }

  bool operator==(const ScaleProfile&) const = default;

 private:
  ScaleProfile(ScaleName name, int64_t aerial, int64_t sits, int64_t crop)
      : name_(name), aerial_size_(aerial), sits_size_(sits), center_crop_(crop) {}

  ScaleName name_;
  int64_t aerial_size_;
  int64_t sits_size_;
  int64_t center_crop_;
};

/// Five-channel (R, G, B, NIR, elevation) aerial raster [5, H, W].
class AerialPatch {
 public:
  AerialPatch(torch::Tensor pixels, std::string patch_id);

  const torch::Tensor& pixels() const { return pixels_; }
  const std::string& patch_id() const { return patch_id_; }
  int64_t size() const { return pixels_.size(-1); }

 private:
  torch::Tensor pixels_;
  std::string patch_id_;
};

/// Sentinel-2 style time series: frames [T, 10, h, w], masks [T, h, w] in [0, 1].
class SitsStack {
 public:
  SitsStack(torch::Tensor frames, std::vector<Date> dates, torch::Tensor cloud_snow_masks,
            std::string patch_id);

  const torch::Tensor& frames() const { return frames_; }
  const std::vector<Date>& dates() const { return dates_; }
  const torch::Tensor& cloud_snow_masks() const { return masks_; }
  const std::string& patch_id() const { return patch_id_; }
  int64_t length() const { return frames_.size(0); }
  int64_t size() const { return frames_.size(-1); }
  /// Day-of-year of every frame as an int64 tensor [T].
  torch::Tensor day_of_year() const;

 private:
  torch::Tensor frames_;
  std::vector<Date> dates_;
  torch::Tensor masks_;
  std::string patch_id_;
};

/// Per-pixel class ids [H, W] (int64, values 0..12).
class LabelMask {
 public:
  explicit LabelMask(torch::Tensor labels);

  const torch::Tensor& labels() const { return labels_; }
  int64_t size() const { return labels_.size(-1); }

 private:
  torch::Tensor labels_;
};

/// Per-pixel class distribution [13, H, W].
class ClassProbabilityMap {
 public:
  /// Throws DataError unless validate(probs) holds.
  explicit ClassProbabilityMap(torch::Tensor probs);

  const torch::Tensor& probs() const { return probs_; }

 private:
  torch::Tensor probs_;
};

inline constexpr double kProbabilitySumTolerance = 1e-5;

/// True iff every entry is nonnegative and every pixel's class sum is within 1e-5 of 1.
/// Accepts [13, H, W] or batched [B, 13, H, W] tensors.
bool validate(const torch::Tensor& probs);
bool validate(const ClassProbabilityMap& map);

/// Index of the largest class probability per pixel; ties go to the lowest index.
/// Works on [C, H, W] (returns [H, W]) and [B, C, H, W] (returns [B, H, W]).
torch::Tensor argmax_labels(const torch::Tensor& scores);
LabelMask argmax_labels(const ClassProbabilityMap& map);

}  // namespace lfdlm
