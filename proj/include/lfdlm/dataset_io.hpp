#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lfdlm/core_types.hpp"

namespace lfdlm {

namespace fs = std::filesystem;

struct Sample {
  AerialPatch aerial;
  SitsStack sits;
  std::optional<LabelMask> mask;  // absent at pure-inference time
  std::string domain_id;

  const std::string& patch_id() const { return aerial.patch_id(); }
};

enum class Split { train, val, test };

std::string_view to_string(Split split);
Split split_from_string(std::string_view text);

struct ManifestEntry {
  fs::path sample_dir;  // relative to the manifest's directory unless absolute
  std::string domain_id;
  Split split = Split::train;
};

/// JSON-lines list of samples: one {"sample_dir", "domain_id", "split"} object per line.
class DatasetManifest {
 public:
  DatasetManifest() = default;
  DatasetManifest(fs::path root, std::vector<ManifestEntry> entries);

  static DatasetManifest load(const fs::path& manifest_path);
  void save(const fs::path& manifest_path) const;

  const fs::path& root() const { return root_; }
  const std::vector<ManifestEntry>& entries() const { return entries_; }
  std::vector<ManifestEntry> split(Split which) const;
  fs::path resolve(const ManifestEntry& entry) const;
  /// Throws DataError naming a domain that appears in more than one split.
  void check_domain_disjoint() const;

 private:
  fs::path root_;
  std::vector<ManifestEntry> entries_;
};

/// Per-channel standardization statistics computed over the training split.
struct ChannelStats {
  std::vector<double> aerial_mean, aerial_std;  // 5 each
  std::vector<double> sits_mean, sits_std;      // 10 each

  nlohmann::json to_json() const;
  static ChannelStats from_json(const nlohmann::json& j);
  static ChannelStats identity();
};

/// File names inside one sample directory.
namespace sample_files {
inline constexpr const char* kAerial = "aerial.tif";    // multi-page float32 raster
inline constexpr const char* kSits = "sits.h5";         // arrays "frames" and "masks"
inline constexpr const char* kDates = "dates.txt";      // one YYYY-MM-DD per line
inline constexpr const char* kMask = "mask.png";        // single-band uint8 labels
inline constexpr const char* kMeta = "meta.json";       // patch_id, domain_id
inline constexpr const char* kManifest = "manifest.jsonl";
inline constexpr const char* kStats = "stats.json";
}  // namespace sample_files

/// Reads one sample directory. Errors carry the offending path.
Sample load_sample(const fs::path& sample_dir, const std::string& domain_id);
Sample load_sample(const DatasetManifest& manifest, const ManifestEntry& entry);
void save_sample(const Sample& sample, const fs::path& sample_dir);

/// Seasonal curve of one class in one band: baseline + amplitude * cos(2 pi (doy - phase) / 365.25).
struct PhenologyCurve {
  double amplitude = 0.0;
  double phase = 0.0;  // day of year of the peak
  double baseline = 0.0;

  double at(int day_of_year) const;
  bool operator==(const PhenologyCurve&) const = default;
};

/// Parameters of the synthetic FLAIR-like generator.
struct SyntheticSpec {
  int64_t n_samples = 24;
  int64_t n_domains = 6;
  ScaleProfile scale = ScaleProfile::toy();
  uint64_t seed = 0;
  std::array<std::array<double, kAerialChannels>, kNumClasses> class_palette{};
  std::array<std::array<PhenologyCurve, kSitsBands>, kNumClasses> class_phenology{};
  double cloud_rate = 0.2;
  /// Relative frequency of each class when seeding regions.
  std::array<double, kNumClasses> class_frequencies{};
  /// Side of one region-growth cell, in aerial pixels.
  int64_t region_cell = 16;
  double aerial_noise = 0.05;
  double sits_noise = 0.01;
  int64_t min_dates = 20;
  int64_t max_dates = 40;
  int year = 2021;

  /// Default tables: coniferous/deciduous share a palette but not a phenology;
  /// pervious/impervious surfaces share a phenology but not a palette.
  static SyntheticSpec defaults(ScaleProfile scale, uint64_t seed);
  /// Throws ConfigError when an invariant is broken.
  void validate() const;

  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j, ScaleProfile scale);
};

/// Builds sample `index` of the dataset described by `spec` in memory.
Sample synthesize_sample(const SyntheticSpec& spec, int64_t index);

/// Domain id and split assigned to sample `index` (domains are split 32:8:10).
std::pair<std::string, Split> synthetic_assignment(const SyntheticSpec& spec, int64_t index);

/// Writes the whole synthetic dataset plus manifest.jsonl and stats.json under `out_dir`.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir);

/// Channel statistics of the training split of a manifest.
ChannelStats compute_channel_stats(const DatasetManifest& manifest);
ChannelStats compute_channel_stats(std::span<const Sample> samples);

// ---------------------------------------------------------------------------
// Augmentation

enum class Flip { none, horizontal, vertical };

struct AugmentTransform {
  Flip flip = Flip::none;
  int quarter_turns = 0;  // counter-clockwise, 0..3

  /// Flip first, then rotate, over the last two axes.
  torch::Tensor apply(const torch::Tensor& t) const;
};

AugmentTransform sample_transform(std::mt19937_64& rng);
Sample apply_transform(const Sample& sample, const AugmentTransform& transform);
/// Draws one flip and one rotation uniformly and applies them to every raster of the sample.
Sample augment(const Sample& sample, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  torch::Tensor aerial;       // [B, 5, H, W]
  torch::Tensor frames;       // [B, T_max, 10, h, w], zero padded
  torch::Tensor cloud_masks;  // [B, T_max, h, w], zero padded
  torch::Tensor day_of_year;  // [B, T_max] int64, 1 at padded positions
  torch::Tensor validity;     // [B, T_max] bool
  std::optional<torch::Tensor> labels;  // [B, H, W] int64
  std::vector<std::string> patch_ids;

  int64_t size() const { return aerial.size(0); }
};

/// Stacks samples into one batch, padding SITS along T to the longest stack.
Batch collate(std::span<const Sample> samples);

/// Yields consecutive batches of at most `batch_size` samples.
class BatchIterator {
 public:
  /// Throws DataError when the samples do not share one geometry.
  BatchIterator(std::span<const Sample> samples, int64_t batch_size);

  std::optional<Batch> next();
  int64_t batch_count() const;

 private:
  std::span<const Sample> samples_;
  int64_t batch_size_;
  size_t cursor_ = 0;
};

}  // namespace lfdlm
