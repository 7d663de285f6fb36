#include "lfdlm/core_types.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>

namespace lfdlm {

Nomenclature::Nomenclature()
    : classes_{"building",   "pervious surface", "impervious surface",    "bare soil",
               "water",      "coniferous",       "deciduous",             "brushwood",
               "vineyard",   "herbaceous vegetation", "agricultural land", "plowed land",
               "other"},
      other_index_(12) {}

const Nomenclature& Nomenclature::flair() {
  static const Nomenclature instance;
  return instance;
}

std::vector<int64_t> Nomenclature::scored() const {
  std::vector<int64_t> out;
  for (int64_t c = 0; c < kNumClasses; ++c) {
    if (c != other_index_) out.push_back(c);
  }
  return out;
}

int64_t Nomenclature::index_of(std::string_view name) const {
  auto it = std::find(classes_.begin(), classes_.end(), name);
  if (it == classes_.end()) throw DataError("unknown class name '" + std::string(name) + "'");
  return it - classes_.begin();
}

// ---------------------------------------------------------------------------

Date Date::parse(std::string_view iso) {
  Date d;
  auto field = [&](size_t pos, size_t len, int& out) {
    if (iso.size() < pos + len) return false;
    auto res = std::from_chars(iso.data() + pos, iso.data() + pos + len, out);
    return res.ec == std::errc() && res.ptr == iso.data() + pos + len;
  };
  if (iso.size() != 10 || iso[4] != '-' || iso[7] != '-' || !field(0, 4, d.year) ||
      !field(5, 2, d.month) || !field(8, 2, d.day) || !d.valid()) {
    throw DataError("malformed date '" + std::string(iso) + "' (expected YYYY-MM-DD)");
  }
  return d;
}

std::string Date::iso() const {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", year, month, day);
  return buf;
}

std::ostream& operator<<(std::ostream& out, const Date& date) { return out << date.iso(); }

bool Date::valid() const {
  using namespace std::chrono;
  return year_month_day{std::chrono::year{year}, std::chrono::month{static_cast<unsigned>(month)},
                        std::chrono::day{static_cast<unsigned>(day)}}
      .ok();
}

int Date::day_of_year() const {
  using namespace std::chrono;
  const sys_days self{std::chrono::year{year} / std::chrono::month{static_cast<unsigned>(month)} /
                      std::chrono::day{static_cast<unsigned>(day)}};
  const sys_days jan1{std::chrono::year{year} / January / 1};
  return static_cast<int>((self - jan1).count()) + 1;
}

// ---------------------------------------------------------------------------

std::string_view to_string(ScaleName name) { return name == ScaleName::full ? "full" : "toy"; }

ScaleName scale_name_from_string(std::string_view text) {
  if (text == "full") return ScaleName::full;
  if (text == "toy") return ScaleName::toy;
  throw ConfigError("scale.name must be 'toy' or 'full', got '" + std::string(text) + "'");
}

ScaleProfile ScaleProfile::full() { return make(ScaleName::full, 512, 40); }

ScaleProfile ScaleProfile::toy(int64_t aerial_size, int64_t sits_size) {
  return make(ScaleName::toy, aerial_size, sits_size);
}

ScaleProfile ScaleProfile::make(ScaleName name, int64_t aerial_size, int64_t sits_size) {
  if (name == ScaleName::full && (aerial_size != 512 || sits_size != 40)) {
    throw ConfigError("full profile is fixed at aerial_size=512, sits_size=40");
  }
  if (name == ScaleName::toy && aerial_size != 32 && aerial_size != 64 && aerial_size != 128) {
    throw ConfigError("toy profile aerial_size must be one of 32, 64, 128; got " +
                      std::to_string(aerial_size));
  }
  if (sits_size <= 0 || sits_size % 4 != 0) {
    throw ConfigError("sits_size must be a positive multiple of 4 so the center crop keeps the "
                      "10/40 ratio; got " + std::to_string(sits_size));
  }
  const int64_t crop = sits_size / 4;
  if (aerial_size < crop) {
    throw ConfigError("aerial_size must not be smaller than the SITS center crop");
  }
  return ScaleProfile(name, aerial_size, sits_size, crop);
}

// ---------------------------------------------------------------------------

AerialPatch::AerialPatch(torch::Tensor pixels, std::string patch_id)
    : pixels_(std::move(pixels)), patch_id_(std::move(patch_id)) {
  if (pixels_.dim() != 3 || pixels_.size(0) != kAerialChannels) {
    throw DataError("aerial patch '" + patch_id_ + "' must have shape [5, H, W]");
  }
  if (pixels_.size(1) != pixels_.size(2)) {
    throw DataError("aerial patch '" + patch_id_ + "' must be square");
  }
}

SitsStack::SitsStack(torch::Tensor frames, std::vector<Date> dates, torch::Tensor masks,
                     std::string patch_id)
    : frames_(std::move(frames)),
      dates_(std::move(dates)),
      masks_(std::move(masks)),
      patch_id_(std::move(patch_id)) {
  const auto where = " (patch '" + patch_id_ + "')";
  if (frames_.dim() != 4 || frames_.size(1) != kSitsBands || frames_.size(2) != frames_.size(3)) {
    throw DataError("SITS frames must have shape [T, 10, h, h]" + where);
  }
  const int64_t t = frames_.size(0);
  if (t < 1) throw DataError("SITS stack is empty" + where);
  if (static_cast<int64_t>(dates_.size()) != t) {
    throw DataError("SITS date count does not match frame count" + where);
  }
  if (masks_.dim() != 3 || masks_.size(0) != t || masks_.size(1) != frames_.size(2) ||
      masks_.size(2) != frames_.size(3)) {
    throw DataError("SITS cloud/snow masks must have shape [T, h, w]" + where);
  }
  for (size_t i = 1; i < dates_.size(); ++i) {
    if (!(dates_[i - 1] < dates_[i])) throw DataError("dates not increasing" + where);
    if (dates_[i].year != dates_[0].year) {
      throw DataError("SITS dates span more than one calendar year" + where);
    }
  }
  if (masks_.numel() > 0) {
    const auto lo = masks_.min().item<double>();
    const auto hi = masks_.max().item<double>();
    if (lo < 0.0 || hi > 1.0) throw DataError("cloud/snow mask values outside [0, 1]" + where);
  }
}

torch::Tensor SitsStack::day_of_year() const {
  auto out = torch::empty({length()}, torch::kInt64);
  auto acc = out.accessor<int64_t, 1>();
  for (int64_t i = 0; i < length(); ++i) acc[i] = dates_[static_cast<size_t>(i)].day_of_year();
  return out;
}

LabelMask::LabelMask(torch::Tensor labels) : labels_(std::move(labels)) {
  if (labels_.dim() != 2 || labels_.size(0) != labels_.size(1)) {
    throw DataError("label mask must be a square [H, W] tensor");
  }
  if (labels_.scalar_type() != torch::kInt64) labels_ = labels_.to(torch::kInt64);
  if (labels_.numel() > 0) {
    const auto lo = labels_.min().item<int64_t>();
    const auto hi = labels_.max().item<int64_t>();
    if (lo < 0 || hi >= kNumClasses) throw DataError("invalid class id in label mask");
  }
}

ClassProbabilityMap::ClassProbabilityMap(torch::Tensor probs) : probs_(std::move(probs)) {
  if (probs_.dim() != 3 || probs_.size(0) != kNumClasses) {
    throw DataError("class probability map must have shape [13, H, W]");
  }
  if (!validate(probs_)) {
    throw DataError("class probability map is negative or not normalized per pixel");
  }
}

bool validate(const torch::Tensor& probs) {
  if (probs.dim() != 3 && probs.dim() != 4) return false;
  if (probs.numel() == 0) return true;
  const int64_t class_dim = probs.dim() - 3;
  const auto p = probs.to(torch::kFloat64);
  if (!torch::isfinite(p).all().item<bool>()) return false;
  if (p.min().item<double>() < 0.0) return false;
  const auto deviation = (p.sum(class_dim) - 1.0).abs().max().item<double>();
  return deviation <= kProbabilitySumTolerance;
}

bool validate(const ClassProbabilityMap& map) { return validate(map.probs()); }

torch::Tensor argmax_labels(const torch::Tensor& scores) {
  TORCH_CHECK(scores.dim() == 3 || scores.dim() == 4, "argmax_labels expects [C,H,W] or [B,C,H,W]");
  const int64_t class_dim = scores.dim() - 3;
  const int64_t n_classes = scores.size(class_dim);
  const auto best = std::get<0>(scores.max(class_dim, /*keepdim=*/true));
  std::vector<int64_t> shape(static_cast<size_t>(scores.dim()), 1);
  shape[static_cast<size_t>(class_dim)] = n_classes;
  const auto index = torch::arange(n_classes, torch::kInt64).view(shape).expand_as(scores);
  const auto sentinel = torch::full_like(index, n_classes);
  return torch::where(scores == best, index, sentinel).amin(class_dim);
}

LabelMask argmax_labels(const ClassProbabilityMap& map) { return LabelMask(argmax_labels(map.probs())); }

}  // namespace lfdlm
