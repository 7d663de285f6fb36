#include "lfdlm/dataset_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>

#include "lfdlm/io.hpp"

namespace lfdlm {

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw DataError("unknown split '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Manifest

DatasetManifest::DatasetManifest(fs::path root, std::vector<ManifestEntry> entries)
    : root_(std::move(root)), entries_(std::move(entries)) {}

DatasetManifest DatasetManifest::load(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("missing file " + manifest_path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      entries.push_back({fs::path(j.at("sample_dir").get<std::string>()),
                         j.at("domain_id").get<std::string>(),
                         split_from_string(j.at("split").get<std::string>())});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(manifest_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return DatasetManifest(manifest_path.parent_path(), std::move(entries));
}

void DatasetManifest::save(const fs::path& manifest_path) const {
  std::ostringstream out;
  for (const auto& e : entries_) {
    nlohmann::json j{{"sample_dir", e.sample_dir.generic_string()},
                     {"domain_id", e.domain_id},
                     {"split", std::string(to_string(e.split))}};
    out << j.dump() << '\n';
  }
  io::write_text(manifest_path, out.str());
}

std::vector<ManifestEntry> DatasetManifest::split(Split which) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries_.begin(), entries_.end(), std::back_inserter(out),
               [which](const ManifestEntry& e) { return e.split == which; });
  return out;
}

fs::path DatasetManifest::resolve(const ManifestEntry& entry) const {
  return entry.sample_dir.is_absolute() ? entry.sample_dir : root_ / entry.sample_dir;
}

void DatasetManifest::check_domain_disjoint() const {
  std::map<std::string, Split> owner;
  for (const auto& e : entries_) {
    auto [it, inserted] = owner.emplace(e.domain_id, e.split);
    if (!inserted && it->second != e.split) {
      throw DataError("domain '" + e.domain_id + "' appears in both " +
                      std::string(to_string(it->second)) + " and " + std::string(to_string(e.split)));
    }
  }
}

// ---------------------------------------------------------------------------
// Channel statistics

nlohmann::json ChannelStats::to_json() const {
  return {{"aerial_mean", aerial_mean}, {"aerial_std", aerial_std},
          {"sits_mean", sits_mean},     {"sits_std", sits_std}};
}

ChannelStats ChannelStats::from_json(const nlohmann::json& j) {
  ChannelStats s;
  j.at("aerial_mean").get_to(s.aerial_mean);
  j.at("aerial_std").get_to(s.aerial_std);
  j.at("sits_mean").get_to(s.sits_mean);
  j.at("sits_std").get_to(s.sits_std);
  if (s.aerial_mean.size() != kAerialChannels || s.aerial_std.size() != kAerialChannels ||
      s.sits_mean.size() != kSitsBands || s.sits_std.size() != kSitsBands) {
    throw DataError("channel statistics have the wrong number of channels");
  }
  return s;
}

ChannelStats ChannelStats::identity() {
  return {std::vector<double>(kAerialChannels, 0.0), std::vector<double>(kAerialChannels, 1.0),
          std::vector<double>(kSitsBands, 0.0), std::vector<double>(kSitsBands, 1.0)};
}

namespace {

class StatsAccumulator {
 public:
  void add(const Sample& sample) {
    const auto a = sample.aerial.pixels().to(torch::kFloat64).flatten(1);
    a_sum_ += a.sum(1);
    a_sq_ += a.square().sum(1);
    a_n_ += static_cast<double>(a.size(1));
    const auto s = sample.sits.frames().to(torch::kFloat64).transpose(0, 1).flatten(1);
    s_sum_ += s.sum(1);
    s_sq_ += s.square().sum(1);
    s_n_ += static_cast<double>(s.size(1));
  }

  ChannelStats finish() const {
    ChannelStats stats;
    finish(a_sum_, a_sq_, a_n_, stats.aerial_mean, stats.aerial_std);
    finish(s_sum_, s_sq_, s_n_, stats.sits_mean, stats.sits_std);
    return stats;
  }

 private:
  static void finish(const torch::Tensor& sum, const torch::Tensor& sq, double n, std::vector<double>& mean,
                     std::vector<double>& std) {
    const auto m = sum / n;
    const auto v = (sq / n - m.square()).clamp_min(0.0);
    const auto sd = v.sqrt().clamp_min(1e-6);
    mean.assign(m.data_ptr<double>(), m.data_ptr<double>() + m.numel());
    std.assign(sd.data_ptr<double>(), sd.data_ptr<double>() + sd.numel());
  }

  torch::Tensor a_sum_ = torch::zeros({kAerialChannels}, torch::kFloat64);
  torch::Tensor a_sq_ = torch::zeros({kAerialChannels}, torch::kFloat64);
  torch::Tensor s_sum_ = torch::zeros({kSitsBands}, torch::kFloat64);
  torch::Tensor s_sq_ = torch::zeros({kSitsBands}, torch::kFloat64);
  double a_n_ = 0, s_n_ = 0;
};

}  // namespace

ChannelStats compute_channel_stats(const DatasetManifest& manifest) {
  auto entries = manifest.split(Split::train);
  if (entries.empty()) entries = manifest.entries();
  if (entries.empty()) throw DataError("cannot compute channel statistics of an empty manifest");
  StatsAccumulator acc;
  for (const auto& e : entries) acc.add(load_sample(manifest, e));
  return acc.finish();
}

ChannelStats compute_channel_stats(std::span<const Sample> samples) {
  if (samples.empty()) throw DataError("cannot compute channel statistics of no samples");
  StatsAccumulator acc;
  for (const auto& s : samples) acc.add(s);
  return acc.finish();
}

// ---------------------------------------------------------------------------
// Sample files

Sample load_sample(const fs::path& dir, const std::string& domain_id) {
  const auto aerial_path = dir / sample_files::kAerial;
  const auto sits_path = dir / sample_files::kSits;
  const auto dates_path = dir / sample_files::kDates;
  const auto mask_path = dir / sample_files::kMask;
  const auto meta_path = dir / sample_files::kMeta;
  for (const auto& p : {aerial_path, sits_path, dates_path, meta_path}) {
    if (!fs::exists(p)) throw DataError("missing file " + p.string());
  }

  std::string patch_id;
  try {
    patch_id = nlohmann::json::parse(io::read_text(meta_path)).at("patch_id").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(meta_path.string() + ": " + e.what());
  }

  auto with_path = [](const fs::path& p, auto&& fn) {
    try {
      return fn();
    } catch (const DataError& e) {
      const std::string msg = e.what();
      if (msg.find(p.string()) != std::string::npos) throw;
      throw DataError(msg + " [" + p.string() + "]");
    }
  };

  auto aerial = with_path(aerial_path, [&] { return AerialPatch(io::read_raster(aerial_path), patch_id); });

  std::vector<Date> dates;
  with_path(dates_path, [&] {
    std::istringstream in(io::read_text(dates_path));
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) dates.push_back(Date::parse(line));
    }
    return 0;
  });

  auto sits = with_path(sits_path, [&] {
    io::ArrayContainer container(sits_path, io::ArrayContainer::Mode::read);
    return SitsStack(container.read("frames").to(torch::kFloat32), dates,
                     container.read("masks").to(torch::kFloat32), patch_id);
  });

  std::optional<LabelMask> mask;
  if (fs::exists(mask_path)) {
    mask = with_path(mask_path, [&] { return LabelMask(io::read_label_raster(mask_path)); });
    if (mask->size() != aerial.size()) {
      throw DataError("mask and aerial sizes differ [" + mask_path.string() + "]");
    }
  }
  if (sits.dates().front().year != sits.dates().back().year) {
    throw DataError("SITS dates span more than one year [" + dates_path.string() + "]");
  }
  return Sample{std::move(aerial), std::move(sits), std::move(mask), domain_id};
}

Sample load_sample(const DatasetManifest& manifest, const ManifestEntry& entry) {
  return load_sample(manifest.resolve(entry), entry.domain_id);
}

void save_sample(const Sample& sample, const fs::path& dir) {
  fs::create_directories(dir);
  io::write_raster(dir / sample_files::kAerial, sample.aerial.pixels());
  {
    io::ArrayContainer container(dir / sample_files::kSits, io::ArrayContainer::Mode::truncate);
    container.write("frames", sample.sits.frames().to(torch::kFloat32));
    container.write("masks", sample.sits.cloud_snow_masks().to(torch::kFloat32));
  }
  std::string dates;
  for (const auto& d : sample.sits.dates()) dates += d.iso() + "\n";
  io::write_text(dir / sample_files::kDates, dates);
  if (sample.mask) {
    io::write_label_raster(dir / sample_files::kMask, sample.mask->labels());
  } else if (fs::exists(dir / sample_files::kMask)) {
    fs::remove(dir / sample_files::kMask);
  }
  io::write_text(dir / sample_files::kMeta,
                 nlohmann::json{{"patch_id", sample.patch_id()}, {"domain_id", sample.domain_id}}.dump(2));
}

// ---------------------------------------------------------------------------
// Synthetic generator

double PhenologyCurve::at(int day_of_year) const {
  return baseline + amplitude * std::cos(2.0 * std::numbers::pi * (day_of_year - phase) / 365.25);
}

SyntheticSpec SyntheticSpec::defaults(ScaleProfile scale, uint64_t seed) {
  SyntheticSpec spec;
  spec.scale = scale;
  spec.seed = seed;
  spec.region_cell = std::max<int64_t>(4, scale.aerial_size() / 4);
  if (scale.name() == ScaleName::full) {
    spec.min_dates = 20;
    spec.max_dates = 110;
  }
  //                 R     G     B     NIR   elevation
  spec.class_palette = {{{0.55, 0.50, 0.48, 0.35, 0.90},    // building
                         {0.45, 0.42, 0.30, 0.40, 0.10},    // pervious surface
                         {0.40, 0.40, 0.42, 0.25, 0.05},    // impervious surface
                         {0.60, 0.48, 0.35, 0.45, 0.08},    // bare soil
                         {0.10, 0.18, 0.25, 0.05, 0.00},    // water
                         {0.12, 0.25, 0.12, 0.55, 0.70},    // coniferous
                         {0.12, 0.25, 0.12, 0.55, 0.70},    // deciduous (same palette)
                         {0.25, 0.38, 0.20, 0.60, 0.30},    // brushwood
                         {0.35, 0.40, 0.22, 0.50, 0.15},    // vineyard
                         {0.30, 0.50, 0.25, 0.70, 0.05},    // herbaceous vegetation
                         {0.50, 0.55, 0.30, 0.65, 0.03},    // agricultural land
                         {0.45, 0.35, 0.25, 0.30, 0.02},    // plowed land
                         {0.70, 0.20, 0.60, 0.20, 0.40}}};  // other
  // amplitude, peak day, baseline per class
  const std::array<std::array<double, 3>, kNumClasses> seasonal = {{{0.01, 180, 0.25},
                                                                    {0.05, 150, 0.22},
                                                                    {0.05, 150, 0.22},  // = pervious
                                                                    {0.02, 200, 0.30},
                                                                    {0.01, 200, 0.05},
                                                                    {0.03, 190, 0.18},
                                                                    {0.20, 190, 0.18},
                                                                    {0.10, 170, 0.20},
                                                                    {0.15, 220, 0.22},
                                                                    {0.12, 140, 0.24},
                                                                    {0.25, 120, 0.26},
                                                                    {0.08, 250, 0.28},
                                                                    {0.05, 100, 0.32}}};
  // Visible and SWIR bands darken as vegetation greens up; red-edge and NIR brighten.
  const std::array<double, kSitsBands> band_gain = {-0.3, -0.2, -0.4, 0.2, 0.8, 0.9, 1.0, 1.0, -0.3, -0.4};
  const std::array<double, kSitsBands> band_level = {0.6, 0.7, 0.7, 0.9, 1.1, 1.2, 1.3, 1.3, 1.0, 0.8};
  for (size_t c = 0; c < kNumClasses; ++c) {
    for (size_t b = 0; b < kSitsBands; ++b) {
      spec.class_phenology[c][b] = {seasonal[c][0] * band_gain[b], seasonal[c][1],
                                    seasonal[c][2] * band_level[b]};
    }
  }
  spec.class_frequencies.fill(1.0);
  return spec;
}

void SyntheticSpec::validate() const {
  if (n_samples < 1) throw ConfigError("synthetic n_samples must be >= 1");
  if (n_domains < 3) throw ConfigError("synthetic n_domains must be >= 3 (train/val/test need one each)");
  if (cloud_rate < 0.0 || cloud_rate > 1.0) throw ConfigError("synthetic cloud_rate must be in [0, 1]");
  if (region_cell < 1) throw ConfigError("synthetic region_cell must be >= 1");
  if (scale.aerial_size() < 2 * region_cell) {
    throw ConfigError("synthetic region_cell must be at most half the aerial size so every patch holds two regions");
  }
  if (aerial_noise < 0.0 || sits_noise < 0.0) throw ConfigError("synthetic noise levels must be >= 0");
  if (min_dates < 1 || max_dates < min_dates || max_dates > 365) {
    throw ConfigError("synthetic date counts must satisfy 1 <= min_dates <= max_dates <= 365");
  }
  int positive = 0;
  for (double f : class_frequencies) {
    if (f < 0.0) throw ConfigError("synthetic class_frequencies must be >= 0");
    positive += f > 0.0;
  }
  if (positive < 2) throw ConfigError("synthetic class_frequencies need at least two active classes");
  bool palette_pair = false, phenology_pair = false;
  for (size_t a = 0; a < kNumClasses; ++a) {
    for (size_t b = a + 1; b < kNumClasses; ++b) {
      const bool same_palette = class_palette[a] == class_palette[b];
      const bool same_phenology = class_phenology[a] == class_phenology[b];
      palette_pair |= same_palette && !same_phenology;
      phenology_pair |= same_phenology && !same_palette;
    }
  }
  if (!palette_pair) {
    throw ConfigError("synthetic tables need a class pair sharing its palette but not its phenology");
  }
  if (!phenology_pair) {
    throw ConfigError("synthetic tables need a class pair sharing its phenology but not its palette");
  }
}

nlohmann::json SyntheticSpec::to_json() const {
  nlohmann::json phen = nlohmann::json::array();
  for (const auto& row : class_phenology) {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& c : row) r.push_back({c.amplitude, c.phase, c.baseline});
    phen.push_back(r);
  }
  return {{"n_samples", n_samples},       {"n_domains", n_domains},
          {"seed", seed},                 {"class_palette", class_palette},
          {"class_phenology", phen},      {"cloud_rate", cloud_rate},
          {"class_frequencies", class_frequencies}, {"region_cell", region_cell},
          {"aerial_noise", aerial_noise}, {"sits_noise", sits_noise},
          {"min_dates", min_dates},       {"max_dates", max_dates},
          {"year", year}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j, ScaleProfile scale) {
  SyntheticSpec s = defaults(scale, j.value("seed", uint64_t{0}));
  try {
    s.n_samples = j.value("n_samples", s.n_samples);
    s.n_domains = j.value("n_domains", s.n_domains);
    s.cloud_rate = j.value("cloud_rate", s.cloud_rate);
    s.region_cell = j.value("region_cell", s.region_cell);
    s.aerial_noise = j.value("aerial_noise", s.aerial_noise);
    s.sits_noise = j.value("sits_noise", s.sits_noise);
    s.min_dates = j.value("min_dates", s.min_dates);
    s.max_dates = j.value("max_dates", s.max_dates);
    s.year = j.value("year", s.year);
    if (j.contains("class_palette")) j.at("class_palette").get_to(s.class_palette);
    if (j.contains("class_frequencies")) j.at("class_frequencies").get_to(s.class_frequencies);
    if (j.contains("class_phenology")) {
      const auto& phen = j.at("class_phenology");
      if (phen.size() != kNumClasses) throw ConfigError("class_phenology must have 13 rows");
      for (size_t c = 0; c < kNumClasses; ++c) {
        if (phen[c].size() != kSitsBands) throw ConfigError("class_phenology rows must have 10 bands");
        for (size_t b = 0; b < kSitsBands; ++b) {
          const auto& t = phen[c][b];
          s.class_phenology[c][b] = {t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()};
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data.synthetic: ") + e.what());
  }
  return s;
}

std::pair<std::string, Split> synthetic_assignment(const SyntheticSpec& spec, int64_t index) {
  const int64_t n = spec.n_domains;
  const int64_t n_val = std::max<int64_t>(1, std::llround(static_cast<double>(n) * 8.0 / 50.0));
  const int64_t n_test = std::max<int64_t>(1, std::llround(static_cast<double>(n) * 10.0 / 50.0));
  const int64_t domain = index % n;
  const Split split = domain < n - n_val - n_test ? Split::train
                      : domain < n - n_test       ? Split::val
                                                  : Split::test;
  char id[16];
  std::snprintf(id, sizeof(id), "D%03lld", static_cast<long long>(domain));
  return {id, split};
}

namespace {

Date date_from_day_of_year(int year, int doy) {
  using namespace std::chrono;
  const year_month_day ymd{sys_days{std::chrono::year{year} / January / 1} + days{doy - 1}};
  return Date{static_cast<int>(ymd.year()), static_cast<int>(static_cast<unsigned>(ymd.month())),
              static_cast<int>(static_cast<unsigned>(ymd.day()))};
}

/// Class id per cell by randomized seeded-region growth over an n x n cell grid.
std::vector<int64_t> grow_regions(const SyntheticSpec& spec, int64_t n, int64_t center_lo,
                                  int64_t center_hi, std::mt19937_64& rng) {
  std::discrete_distribution<int64_t> pick_class(spec.class_frequencies.begin(),
                                                 spec.class_frequencies.end());
  std::uniform_int_distribution<int64_t> pick_cell(0, n * n - 1);
  std::uniform_int_distribution<int64_t> pick_center(center_lo, center_hi - 1);
  std::uniform_real_distribution<double> edge(0.5, 1.5);

  const int64_t n_seeds = std::max<int64_t>(4, n * n / 3);
  std::vector<std::pair<int64_t, int64_t>> seeds;  // (cell, class)
  // Two seeds inside the aerial footprint with distinct classes keep every patch multi-class.
  const int64_t first = pick_center(rng) * n + pick_center(rng);
  int64_t second = first;
  while (second == first) second = pick_center(rng) * n + pick_center(rng);
  const int64_t first_class = pick_class(rng);
  int64_t second_class = first_class;
  while (second_class == first_class) second_class = pick_class(rng);
  seeds.emplace_back(first, first_class);
  seeds.emplace_back(second, second_class);
  while (static_cast<int64_t>(seeds.size()) < n_seeds) seeds.emplace_back(pick_cell(rng), pick_class(rng));

  std::vector<int64_t> cls(static_cast<size_t>(n * n), -1);
  using Item = std::tuple<double, int64_t, int64_t>;  // cost, cell, class
  std::priority_queue<Item, std::vector<Item>, std::greater<>> frontier;
  for (const auto& [cell, c] : seeds) frontier.emplace(0.0, cell, c);
  while (!frontier.empty()) {
    const auto [cost, cell, c] = frontier.top();
    frontier.pop();
    if (cls[static_cast<size_t>(cell)] >= 0) continue;
    cls[static_cast<size_t>(cell)] = c;
    const int64_t y = cell / n, x = cell % n;
    const int64_t dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
      const int64_t ny = y + dy[k], nx = x + dx[k];
      if (ny < 0 || nx < 0 || ny >= n || nx >= n) continue;
      if (cls[static_cast<size_t>(ny * n + nx)] < 0) frontier.emplace(cost + edge(rng), ny * n + nx, c);
    }
  }
  return cls;
}

}  // namespace

Sample synthesize_sample(const SyntheticSpec& spec, int64_t index) {
  spec.validate();
  std::seed_seq seq{static_cast<uint64_t>(spec.seed), static_cast<uint64_t>(index), uint64_t{0x5eed}};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const auto& profile = spec.scale;
  const int64_t aerial = profile.aerial_size();
  const int64_t sits = profile.sits_size();
  const double footprint = profile.sits_pixel_footprint();
  const int64_t extent = std::llround(static_cast<double>(sits) * footprint);
  const int64_t offset = std::llround(static_cast<double>(sits - profile.center_crop()) / 2.0 * footprint);
  const int64_t cell = spec.region_cell;
  const int64_t n_cells = (extent + cell - 1) / cell;

  const int64_t center_lo = offset / cell;
  const int64_t center_hi = std::max(center_lo + 2, (offset + aerial) / cell);
  const auto cell_class = grow_regions(spec, n_cells, center_lo, std::min(center_hi, n_cells), rng);
  auto class_at = [&](int64_t y, int64_t x) {
    return cell_class[static_cast<size_t>((y / cell) * n_cells + x / cell)];
  };

  auto [domain_id, split] = synthetic_assignment(spec, index);
  char pid[32];
  std::snprintf(pid, sizeof(pid), "%s_%06lld", domain_id.c_str(), static_cast<long long>(index));
  const std::string patch_id = pid;

  // Aerial footprint: labels and palette + noise.
  auto labels = torch::empty({aerial, aerial}, torch::kInt64);
  auto pixels = torch::empty({kAerialChannels, aerial, aerial}, torch::kFloat32);
  {
    auto lab = labels.accessor<int64_t, 2>();
    auto pix = pixels.accessor<float, 3>();
    for (int64_t y = 0; y < aerial; ++y) {
      for (int64_t x = 0; x < aerial; ++x) {
        const int64_t c = class_at(offset + y, offset + x);
        lab[y][x] = c;
        for (int64_t k = 0; k < kAerialChannels; ++k) {
          pix[k][y][x] = static_cast<float>(spec.class_palette[static_cast<size_t>(c)][static_cast<size_t>(k)] +
                                            spec.aerial_noise * gauss(rng));
        }
      }
    }
  }

  // Class fractions of every SITS pixel over the extended footprint.
  std::vector<double> fractions(static_cast<size_t>(sits * sits * kNumClasses), 0.0);
  std::vector<double> counts(static_cast<size_t>(sits * sits), 0.0);
  for (int64_t y = 0; y < extent; ++y) {
    const int64_t sy = std::min<int64_t>(sits - 1, static_cast<int64_t>(static_cast<double>(y) / footprint));
    for (int64_t x = 0; x < extent; ++x) {
      const int64_t sx = std::min<int64_t>(sits - 1, static_cast<int64_t>(static_cast<double>(x) / footprint));
      const size_t p = static_cast<size_t>(sy * sits + sx);
      fractions[p * kNumClasses + static_cast<size_t>(class_at(y, x))] += 1.0;
      counts[p] += 1.0;
    }
  }
  for (size_t p = 0; p < counts.size(); ++p) {
    for (size_t c = 0; c < kNumClasses; ++c) fractions[p * kNumClasses + c] /= counts[p];
  }

  // Acquisition dates.
  std::uniform_int_distribution<int64_t> pick_t(spec.min_dates, spec.max_dates);
  const int64_t t_count = pick_t(rng);
  std::vector<int> days(365);
  std::iota(days.begin(), days.end(), 1);
  std::shuffle(days.begin(), days.end(), rng);
  days.resize(static_cast<size_t>(t_count));
  std::sort(days.begin(), days.end());
  std::vector<Date> dates;
  for (int d : days) dates.push_back(date_from_day_of_year(spec.year, d));

  auto frames = torch::empty({t_count, kSitsBands, sits, sits}, torch::kFloat32);
  auto masks = torch::zeros({t_count, sits, sits}, torch::kFloat32);
  std::bernoulli_distribution cloudy(spec.cloud_rate);
  std::uniform_int_distribution<int> n_blobs(1, 3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr double kCloudReflectance = 0.8;
  {
    auto fr = frames.accessor<float, 4>();
    auto ms = masks.accessor<float, 3>();
    for (int64_t t = 0; t < t_count; ++t) {
      const int doy = days[static_cast<size_t>(t)];
      if (cloudy(rng)) {
        const int blobs = n_blobs(rng);
        for (int b = 0; b < blobs; ++b) {
          const double cy = unit(rng) * static_cast<double>(sits);
          const double cx = unit(rng) * static_cast<double>(sits);
          const double r = (0.15 + 0.35 * unit(rng)) * static_cast<double>(sits);
          for (int64_t i = 0; i < sits; ++i) {
            for (int64_t j = 0; j < sits; ++j) {
              const double d2 = std::pow(static_cast<double>(i) + 0.5 - cy, 2) +
                                std::pow(static_cast<double>(j) + 0.5 - cx, 2);
              ms[t][i][j] = std::max(ms[t][i][j], static_cast<float>(std::exp(-d2 / (2.0 * r * r))));
            }
          }
        }
      }
      for (int64_t b = 0; b < kSitsBands; ++b) {
        for (int64_t i = 0; i < sits; ++i) {
          for (int64_t j = 0; j < sits; ++j) {
            const size_t p = static_cast<size_t>(i * sits + j);
            double v = 0.0;
            for (size_t c = 0; c < kNumClasses; ++c) {
              const double f = fractions[p * kNumClasses + c];
              if (f > 0.0) v += f * spec.class_phenology[c][static_cast<size_t>(b)].at(doy);
            }
            v += spec.sits_noise * gauss(rng);
            const double m = ms[t][i][j];
            fr[t][b][i][j] = static_cast<float>((1.0 - m) * v + m * kCloudReflectance);
          }
        }
      }
    }
  }

  return Sample{AerialPatch(std::move(pixels), patch_id),
                SitsStack(std::move(frames), std::move(dates), std::move(masks), patch_id),
                LabelMask(std::move(labels)), domain_id};
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  std::vector<ManifestEntry> entries;
  for (int64_t i = 0; i < spec.n_samples; ++i) {
    const auto sample = synthesize_sample(spec, i);
    const fs::path rel = fs::path("samples") / sample.patch_id();
    save_sample(sample, out_dir / rel);
    entries.push_back({rel, sample.domain_id, synthetic_assignment(spec, i).second});
  }
  DatasetManifest manifest(out_dir, std::move(entries));
  manifest.save(out_dir / sample_files::kManifest);
  io::write_text(out_dir / sample_files::kStats, compute_channel_stats(manifest).to_json().dump(2));
  io::write_text(out_dir / "synthetic_spec.json", spec.to_json().dump(2));
  return manifest;
}

// ---------------------------------------------------------------------------
// Augmentation

torch::Tensor AugmentTransform::apply(const torch::Tensor& t) const {
  torch::Tensor out = t;
  if (flip == Flip::horizontal) out = out.flip({-1});
  if (flip == Flip::vertical) out = out.flip({-2});
  if (quarter_turns % 4 != 0) out = torch::rot90(out, quarter_turns % 4, {-2, -1});
  return out.contiguous();
}

AugmentTransform sample_transform(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> flip(0, 2);
  std::uniform_int_distribution<int> turns(0, 3);
  AugmentTransform t;
  t.flip = static_cast<Flip>(flip(rng));
  t.quarter_turns = turns(rng);
  return t;
}

Sample apply_transform(const Sample& s, const AugmentTransform& t) {
  std::optional<LabelMask> mask;
  if (s.mask) mask = LabelMask(t.apply(s.mask->labels()));
  return Sample{AerialPatch(t.apply(s.aerial.pixels()), s.aerial.patch_id()),
                SitsStack(t.apply(s.sits.frames()), s.sits.dates(), t.apply(s.sits.cloud_snow_masks()),
                          s.sits.patch_id()),
                std::move(mask), s.domain_id};
}

Sample augment(const Sample& sample, std::mt19937_64& rng) {
  return apply_transform(sample, sample_transform(rng));
}

// ---------------------------------------------------------------------------
// Batching

Batch collate(std::span<const Sample> samples) {
  if (samples.empty()) throw DataError("cannot collate an empty sample list");
  const int64_t b = static_cast<int64_t>(samples.size());
  int64_t t_max = 0;
  for (const auto& s : samples) t_max = std::max(t_max, s.sits.length());
  const int64_t h = samples[0].sits.size();
  const bool has_labels = samples[0].mask.has_value();

  std::vector<torch::Tensor> aerial;
  Batch out;
  out.frames = torch::zeros({b, t_max, kSitsBands, h, h}, torch::kFloat32);
  out.cloud_masks = torch::zeros({b, t_max, h, h}, torch::kFloat32);
  out.day_of_year = torch::ones({b, t_max}, torch::kInt64);
  out.validity = torch::zeros({b, t_max}, torch::kBool);
  std::vector<torch::Tensor> labels;
  for (int64_t i = 0; i < b; ++i) {
    const auto& s = samples[static_cast<size_t>(i)];
    const int64_t t = s.sits.length();
    aerial.push_back(s.aerial.pixels());
    out.frames[i].narrow(0, 0, t).copy_(s.sits.frames());
    out.cloud_masks[i].narrow(0, 0, t).copy_(s.sits.cloud_snow_masks());
    out.day_of_year[i].narrow(0, 0, t).copy_(s.sits.day_of_year());
    out.validity[i].narrow(0, 0, t).fill_(true);
    if (has_labels) labels.push_back(s.mask->labels());
    out.patch_ids.push_back(s.patch_id());
  }
  out.aerial = torch::stack(aerial).to(torch::kFloat32);
  if (has_labels) out.labels = torch::stack(labels);
  return out;
}

BatchIterator::BatchIterator(std::span<const Sample> samples, int64_t batch_size)
    : samples_(samples), batch_size_(batch_size) {
  if (batch_size_ < 1) throw ConfigError("batch size must be >= 1");
  if (samples_.empty()) return;
  const auto& first = samples_.front();
  for (const auto& s : samples_) {
    if (s.aerial.size() != first.aerial.size() || s.sits.size() != first.sits.size()) {
      throw DataError("samples in one batch stream must share a scale profile ('" + s.patch_id() +
                      "' differs from '" + first.patch_id() + "')");
    }
    if (s.mask.has_value() != first.mask.has_value()) {
      throw DataError("samples in one batch stream must all have masks or none");
    }
  }
}

std::optional<Batch> BatchIterator::next() {
  if (cursor_ >= samples_.size()) return std::nullopt;
  const size_t n = std::min(samples_.size() - cursor_, static_cast<size_t>(batch_size_));
  auto batch = collate(samples_.subspan(cursor_, n));
  cursor_ += n;
  return batch;
}

int64_t BatchIterator::batch_count() const {
  return (static_cast<int64_t>(samples_.size()) + batch_size_ - 1) / batch_size_;
}

}  // namespace lfdlm
