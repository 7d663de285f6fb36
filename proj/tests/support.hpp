#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "lfdlm/dataset_io.hpp"

namespace lfdlm::testing {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("lfdlm-" + tag + "-" + std::to_string(rd()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

/// Random per-pixel distributions [C, H, W] with a spread of peaked and flat pixels.
inline torch::Tensor random_distribution(int64_t c, int64_t h, int64_t w, torch::Generator& gen,
                                         torch::Dtype dtype = torch::kFloat64) {
  auto logits = torch::randn({c, h, w}, gen, torch::TensorOptions().dtype(torch::kFloat64)) *
                (torch::rand({1, h, w}, gen, torch::TensorOptions().dtype(torch::kFloat64)) * 6.0);
  return torch::softmax(logits, 0).to(dtype);
}

inline std::vector<Sample> toy_samples(int64_t n, uint64_t seed = 0) {
  auto spec = SyntheticSpec::defaults(ScaleProfile::toy(), seed);
  spec.n_samples = n;
  std::vector<Sample> out;
  for (int64_t i = 0; i < n; ++i) out.push_back(synthesize_sample(spec, i));
  return out;
}

inline Date date_from_day_of_year(int year, int doy) {
  using namespace std::chrono;
  const year_month_day ymd{sys_days{std::chrono::year{year} / January / 1} + days{doy - 1}};
  return {static_cast<int>(ymd.year()), static_cast<int>(static_cast<unsigned>(ymd.month())),
          static_cast<int>(static_cast<unsigned>(ymd.day()))};
}

/// `t` distinct increasing dates of one year drawn at random.
inline std::vector<Date> random_dates(int year, int64_t t, std::mt19937_64& rng) {
  std::vector<int> doys(365);
  for (int i = 0; i < 365; ++i) doys[i] = i + 1;
  std::shuffle(doys.begin(), doys.end(), rng);
  doys.resize(static_cast<size_t>(t));
  std::sort(doys.begin(), doys.end());
  std::vector<Date> dates;
  for (int d : doys) dates.push_back(date_from_day_of_year(year, d));
  return dates;
}

/// Largest relative disagreement between autograd and central differences at sampled coordinates.
struct GradCheck {
  double max_relative_error = 0.0;
  int64_t checked = 0;
};

/// `f` maps a float64 input to a scalar. Coordinates whose gradients are both below `floor` are skipped.
inline GradCheck finite_difference_check(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                         const torch::Tensor& input, int64_t n_coords, uint64_t seed,
                                         double step = 1e-6, double floor = 1e-7) {
  auto x = input.detach().clone().to(torch::kFloat64).requires_grad_(true);
  const auto analytic = torch::autograd::grad({f(x)}, {x})[0].detach().reshape({-1});
  auto flat = x.detach().clone().reshape({-1});
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int64_t> pick(0, flat.numel() - 1);
  GradCheck out;
  torch::NoGradGuard no_grad;
  for (int64_t k = 0; k < n_coords; ++k) {
    const int64_t i = pick(rng);
    const double orig = flat[i].item<double>();
    flat[i] = orig + step;
    const double up = f(flat.view(input.sizes())).item<double>();
    flat[i] = orig - step;
    const double down = f(flat.view(input.sizes())).item<double>();
    flat[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic[i].item<double>();
    const double scale = std::max(std::abs(a), std::abs(numeric));
    if (scale < floor) continue;
    out.max_relative_error = std::max(out.max_relative_error, std::abs(a - numeric) / scale);
    ++out.checked;
  }
  return out;
}

}  // namespace lfdlm::testing
