#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace lfdlm::io {

namespace fs = std::filesystem;

/// Multi-band float32 raster stored as a multi-page TIFF, one page per band.
void write_raster(const fs::path& path, const torch::Tensor& bands);
/// Returns [C, H, W] float32.
torch::Tensor read_raster(const fs::path& path);

/// Single-band 8-bit PNG holding class ids.
void write_label_raster(const fs::path& path, const torch::Tensor& labels);
/// Returns [H, W] int64.
torch::Tensor read_label_raster(const fs::path& path);

/// HDF5 file of named float32/int64/uint8 arrays.
class ArrayContainer {
 public:
  enum class Mode { read, truncate, append };

  ArrayContainer(const fs::path& path, Mode mode);
  ~ArrayContainer();
  ArrayContainer(ArrayContainer&&) noexcept;
  ArrayContainer& operator=(ArrayContainer&&) noexcept;

  void write(const std::string& name, const torch::Tensor& array);
  torch::Tensor read(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::vector<std::string> names() const;
  const fs::path& path() const { return path_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  fs::path path_;
};

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const fs::path& path);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, std::string_view text);

}  // namespace lfdlm::io
