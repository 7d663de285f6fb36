#include "lfdlm/io.hpp"

#include <fstream>
#include <sstream>

#include <H5Cpp.h>
#include <openssl/evp.h>
#include <opencv2/imgcodecs.hpp>

#include "lfdlm/core_types.hpp"

namespace lfdlm::io {

namespace {

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

}  // namespace

void write_raster(const fs::path& path, const torch::Tensor& bands) {
  TORCH_CHECK(bands.dim() == 3, "write_raster expects [C, H, W]");
  ensure_parent(path);
  const auto data = bands.to(torch::kFloat32).contiguous();
  const int rows = static_cast<int>(data.size(1));
  const int cols = static_cast<int>(data.size(2));
  std::vector<cv::Mat> pages;
  pages.reserve(static_cast<size_t>(data.size(0)));
  for (int64_t c = 0; c < data.size(0); ++c) {
    cv::Mat page(rows, cols, CV_32F);
    std::memcpy(page.data, data[c].data_ptr<float>(), sizeof(float) * rows * cols);
    pages.push_back(std::move(page));
  }
  if (!cv::imwritemulti(path.string(), pages)) {
    throw DataError("failed to write raster " + path.string());
  }
}

torch::Tensor read_raster(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing file " + path.string());
  std::vector<cv::Mat> pages;
  if (!cv::imreadmulti(path.string(), pages, cv::IMREAD_UNCHANGED) || pages.empty()) {
    throw DataError("cannot parse raster " + path.string());
  }
  const int rows = pages[0].rows;
  const int cols = pages[0].cols;
  auto out = torch::empty({static_cast<int64_t>(pages.size()), rows, cols}, torch::kFloat32);
  for (size_t c = 0; c < pages.size(); ++c) {
    const auto& page = pages[c];
    if (page.type() != CV_32F || page.rows != rows || page.cols != cols) {
      throw DataError("raster band " + std::to_string(c) + " has unexpected type or shape in " +
                      path.string());
    }
    const cv::Mat dense = page.isContinuous() ? page : page.clone();
    std::memcpy(out[static_cast<int64_t>(c)].data_ptr<float>(), dense.data,
                sizeof(float) * rows * cols);
  }
  return out;
}

void write_label_raster(const fs::path& path, const torch::Tensor& labels) {
  TORCH_CHECK(labels.dim() == 2, "write_label_raster expects [H, W]");
  ensure_parent(path);
  const auto data = labels.to(torch::kUInt8).contiguous();
  cv::Mat img(static_cast<int>(data.size(0)), static_cast<int>(data.size(1)), CV_8U);
  std::memcpy(img.data, data.data_ptr<uint8_t>(), static_cast<size_t>(data.numel()));
  if (!cv::imwrite(path.string(), img)) throw DataError("failed to write " + path.string());
}

torch::Tensor read_label_raster(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing file " + path.string());
  const cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (img.empty() || img.type() != CV_8U) throw DataError("cannot parse label raster " + path.string());
  auto out = torch::empty({img.rows, img.cols}, torch::kUInt8);
  const cv::Mat dense = img.isContinuous() ? img : img.clone();
  std::memcpy(out.data_ptr<uint8_t>(), dense.data, static_cast<size_t>(out.numel()));
  return out.to(torch::kInt64);
}

// ---------------------------------------------------------------------------

struct ArrayContainer::Impl {
  H5::H5File file;
};

ArrayContainer::ArrayContainer(const fs::path& path, Mode mode) : impl_(std::make_unique<Impl>()), path_(path) {
  H5::Exception::dontPrint();
  try {
    switch (mode) {
      case Mode::read:
        if (!fs::exists(path)) throw DataError("missing file " + path.string());
        impl_->file = H5::H5File(path.string(), H5F_ACC_RDONLY);
        break;
      case Mode::truncate:
        ensure_parent(path);
        impl_->file = H5::H5File(path.string(), H5F_ACC_TRUNC);
        break;
      case Mode::append:
        ensure_parent(path);
        impl_->file = fs::exists(path) ? H5::H5File(path.string(), H5F_ACC_RDWR)
                                       : H5::H5File(path.string(), H5F_ACC_TRUNC);
        break;
    }
  } catch (const H5::Exception& e) {
    throw DataError("cannot open array container " + path.string() + ": " + e.getDetailMsg());
  }
}

ArrayContainer::~ArrayContainer() = default;
ArrayContainer::ArrayContainer(ArrayContainer&&) noexcept = default;
ArrayContainer& ArrayContainer::operator=(ArrayContainer&&) noexcept = default;

namespace {

const H5::PredType& h5_type(torch::ScalarType type) {
  switch (type) {
    case torch::kFloat32: return H5::PredType::NATIVE_FLOAT;
    case torch::kFloat64: return H5::PredType::NATIVE_DOUBLE;
    case torch::kInt64: return H5::PredType::NATIVE_INT64;
    case torch::kUInt8: return H5::PredType::NATIVE_UINT8;
    default: throw DataError("unsupported array dtype for the array container");
  }
}

torch::ScalarType torch_type(const H5::DataSet& ds) {
  const auto cls = ds.getTypeClass();
  const size_t bytes = ds.getDataType().getSize();
  if (cls == H5T_FLOAT) return bytes == 8 ? torch::kFloat64 : torch::kFloat32;
  if (cls == H5T_INTEGER) return bytes == 1 ? torch::kUInt8 : torch::kInt64;
  throw DataError("unsupported stored array type");
}

}  // namespace

void ArrayContainer::write(const std::string& name, const torch::Tensor& array) {
  const auto data = array.contiguous();
  std::vector<hsize_t> dims(data.sizes().begin(), data.sizes().end());
  try {
    if (impl_->file.nameExists(name)) impl_->file.unlink(name);
    H5::DataSpace space(static_cast<int>(dims.size()), dims.data());
    const auto& type = h5_type(data.scalar_type());
    auto ds = impl_->file.createDataSet(name, type, space);
    ds.write(data.data_ptr(), type);
  } catch (const H5::Exception& e) {
    throw DataError("failed to write array '" + name + "' to " + path_.string() + ": " + e.getDetailMsg());
  }
}

torch::Tensor ArrayContainer::read(const std::string& name) const {
  try {
    if (!impl_->file.nameExists(name)) {
      throw DataError("array '" + name + "' not found in " + path_.string());
    }
    auto ds = impl_->file.openDataSet(name);
    auto space = ds.getSpace();
    std::vector<hsize_t> dims(static_cast<size_t>(space.getSimpleExtentNdims()));
    space.getSimpleExtentDims(dims.data());
    std::vector<int64_t> shape(dims.begin(), dims.end());
    const auto type = torch_type(ds);
    auto out = torch::empty(shape, type);
    ds.read(out.data_ptr(), h5_type(type));
    return out;
  } catch (const H5::Exception& e) {
    throw DataError("failed to read array '" + name + "' from " + path_.string() + ": " + e.getDetailMsg());
  }
}

bool ArrayContainer::contains(const std::string& name) const { return impl_->file.nameExists(name); }

std::vector<std::string> ArrayContainer::names() const {
  std::vector<std::string> out;
  const hsize_t n = impl_->file.getNumObjs();
  for (hsize_t i = 0; i < n; ++i) out.push_back(impl_->file.getObjnameByIdx(i));
  return out;
}

// ---------------------------------------------------------------------------

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string file_sha256(const fs::path& path) { return sha256_hex(read_text(path)); }

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace lfdlm::io
