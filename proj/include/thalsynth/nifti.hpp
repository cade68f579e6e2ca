#pragma once

// Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.
//
// Reads 3-D and 4-D images of the common integer and floating-point types,
// either byte order, applying scl_slope/scl_inter.  Writes little-endian
// images with both sform and (when the affine has no shear) qform set.
// gzip output carries no timestamp, so identical data gives identical bytes.

#include <zlib.h>

#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "thalsynth/errors.hpp"
#include "thalsynth/volgrid.hpp"

namespace thalsynth::nifti {

enum class DataType : std::int16_t {
  UInt8 = 2,
  Int16 = 4,
  Int32 = 8,
  Float32 = 16,
  Float64 = 64,
  Int8 = 256,
  UInt16 = 512,
  UInt32 = 768,
};

inline constexpr int kHeaderSize = 348;
inline constexpr int kVoxOffset = 352;

// Raw image: volumes stored one after another, first index fastest.
struct Image {
  VoxelGrid grid;
  int volumes = 1;
  std::vector<double> data;

  double at(std::size_t voxel, int volume) const {
    return data[static_cast<std::size_t>(volume) * grid.voxel_count() + voxel];
  }
};

namespace detail {

struct GzFile {
  gzFile f = nullptr;
  GzFile(const std::string& path, const char* mode) : f(gzopen(path.c_str(), mode)) {}
  ~GzFile() {
    if (f != nullptr) gzclose(f);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;

  // gzclose flushes; report its status explicitly for writers.
  int close() {
    const int rc = gzclose(f);
    f = nullptr;
    return rc;
  }
};

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
T get(const std::uint8_t* buf, int offset, bool swap) {
  std::array<std::uint8_t, sizeof(T)> b;
  std::memcpy(b.data(), buf + offset, sizeof(T));
  if (swap) std::reverse(b.begin(), b.end());
  T v;
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

template <typename T>
void put(std::uint8_t* buf, int offset, T v) {
  std::memcpy(buf + offset, &v, sizeof(T));
}

inline int bytes_per_voxel(DataType t) {
  switch (t) {
    case DataType::UInt8:
    case DataType::Int8: return 1;
    case DataType::Int16:
    case DataType::UInt16: return 2;
    case DataType::Int32:
    case DataType::UInt32:
    case DataType::Float32: return 4;
    case DataType::Float64: return 8;
  }
  return 0;
}

inline double decode(const std::uint8_t* p, DataType t, bool swap) {
  switch (t) {
    case DataType::UInt8: return *p;
    case DataType::Int8: return static_cast<std::int8_t>(*p);
    case DataType::Int16: return get<std::int16_t>(p, 0, swap);
    case DataType::UInt16: return get<std::uint16_t>(p, 0, swap);
    case DataType::Int32: return get<std::int32_t>(p, 0, swap);
    case DataType::UInt32: return get<std::uint32_t>(p, 0, swap);
    case DataType::Float32: return get<float>(p, 0, swap);
    case DataType::Float64: return get<double>(p, 0, swap);
  }
  return 0.0;
}

inline Affine affine_from_header(const std::uint8_t* h, bool swap) {
  const auto sform_code = get<std::int16_t>(h, 254, swap);
  const auto qform_code = get<std::int16_t>(h, 252, swap);
  Affine a = Affine::Identity();
  float pixdim[8];
  for (int i = 0; i < 8; ++i) pixdim[i] = get<float>(h, 76 + 4 * i, swap);
  if (sform_code > 0) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) a(r, c) = get<float>(h, 280 + 16 * r + 4 * c, swap);
    }
    return a;
  }
  const double dx = pixdim[1] > 0 ? pixdim[1] : 1.0;
  const double dy = pixdim[2] > 0 ? pixdim[2] : 1.0;
  const double dz = pixdim[3] > 0 ? pixdim[3] : 1.0;
  if (qform_code > 0) {
    const double b = get<float>(h, 256, swap), c = get<float>(h, 260, swap), d = get<float>(h, 264, swap);
    const double a0 = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const Mat3 r = Eigen::Quaterniond(a0, b, c, d).normalized().toRotationMatrix();
    const double qfac = pixdim[0] < 0 ? -1.0 : 1.0;
    a.topLeftCorner<3, 3>() = r * Vec3(dx, dy, qfac * dz).asDiagonal();
    a(0, 3) = get<float>(h, 268, swap);
    a(1, 3) = get<float>(h, 272, swap);
    a(2, 3) = get<float>(h, 276, swap);
    return a;
  }
  a(0, 0) = dx;
  a(1, 1) = dy;
  a(2, 2) = dz;
  return a;
}

}  // namespace detail

inline Image read(const std::string& path) {
  detail::GzFile gz(path, "rb");
  if (gz.f == nullptr) throw IoError("cannot open NIfTI file '" + path + "'");
  std::uint8_t h[kHeaderSize];
  if (gzread(gz.f, h, kHeaderSize) != kHeaderSize) throw IoError("'" + path + "': truncated NIfTI header");

  bool swap = false;
  if (detail::get<std::int32_t>(h, 0, false) != kHeaderSize) {
    if (detail::get<std::int32_t>(h, 0, true) != kHeaderSize) throw IoError("'" + path + "': not a NIfTI-1 file");
    swap = true;
  }
  if (std::memcmp(h + 344, "n+1", 4) != 0) throw IoError("'" + path + "': only single-file NIfTI-1 (n+1) is supported");

  std::array<int, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[static_cast<std::size_t>(i)] = detail::get<std::int16_t>(h, 40 + 2 * i, swap);
  if (dim[0] < 1 || dim[0] > 7) throw IoError("'" + path + "': invalid dim[0]");
  Index3 dims{1, 1, 1};
  int volumes = 1;
  for (int i = 1; i <= dim[0]; ++i) {
    if (dim[static_cast<std::size_t>(i)] < 1) throw IoError("'" + path + "': non-positive dimension");
    if (i <= 3) {
      dims[static_cast<std::size_t>(i - 1)] = dim[static_cast<std::size_t>(i)];
    } else {
      volumes *= dim[static_cast<std::size_t>(i)];
    }
  }

  const auto dtype = static_cast<DataType>(detail::get<std::int16_t>(h, 70, swap));
  const int bpv = detail::bytes_per_voxel(dtype);
  if (bpv == 0) throw IoError("'" + path + "': unsupported datatype " + std::to_string(static_cast<int>(dtype)));
  const auto vox_offset = static_cast<long>(detail::get<float>(h, 108, swap));
  double slope = detail::get<float>(h, 112, swap);
  double inter = detail::get<float>(h, 116, swap);
  if (slope == 0.0 || !std::isfinite(slope)) {
    slope = 1.0;
    inter = 0.0;
  }

  Image img;
  try {
    img.grid = VoxelGrid(dims, detail::affine_from_header(h, swap));
  } catch (const InvalidGridError& e) {
    throw IoError("'" + path + "': " + e.what());
  }
  img.volumes = volumes;

  if (vox_offset > kHeaderSize) {
    std::vector<std::uint8_t> skip(static_cast<std::size_t>(vox_offset - kHeaderSize));
    if (gzread(gz.f, skip.data(), static_cast<unsigned>(skip.size())) != static_cast<int>(skip.size())) {
      throw IoError("'" + path + "': truncated extension block");
    }
  }
  const std::size_t n = img.grid.voxel_count() * static_cast<std::size_t>(volumes);
  std::vector<std::uint8_t> raw(n * static_cast<std::size_t>(bpv));
  std::size_t got = 0;
  while (got < raw.size()) {
    const auto chunk = static_cast<unsigned>(std::min<std::size_t>(raw.size() - got, 1u << 30));
    const int r = gzread(gz.f, raw.data() + got, chunk);
    if (r <= 0) throw IoError("'" + path + "': truncated image data");
    got += static_cast<std::size_t>(r);
  }
  img.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    img.data[i] = detail::decode(raw.data() + i * static_cast<std::size_t>(bpv), dtype, swap) * slope + inter;
  }
  return img;
}

// `data` holds `volumes` consecutive 3-D volumes.
// Continuous float images barely compress, and full deflate on them is slow.
// Huffman-only coding gets nearly the same size in a fraction of the time.
enum class Gzip { Deflate, Huffman };

template <typename T>
void write(const std::string& path, const VoxelGrid& grid, int volumes, std::span<const T> data, DataType dtype,
           Gzip gzip_mode = Gzip::Deflate) {
  if (data.size() != grid.voxel_count() * static_cast<std::size_t>(volumes)) {
    throw InvalidInputError("nifti::write: data size does not match grid");
  }
  std::uint8_t h[kVoxOffset] = {};
  using detail::put;
  put<std::int32_t>(h, 0, kHeaderSize);
  put<char>(h, 38, 'r');
  const std::int16_t ndim = volumes > 1 ? 4 : 3;
  put<std::int16_t>(h, 40, ndim);
  for (int a = 0; a < 3; ++a) put<std::int16_t>(h, 42 + 2 * a, static_cast<std::int16_t>(grid.dim(a)));
  put<std::int16_t>(h, 48, static_cast<std::int16_t>(volumes));
  for (int i = 5; i < 8; ++i) put<std::int16_t>(h, 40 + 2 * i, 1);
  put<std::int16_t>(h, 70, static_cast<std::int16_t>(dtype));
  put<std::int16_t>(h, 72, static_cast<std::int16_t>(8 * detail::bytes_per_voxel(dtype)));

  const Affine& a = grid.affine();
  const Vec3 vs = grid.voxel_size();
  Mat3 r = a.topLeftCorner<3, 3>() * vs.cwiseInverse().asDiagonal();
  float qfac = 1.0f;
  if (r.determinant() < 0) {
    qfac = -1.0f;
    r.col(2) = -r.col(2);
  }
  put<float>(h, 76, qfac);
  for (int i = 0; i < 3; ++i) put<float>(h, 80 + 4 * i, static_cast<float>(vs[i]));
  put<float>(h, 92, 1.0f);
  put<float>(h, 108, static_cast<float>(kVoxOffset));
  put<float>(h, 112, 1.0f);
  put<char>(h, 123, static_cast<char>(2 | 8));  // mm, s

  const bool orthonormal = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-5;
  if (orthonormal) {
    Eigen::Quaterniond q(r);
    q.normalize();
    if (q.w() < 0) q.coeffs() = -q.coeffs();
    put<std::int16_t>(h, 252, 1);
    put<float>(h, 256, static_cast<float>(q.x()));
    put<float>(h, 260, static_cast<float>(q.y()));
    put<float>(h, 264, static_cast<float>(q.z()));
  }
  put<float>(h, 268, static_cast<float>(a(0, 3)));
  put<float>(h, 272, static_cast<float>(a(1, 3)));
  put<float>(h, 276, static_cast<float>(a(2, 3)));
  put<std::int16_t>(h, 254, 1);
  for (int row = 0; row < 3; ++row) {
    for (int c = 0; c < 4; ++c) put<float>(h, 280 + 16 * row + 4 * c, static_cast<float>(a(row, c)));
  }
  std::memcpy(h + 344, "n+1", 4);

  const int bpv = detail::bytes_per_voxel(dtype);
  std::vector<std::uint8_t> raw(data.size() * static_cast<std::size_t>(bpv));
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint8_t* p = raw.data() + i * static_cast<std::size_t>(bpv);
    const double v = static_cast<double>(data[i]);
    switch (dtype) {
      case DataType::UInt8: *p = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); break;
      case DataType::Int8: put<std::int8_t>(p, 0, static_cast<std::int8_t>(std::clamp(std::lround(v), -128L, 127L))); break;
      case DataType::Int16: put<std::int16_t>(p, 0, static_cast<std::int16_t>(std::clamp(std::lround(v), -32768L, 32767L))); break;
      case DataType::UInt16: put<std::uint16_t>(p, 0, static_cast<std::uint16_t>(std::clamp(std::lround(v), 0L, 65535L))); break;
      case DataType::Int32: put<std::int32_t>(p, 0, static_cast<std::int32_t>(std::llround(v))); break;
      case DataType::UInt32: put<std::uint32_t>(p, 0, static_cast<std::uint32_t>(std::llround(v))); break;
      case DataType::Float32: put<float>(p, 0, static_cast<float>(v)); break;
      case DataType::Float64: put<double>(p, 0, v); break;
    }
  }

  const bool gzip = detail::ends_with(path, ".gz");
  detail::GzFile gz(path, !gzip ? "wbT" : gzip_mode == Gzip::Huffman ? "wb1h" : "wb1");
  if (gz.f == nullptr) throw IoError("cannot create '" + path + "'");
  if (gzwrite(gz.f, h, kVoxOffset) != kVoxOffset) throw IoError("'" + path + "': write failed");
  std::size_t put_bytes = 0;
  while (put_bytes < raw.size()) {
    const auto chunk = static_cast<unsigned>(std::min<std::size_t>(raw.size() - put_bytes, 1u << 30));
    if (gzwrite(gz.f, raw.data() + put_bytes, chunk) != static_cast<int>(chunk)) throw IoError("'" + path + "': write failed");
    put_bytes += chunk;
  }
  if (gz.close() != Z_OK) throw IoError("'" + path + "': close failed");
}

// ---------------------------------------------------------------------------
// Typed volumes.  Multi-component volumes map to 4-D images with one
// component per volume.

template <typename V>
V to_volume(const Image& img, int expected_components = 0) {
  if (expected_components > 0 && img.volumes != expected_components) {
    throw IoError("expected " + std::to_string(expected_components) + " volumes, found " + std::to_string(img.volumes));
  }
  V out(img.grid, img.volumes);
  const std::size_t nv = img.grid.voxel_count();
  for (int c = 0; c < img.volumes; ++c) {
    for (std::size_t v = 0; v < nv; ++v) {
      double x = img.at(v, c);
      if constexpr (std::is_integral_v<typename V::value_type>) x = std::round(x);
      out.at(v, c) = static_cast<typename V::value_type>(x);
    }
  }
  return out;
}

template <typename V>
V load(const std::string& path, int expected_components = 0) {
  try {
    return to_volume<V>(read(path), expected_components);
  } catch (const IoError& e) {
    const std::string msg = e.what();
    if (msg.find(path) != std::string::npos) throw;
    throw IoError("'" + path + "': " + msg);
  }
}

// Splits a 4-D image into its 3-D volumes (e.g. diffusion-weighted series).
inline std::vector<ScalarVolume> load_series(const std::string& path) {
  const Image img = read(path);
  std::vector<ScalarVolume> out;
  out.reserve(static_cast<std::size_t>(img.volumes));
  const std::size_t nv = img.grid.voxel_count();
  for (int c = 0; c < img.volumes; ++c) {
    std::vector<double> d(img.data.begin() + static_cast<std::ptrdiff_t>(c * nv),
                          img.data.begin() + static_cast<std::ptrdiff_t>((c + 1) * nv));
    out.emplace_back(img.grid, 1, std::move(d));
  }
  return out;
}

template <typename V>
void save(const std::string& path, const V& vol, DataType dtype, Gzip gzip_mode = Gzip::Deflate) {
  const std::size_t nv = vol.voxel_count();
  const int nc = vol.components();
  std::vector<typename V::value_type> planar(nv * static_cast<std::size_t>(nc));
  for (int c = 0; c < nc; ++c) {
    for (std::size_t v = 0; v < nv; ++v) planar[static_cast<std::size_t>(c) * nv + v] = vol.at(v, c);
  }
  write<typename V::value_type>(path, vol.grid(), nc, planar, dtype, gzip_mode);
}

template <typename V>
void save(const std::string& path, const V& vol) {
  if constexpr (is_label_volume_v<V>) {
    save(path, vol, DataType::Int16);
  } else if constexpr (is_prob_volume_v<V>) {
    save(path, vol, DataType::Float32);
  } else {
    save(path, vol, DataType::Float32, Gzip::Huffman);
  }
}

inline void save_series(const std::string& path, std::span<const ScalarVolume> vols) {
  if (vols.empty()) throw InvalidInputError("save_series: no volumes");
  const std::size_t nv = vols.front().voxel_count();
  std::vector<double> planar;
  planar.reserve(nv * vols.size());
  for (const auto& v : vols) {
    require_same_grid(vols.front().grid(), v.grid(), "save_series");
    planar.insert(planar.end(), v.data().begin(), v.data().end());
  }
  write<double>(path, vols.front().grid(), static_cast<int>(vols.size()), planar, DataType::Float32);
}

}  // namespace thalsynth::nifti
