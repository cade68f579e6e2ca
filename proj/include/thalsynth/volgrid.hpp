#pragma once

// Volumetric containers, voxel/world geometry and resampling.
//
// A Volume stores `components` values per voxel, interleaved, with the
// first voxel index varying fastest (NIfTI order).  The tag parameter only
// exists to keep domain kinds (scalar image, V1 field, tensors, ...) apart
// at the type level.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "thalsynth/errors.hpp"

namespace thalsynth {

using Affine = Eigen::Matrix4d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Index3 = std::array<int, 3>;

class VoxelGrid {
 public:
  VoxelGrid() : dims_{0, 0, 0}, affine_(Affine::Identity()) {}

  VoxelGrid(Index3 dims, const Affine& affine) : dims_(dims), affine_(affine) {
    for (int d : dims_) {
      if (d <= 0) throw InvalidGridError("grid dimensions must be positive");
    }
    const double det = affine_.topLeftCorner<3, 3>().determinant();
    if (!std::isfinite(det) || std::abs(det) < 1e-300) {
      throw InvalidGridError("grid affine is singular");
    }
    inverse_ = affine_.inverse();
  }

  // Axis-aligned grid with the given spacing; voxel (0,0,0) sits at `origin`.
  static VoxelGrid isotropic(Index3 dims, double spacing, const Vec3& origin = Vec3::Zero()) {
    return axis_aligned(dims, Vec3::Constant(spacing), origin);
  }

  static VoxelGrid axis_aligned(Index3 dims, const Vec3& spacing, const Vec3& origin = Vec3::Zero()) {
    Affine a = Affine::Identity();
    a(0, 0) = spacing.x();
    a(1, 1) = spacing.y();
    a(2, 2) = spacing.z();
    a.block<3, 1>(0, 3) = origin;
    return VoxelGrid(dims, a);
  }

  const Index3& dims() const { return dims_; }
  int dim(int axis) const { return dims_[static_cast<std::size_t>(axis)]; }
  const Affine& affine() const { return affine_; }
  const Affine& inverse_affine() const { return inverse_; }

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims_[0]) * static_cast<std::size_t>(dims_[1]) *
           static_cast<std::size_t>(dims_[2]);
  }

  // Column norms of the linear block.
  Vec3 voxel_size() const { return affine_.topLeftCorner<3, 3>().colwise().norm().transpose(); }

  // Physical extent along each voxel axis (dims * spacing).
  Vec3 extent_mm() const {
    const Vec3 vs = voxel_size();
    return {dims_[0] * vs.x(), dims_[1] * vs.y(), dims_[2] * vs.z()};
  }

  std::size_t linear_index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims_[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims_[1]) * static_cast<std::size_t>(k));
  }

  Index3 index3(std::size_t v) const {
    const auto nx = static_cast<std::size_t>(dims_[0]);
    const auto ny = static_cast<std::size_t>(dims_[1]);
    return {static_cast<int>(v % nx), static_cast<int>((v / nx) % ny), static_cast<int>(v / (nx * ny))};
  }

  bool operator==(const VoxelGrid& o) const { return dims_ == o.dims_ && affine_ == o.affine_; }

 private:
  Index3 dims_;
  Affine affine_;
  Affine inverse_ = Affine::Identity();
};

inline Vec3 voxel_to_world(const VoxelGrid& grid, const Vec3& ijk) {
  return (grid.affine() * ijk.homogeneous()).head<3>();
}

inline Vec3 world_to_voxel(const VoxelGrid& grid, const Vec3& xyz) {
  return (grid.inverse_affine() * xyz.homogeneous()).head<3>();
}

namespace tags {
struct Scalar {};
struct Vector {};
struct Tensor {};
struct Rgb {};
struct Prob {};
struct Label {};
}  // namespace tags

template <typename T, typename Tag>
class Volume {
 public:
  using value_type = T;
  using tag_type = Tag;

  Volume() = default;

  explicit Volume(VoxelGrid grid, int components = 1, T fill = T{})
      : grid_(std::move(grid)), components_(components) {
    if (components_ <= 0) throw InvalidInputError("volume needs at least one component");
    data_.assign(grid_.voxel_count() * static_cast<std::size_t>(components_), fill);
  }

  Volume(VoxelGrid grid, int components, std::vector<T> data)
      : grid_(std::move(grid)), components_(components), data_(std::move(data)) {
    if (components_ <= 0) throw InvalidInputError("volume needs at least one component");
    if (data_.size() != grid_.voxel_count() * static_cast<std::size_t>(components_)) {
      throw InvalidInputError("volume data length does not match grid dims x components");
    }
  }

  const VoxelGrid& grid() const { return grid_; }
  int components() const { return components_; }
  std::size_t voxel_count() const { return grid_.voxel_count(); }
  bool empty() const { return data_.empty(); }

  T& at(std::size_t voxel, int c = 0) { return data_[voxel * static_cast<std::size_t>(components_) + static_cast<std::size_t>(c)]; }
  const T& at(std::size_t voxel, int c = 0) const {
    return data_[voxel * static_cast<std::size_t>(components_) + static_cast<std::size_t>(c)];
  }

  T& operator()(int i, int j, int k, int c = 0) { return at(grid_.linear_index(i, j, k), c); }
  const T& operator()(int i, int j, int k, int c = 0) const { return at(grid_.linear_index(i, j, k), c); }

  std::span<T> voxel(std::size_t v) {
    return {data_.data() + v * static_cast<std::size_t>(components_), static_cast<std::size_t>(components_)};
  }
  std::span<const T> voxel(std::size_t v) const {
    return {data_.data() + v * static_cast<std::size_t>(components_), static_cast<std::size_t>(components_)};
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  bool operator==(const Volume& o) const {
    return grid_ == o.grid_ && components_ == o.components_ && data_ == o.data_;
  }

 private:
  VoxelGrid grid_;
  int components_ = 1;
  std::vector<T> data_;
};

using ScalarVolume = Volume<double, tags::Scalar>;
using VectorField = Volume<double, tags::Vector>;  // unit V1 or zero; v and -v are equivalent
using TensorVolume = Volume<double, tags::Tensor>;  // Dxx Dyy Dzz Dxy Dxz Dyz, mm^2/s
using RgbVolume = Volume<double, tags::Rgb>;
using ProbVolume = Volume<float, tags::Prob>;  // channel 0 is background
using LabelVolume = Volume<std::int32_t, tags::Label>;

template <typename V>
inline constexpr bool is_prob_volume_v = std::is_same_v<typename V::tag_type, tags::Prob>;
template <typename V>
inline constexpr bool is_label_volume_v = std::is_same_v<typename V::tag_type, tags::Label>;
template <typename V>
inline constexpr bool is_vector_field_v = std::is_same_v<typename V::tag_type, tags::Vector>;

// Same kind and components as `like`, on a new grid, zero-filled.
template <typename V>
V like_on(const V& like, const VoxelGrid& grid) {
  return V(grid, like.components());
}

inline void require_same_grid(const VoxelGrid& a, const VoxelGrid& b, const char* what) {
  if (!(a.dims() == b.dims()) || !a.affine().isApprox(b.affine(), 1e-9)) {
    throw GridMismatchError(std::string(what) + ": grids differ");
  }
}

// ---------------------------------------------------------------------------
// Affine composition

inline constexpr double kDegToRad = 3.14159265358979323846 / 180.0;

// cos/sin of an angle in degrees, exact at multiples of 90.
inline std::pair<double, double> cos_sin_deg(double deg) {
  const double quarter = deg / 90.0;
  if (quarter == std::round(quarter)) {
    switch (((static_cast<long long>(std::round(quarter)) % 4) + 4) % 4) {
      case 0: return {1.0, 0.0};
      case 1: return {0.0, 1.0};
      case 2: return {-1.0, 0.0};
      default: return {0.0, -1.0};
    }
  }
  return {std::cos(deg * kDegToRad), std::sin(deg * kDegToRad)};
}

inline Mat3 rotation_x_deg(double deg) {
  const auto [c, s] = cos_sin_deg(deg);
  Mat3 r;
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return r;
}

inline Mat3 rotation_y_deg(double deg) {
  const auto [c, s] = cos_sin_deg(deg);
  Mat3 r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

inline Mat3 rotation_z_deg(double deg) {
  const auto [c, s] = cos_sin_deg(deg);
  Mat3 r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

// Intrinsic x -> y -> z rotation, angles in degrees.
inline Mat3 euler_rotation_deg(const Vec3& euler_deg) {
  return rotation_x_deg(euler_deg.x()) * rotation_y_deg(euler_deg.y()) * rotation_z_deg(euler_deg.z());
}

// T * R * S.
inline Affine compose_affine(double scale, const Vec3& euler_deg, const Vec3& translation_mm) {
  if (!(scale > 0.0)) throw InvalidInputError("compose_affine: scale must be positive");
  Affine a = Affine::Identity();
  a.topLeftCorner<3, 3>() = euler_rotation_deg(euler_deg) * scale;
  a.block<3, 1>(0, 3) = translation_mm;
  return a;
}

// ---------------------------------------------------------------------------
// Sampling

enum class Interp { Trilinear, Nearest };

namespace detail {

// Coordinates within this distance of an integer are treated as on-grid.
inline constexpr double kSnapTolerance = 1e-9;

inline double snap(double x) {
  const double r = std::round(x);
  return std::abs(x - r) < kSnapTolerance ? r : x;
}

// Voxel extent is [-0.5, n-0.5]; within the outer half voxel the edge value
// is replicated.
inline bool in_field(double x, int n) { return x >= -0.5 && x <= n - 0.5; }

}  // namespace detail

// Corner voxels and weights for trilinear interpolation at a continuous
// voxel coordinate.  Zero-weight corners are dropped.
struct TrilinearStencil {
  std::array<std::size_t, 8> index{};
  std::array<double, 8> weight{};
  int count = 0;
};

// Returns false outside the field of view.
inline bool trilinear_stencil(const VoxelGrid& grid, const Vec3& p, TrilinearStencil& s) {
  const Index3& n = grid.dims();
  int i0[3], i1[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double c = detail::snap(p[a]);
    if (!detail::in_field(c, n[static_cast<std::size_t>(a)])) return false;
    const double x = std::clamp(c, 0.0, static_cast<double>(n[static_cast<std::size_t>(a)] - 1));
    const double fl = std::floor(x);
    i0[a] = static_cast<int>(fl);
    i1[a] = std::min(i0[a] + 1, n[static_cast<std::size_t>(a)] - 1);
    f[a] = x - fl;
  }
  s.count = 0;
  for (int corner = 0; corner < 8; ++corner) {
    const double w = ((corner & 1) ? f[0] : 1.0 - f[0]) * ((corner & 2) ? f[1] : 1.0 - f[1]) *
                     ((corner & 4) ? f[2] : 1.0 - f[2]);
    if (w == 0.0) continue;
    s.index[static_cast<std::size_t>(s.count)] =
        grid.linear_index((corner & 1) ? i1[0] : i0[0], (corner & 2) ? i1[1] : i0[1], (corner & 4) ? i1[2] : i0[2]);
    s.weight[static_cast<std::size_t>(s.count)] = w;
    ++s.count;
  }
  return true;
}

template <typename T, typename Tag, typename Out>
void apply_stencil(const Volume<T, Tag>& vol, const TrilinearStencil& s, Out* out) {
  const int nc = vol.components();
  const T* data = vol.data().data();
  for (int c = 0; c < nc; ++c) {
    double acc = 0.0;
    for (int t = 0; t < s.count; ++t) {
      acc += s.weight[static_cast<std::size_t>(t)] *
             static_cast<double>(data[s.index[static_cast<std::size_t>(t)] * static_cast<std::size_t>(nc) + static_cast<std::size_t>(c)]);
    }
    out[c] = static_cast<Out>(acc);
  }
}

// Trilinear sample of every component at continuous voxel coordinate `p`.
// Returns false (and leaves `out` untouched) outside the field of view.
template <typename T, typename Tag, typename Out>
bool sample_trilinear(const Volume<T, Tag>& vol, const Vec3& p, Out* out) {
  TrilinearStencil s;
  if (!trilinear_stencil(vol.grid(), p, s)) return false;
  apply_stencil(vol, s, out);
  return true;
}

// Nearest-neighbour lookup; returns the linear voxel index or -1 if outside.
inline std::ptrdiff_t nearest_voxel(const VoxelGrid& grid, const Vec3& p) {
  const Index3& n = grid.dims();
  int idx[3];
  for (int a = 0; a < 3; ++a) {
    if (!detail::in_field(p[a], n[a])) return -1;
    idx[a] = std::clamp(static_cast<int>(std::lround(p[a])), 0, n[a] - 1);
  }
  return static_cast<std::ptrdiff_t>(grid.linear_index(idx[0], idx[1], idx[2]));
}

// Projects a probability vector back onto the simplex; an all-zero vector
// becomes pure background.
template <typename T>
void renormalize_simplex(std::span<T> p) {
  double sum = 0.0;
  for (auto& v : p) {
    if (v < T{0}) v = T{0};
    sum += static_cast<double>(v);
  }
  if (sum <= 0.0) {
    std::fill(p.begin(), p.end(), T{0});
    p[0] = T{1};
    return;
  }
  for (auto& v : p) v = static_cast<T>(static_cast<double>(v) / sum);
}

// Writes the out-of-field value for voxel `v` of `out`.
template <typename V>
void fill_out_of_field(V& out, std::size_t v) {
  auto dst = out.voxel(v);
  std::fill(dst.begin(), dst.end(), typename V::value_type{0});
  if constexpr (is_prob_volume_v<V>) dst[0] = 1;
}

// Pullback of `vol` onto `target`: each target voxel centre is mapped through
// target -> world -> source voxel space.  Out-of-field voxels are background.
template <typename V>
V resample(const V& vol, const VoxelGrid& target, Interp mode) {
  if (target.voxel_count() == 0) throw InvalidGridError("resample: degenerate target grid");
  if constexpr (is_label_volume_v<V>) {
    if (mode != Interp::Nearest) throw InvalidInputError("label volumes can only be resampled with nearest");
  }
  if constexpr (is_vector_field_v<V>) {
    if (mode != Interp::Nearest) {
      throw InvalidInputError("V1 fields are antipodal; resample them via tensors or nearest");
    }
  }
  if (target == vol.grid()) return vol;

  V out(target, vol.components());
  const Affine m = vol.grid().inverse_affine() * target.affine();
  const int nc = vol.components();
  std::vector<double> buf(static_cast<std::size_t>(nc));
  const Index3& n = target.dims();
  for (int k = 0; k < n[2]; ++k) {
    for (int j = 0; j < n[1]; ++j) {
      for (int i = 0; i < n[0]; ++i) {
        const Vec3 p = (m * Eigen::Vector4d(i, j, k, 1.0)).head<3>();
        const std::size_t v = target.linear_index(i, j, k);
        auto dst = out.voxel(v);
        if (mode == Interp::Nearest) {
          const auto src = nearest_voxel(vol.grid(), p);
          if (src < 0) {
            fill_out_of_field(out, v);
            continue;
          }
          const auto s = vol.voxel(static_cast<std::size_t>(src));
          std::copy(s.begin(), s.end(), dst.begin());
        } else {
          if (!sample_trilinear(vol, p, buf.data())) {
            fill_out_of_field(out, v);
            continue;
          }
          for (int c = 0; c < nc; ++c) dst[c] = static_cast<typename V::value_type>(buf[c]);
          if constexpr (is_prob_volume_v<V>) renormalize_simplex(dst);
        }
      }
    }
  }
  return out;
}

// Grid covering the same physical field of view as `grid` with a new
// per-axis spacing.  The linear block keeps its direction cosines and the
// field of view stays centred.
inline VoxelGrid regrid_same_fov(const VoxelGrid& grid, const Vec3& spacing) {
  const Vec3 vs = grid.voxel_size();
  const Vec3 extent = grid.extent_mm();
  Index3 dims{};
  for (int a = 0; a < 3; ++a) {
    if (!(spacing[a] > 0.0)) throw InvalidGridError("regrid: spacing must be positive");
    // Round up so the new field covers the old one; edge voxels would
    // otherwise fall out of field and read as background.
    dims[static_cast<std::size_t>(a)] = std::max(1, static_cast<int>(std::ceil(extent[a] / spacing[a] - 1e-6)));
  }
  Affine a = grid.affine();
  Mat3 dir = grid.affine().topLeftCorner<3, 3>();
  for (int c = 0; c < 3; ++c) dir.col(c) /= vs[c];
  a.topLeftCorner<3, 3>() = dir * spacing.asDiagonal();
  // Centre of the old field of view in old voxel coordinates.
  const Vec3 centre_old(0.5 * (grid.dim(0) - 1), 0.5 * (grid.dim(1) - 1), 0.5 * (grid.dim(2) - 1));
  const Vec3 centre_world = voxel_to_world(grid, centre_old);
  const Vec3 centre_new(0.5 * (dims[0] - 1), 0.5 * (dims[1] - 1), 0.5 * (dims[2] - 1));
  a.block<3, 1>(0, 3) = centre_world - a.topLeftCorner<3, 3>() * centre_new;
  return VoxelGrid(dims, a);
}

// Sub-grid starting at voxel `offset` with `dims` voxels.
inline VoxelGrid crop_grid(const VoxelGrid& grid, const Index3& offset, const Index3& dims) {
  Affine a = grid.affine();
  a.block<3, 1>(0, 3) = voxel_to_world(grid, Vec3(offset[0], offset[1], offset[2]));
  return VoxelGrid(dims, a);
}

template <typename V>
V crop(const V& vol, const Index3& offset, const Index3& dims) {
  const VoxelGrid& g = vol.grid();
  for (int a = 0; a < 3; ++a) {
    if (offset[a] < 0 || offset[a] + dims[a] > g.dim(a)) throw InvalidGridError("crop window outside volume");
  }
  V out(crop_grid(g, offset, dims), vol.components());
  for (int k = 0; k < dims[2]; ++k) {
    for (int j = 0; j < dims[1]; ++j) {
      for (int i = 0; i < dims[0]; ++i) {
        const auto s = vol.voxel(g.linear_index(i + offset[0], j + offset[1], k + offset[2]));
        auto d = out.voxel(out.grid().linear_index(i, j, k));
        std::copy(s.begin(), s.end(), d.begin());
      }
    }
  }
  return out;
}

}  // namespace thalsynth
