#pragma once

// Domain randomisation and augmentation: resolution sampling, partial-volume
// degradation, global/local geometric warps with V1 reorientation, smooth
// orientation noise, DTI speckles and intensity augmentation.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "thalsynth/dti.hpp"
#include "thalsynth/errors.hpp"
#include "thalsynth/volgrid.hpp"

namespace thalsynth {

using Rng = std::mt19937_64;

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  bool operator==(const Range&) const = default;
};

struct AugmentConfig {
  Range coarse_res_mm{1.0, 3.0};
  double per_axis_sigma_mm = 0.2;
  // Slice thickness as a fraction of the sampled spacing.
  Range thickness_ratio{0.75, 1.0};

  Range scale{0.85, 1.15};
  Range rotation_deg{-15.0, 15.0};
  // Half-width of the uniform control-point displacement, mm.
  double local_displacement_mm = 4.0;
  int max_fold_attempts = 10;
  Range local_rotation_deg{-15.0, 15.0};

  double speckle_prob = 1e-4;
  Range speckle_fa{0.5, 1.0};

  Range brightness{-0.1, 0.1};
  Range contrast{0.75, 1.25};
  Range noise_sigma{0.0, 0.05};
  Range gamma{0.7, 1.5};  // sampled log-uniformly

  bool operator==(const AugmentConfig&) const = default;

  void validate() const {
    auto check = [](const Range& r, const char* name) {
      if (!std::isfinite(r.lo) || !std::isfinite(r.hi) || r.lo > r.hi) {
        throw ConfigError(std::string("config: range '") + name + "' is empty or not finite");
      }
    };
    check(coarse_res_mm, "coarse_res_mm");
    check(thickness_ratio, "thickness_ratio");
    check(scale, "scale");
    check(rotation_deg, "rotation_deg");
    check(local_rotation_deg, "local_rotation_deg");
    check(speckle_fa, "speckle_fa");
    check(brightness, "brightness");
    check(contrast, "contrast");
    check(noise_sigma, "noise_sigma");
    check(gamma, "gamma");
    if (!(coarse_res_mm.lo > 0.0)) throw ConfigError("config: coarse_res_mm must be positive");
    if (!(per_axis_sigma_mm >= 0.0)) throw ConfigError("config: per_axis_sigma_mm must be >= 0");
    if (thickness_ratio.lo < 0.0 || thickness_ratio.hi > 1.0) {
      throw ConfigError("config: thickness_ratio must lie in [0, 1]");
    }
    if (!(scale.lo > 0.0)) throw ConfigError("config: scale must be positive");
    if (!(local_displacement_mm >= 0.0)) throw ConfigError("config: local_displacement_mm must be >= 0");
    if (max_fold_attempts < 1) throw ConfigError("config: max_fold_attempts must be >= 1");
    if (!(speckle_prob >= 0.0 && speckle_prob <= 1.0)) throw ConfigError("config: speckle_prob must be in [0, 1]");
    if (speckle_fa.lo < 0.0 || speckle_fa.hi > 1.0) throw ConfigError("config: speckle_fa must lie in [0, 1]");
    if (noise_sigma.lo < 0.0) throw ConfigError("config: noise_sigma must be >= 0");
    if (!(contrast.lo > 0.0)) throw ConfigError("config: contrast must be positive");
    if (!(gamma.lo > 0.0)) throw ConfigError("config: gamma must be positive");
  }

  // Every augmentation collapsed to its identity value, resolution fixed at
  // `res_mm` with zero slice thickness.
  static AugmentConfig identity(double res_mm = 0.7) {
    AugmentConfig c;
    c.coarse_res_mm = {res_mm, res_mm};
    c.per_axis_sigma_mm = 0.0;
    c.thickness_ratio = {0.0, 0.0};
    c.scale = {1.0, 1.0};
    c.rotation_deg = {0.0, 0.0};
    c.local_displacement_mm = 0.0;
    c.local_rotation_deg = {0.0, 0.0};
    c.speckle_prob = 0.0;
    c.brightness = {0.0, 0.0};
    c.contrast = {1.0, 1.0};
    c.noise_sigma = {0.0, 0.0};
    c.gamma = {1.0, 1.0};
    return c;
  }
};

inline double uniform(Rng& rng, const Range& r) {
  if (r.lo == r.hi) return r.lo;
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

inline double uniform(Rng& rng, double lo, double hi) { return uniform(rng, Range{lo, hi}); }

// ---------------------------------------------------------------------------
// Resolution

struct ResolutionSample {
  double coarse = 1.0;
  Vec3 per_axis = Vec3::Ones();
  Vec3 slice_thickness = Vec3::Ones();
};

inline ResolutionSample sample_resolution(Rng& rng, const AugmentConfig& cfg) {
  ResolutionSample r;
  r.coarse = uniform(rng, cfg.coarse_res_mm);
  for (int a = 0; a < 3; ++a) {
    double s = r.coarse;
    if (cfg.per_axis_sigma_mm > 0.0) {
      std::normal_distribution<double> normal(r.coarse, cfg.per_axis_sigma_mm);
      do {
        s = normal(rng);
      } while (s < 0.5 * r.coarse || s > 2.0 * r.coarse);
    }
    r.per_axis[a] = s;
  }
  for (int a = 0; a < 3; ++a) r.slice_thickness[a] = uniform(rng, cfg.thickness_ratio) * r.per_axis[a];
  return r;
}

// ---------------------------------------------------------------------------
// Partial-volume degradation

inline constexpr double kFwhmToSigma = 0.42466090014400953;  // 1 / (2 sqrt(2 ln 2))

namespace detail {

// Below this (in voxels) a Gaussian kernel is indistinguishable from a delta.
inline constexpr double kMinBlurSigmaVoxels = 1e-3;

inline std::vector<double> gaussian_kernel(double sigma_vox) {
  const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma_vox)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma_vox * sigma_vox));
  }
  return k;
}

}  // namespace detail

// Separable Gaussian blur with per-axis standard deviation in mm.  Kernel
// weights falling outside the volume are dropped and the rest renormalized,
// so constants are preserved up to the border.
template <typename V>
V gaussian_blur(const V& vol, const Vec3& sigma_mm) {
  using T = typename V::value_type;
  V out = vol;
  const VoxelGrid& g = vol.grid();
  const Vec3 vs = g.voxel_size();
  const std::size_t nc = static_cast<std::size_t>(vol.components());
  for (int axis = 0; axis < 3; ++axis) {
    const double sigma_vox = sigma_mm[axis] / vs[axis];
    if (!(sigma_vox > detail::kMinBlurSigmaVoxels)) continue;
    const std::vector<double> kernel = detail::gaussian_kernel(sigma_vox);
    const int radius = static_cast<int>(kernel.size() / 2);
    const int n = g.dim(axis);
    // Per-position normaliser for the truncated kernel.
    std::vector<double> inv_wsum(static_cast<std::size_t>(n));
    for (int pos = 0; pos < n; ++pos) {
      double w = 0.0;
      for (int t = std::max(-radius, -pos); t <= std::min(radius, n - 1 - pos); ++t) w += kernel[static_cast<std::size_t>(t + radius)];
      inv_wsum[static_cast<std::size_t>(pos)] = 1.0 / w;
    }
    const std::size_t stride = axis == 0 ? 1 : axis == 1 ? static_cast<std::size_t>(g.dim(0))
                                                        : static_cast<std::size_t>(g.dim(0)) * g.dim(1);
    const int o1 = axis == 0 ? 1 : 0, o2 = axis == 2 ? 1 : 2;
    std::vector<double> line(static_cast<std::size_t>(n) * nc);
    auto data = out.data();
    for (int b = 0; b < g.dim(o2); ++b) {
      for (int a = 0; a < g.dim(o1); ++a) {
        Index3 start{0, 0, 0};
        start[static_cast<std::size_t>(o1)] = a;
        start[static_cast<std::size_t>(o2)] = b;
        const std::size_t base = g.linear_index(start[0], start[1], start[2]);
        for (int pos = 0; pos < n; ++pos) {
          const std::size_t off = (base + static_cast<std::size_t>(pos) * stride) * nc;
          for (std::size_t c = 0; c < nc; ++c) line[static_cast<std::size_t>(pos) * nc + c] = static_cast<double>(data[off + c]);
        }
        for (int pos = 0; pos < n; ++pos) {
          const int lo = std::max(-radius, -pos), hi = std::min(radius, n - 1 - pos);
          const std::size_t off = (base + static_cast<std::size_t>(pos) * stride) * nc;
          for (std::size_t c = 0; c < nc; ++c) {
            double acc = 0.0;
            for (int t = lo; t <= hi; ++t) {
              acc += kernel[static_cast<std::size_t>(t + radius)] * line[static_cast<std::size_t>(pos + t) * nc + c];
            }
            data[off + c] = static_cast<T>(acc * inv_wsum[static_cast<std::size_t>(pos)]);
          }
        }
      }
    }
  }
  return out;
}

// Blur so the kernel FWHM equals the slice thickness, then sample onto the
// low-resolution grid spanning the same field of view.
template <typename V>
V simulate_acquisition(const V& vol, const ResolutionSample& res) {
  const Vec3 extent = vol.grid().extent_mm();
  for (int a = 0; a < 3; ++a) {
    if (!(res.per_axis[a] > 0.0) || res.per_axis[a] > extent[a]) {
      throw DegenerateResolutionError("degrade: voxel size " + std::to_string(res.per_axis[a]) +
                                      " mm is not within the field of view along axis " + std::to_string(a));
    }
    if (!(res.slice_thickness[a] >= 0.0)) throw DegenerateResolutionError("degrade: negative slice thickness");
  }
  const V blurred = gaussian_blur(vol, res.slice_thickness * kFwhmToSigma);
  return resample(blurred, regrid_same_fov(vol.grid(), res.per_axis), Interp::Trilinear);
}

template <typename V>
V degrade(const V& vol, const ResolutionSample& res, const VoxelGrid& out_grid) {
  return resample(simulate_acquisition(vol, res), out_grid, Interp::Trilinear);
}

// ---------------------------------------------------------------------------
// Geometric augmentation

// 5x5x5 control points, three values each, spanning the volume's field of
// view (node a sits at voxel index a/4 * (n-1) along each axis).
struct DeformationGrid {
  static constexpr int kNodes = 5;
  std::array<Vec3, kNodes * kNodes * kNodes> control{};

  DeformationGrid() { control.fill(Vec3::Zero()); }

  Vec3& node(int a, int b, int c) { return control[static_cast<std::size_t>(a + kNodes * (b + kNodes * c))]; }
  const Vec3& node(int a, int b, int c) const {
    return control[static_cast<std::size_t>(a + kNodes * (b + kNodes * c))];
  }

  static DeformationGrid constant(const Vec3& value) {
    DeformationGrid g;
    g.control.fill(value);
    return g;
  }

  static DeformationGrid uniform_random(Rng& rng, double lo, double hi) {
    DeformationGrid g;
    for (auto& v : g.control) {
      for (int c = 0; c < 3; ++c) v[c] = uniform(rng, lo, hi);
    }
    return g;
  }

  // Trilinear interpolation at control coordinates t in [0,4]^3 (clamped).
  Vec3 interpolate(const Vec3& t) const {
    int i0[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
      const double x = std::clamp(t[a], 0.0, static_cast<double>(kNodes - 1));
      i0[a] = std::min(static_cast<int>(std::floor(x)), kNodes - 2);
      f[a] = x - i0[a];
    }
    Vec3 out = Vec3::Zero();
    for (int corner = 0; corner < 8; ++corner) {
      const int dx = corner & 1, dy = (corner >> 1) & 1, dz = (corner >> 2) & 1;
      const double w = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
      out += w * node(i0[0] + dx, i0[1] + dy, i0[2] + dz);
    }
    return out;
  }

  bool is_zero() const {
    for (const auto& v : control) {
      if (!v.isZero(0.0)) return false;
    }
    return true;
  }
};

// Control coordinate of voxel index `ijk` on a grid with dims `n`.
inline Vec3 control_coordinate(const Index3& n, const Vec3& ijk) {
  Vec3 t;
  for (int a = 0; a < 3; ++a) {
    t[a] = n[static_cast<std::size_t>(a)] > 1 ? ijk[a] * (DeformationGrid::kNodes - 1) / (n[static_cast<std::size_t>(a)] - 1.0) : 0.0;
  }
  return t;
}

// Backward (pullback) map for the geometric augmentation.  Coordinates are
// mm along the voxel axes, centred on the volume centre.  An output point q
// samples the input at A^-1 (q + u(q)): the local displacement u is applied
// first, then the inverse of the global linear map A = s R.
class SpatialWarp {
 public:
  SpatialWarp(const VoxelGrid& grid, double scale, const Mat3& rotation, const DeformationGrid* displacement)
      : grid_(grid), rotation_(rotation) {
    spacing_ = grid.voxel_size();
    centre_ = Vec3(0.5 * (grid.dim(0) - 1), 0.5 * (grid.dim(1) - 1), 0.5 * (grid.dim(2) - 1));
    backward_linear_ = (scale * rotation).inverse();
    if (displacement != nullptr && !displacement->is_zero()) build_dense(*displacement);
  }

  bool has_displacement() const { return !dense_.empty(); }

  Vec3 source_voxel(std::size_t v) const { return source_voxel(grid_.index3(v), v); }

  Vec3 source_voxel(const Index3& ijk, std::size_t v) const {
    Vec3 q = spacing_.cwiseProduct(Vec3(ijk[0], ijk[1], ijk[2]) - centre_);
    if (has_displacement()) q += dense_[v];
    const Vec3 src = backward_linear_ * q;
    return src.cwiseQuotient(spacing_) + centre_;
  }

  // Jacobian of the backward local map q -> q + u(q), by central
  // differences (one-sided at the border).
  Mat3 backward_local_jacobian(std::size_t v) const { return backward_local_jacobian(grid_.index3(v)); }

  Mat3 backward_local_jacobian(const Index3& ijk) const {
    Mat3 j = Mat3::Identity();
    if (!has_displacement()) return j;
    for (int a = 0; a < 3; ++a) {
      const int n = grid_.dim(a);
      if (n < 2) continue;
      Index3 lo = ijk, hi = ijk;
      lo[static_cast<std::size_t>(a)] = std::max(0, ijk[static_cast<std::size_t>(a)] - 1);
      hi[static_cast<std::size_t>(a)] = std::min(n - 1, ijk[static_cast<std::size_t>(a)] + 1);
      const double h = (hi[static_cast<std::size_t>(a)] - lo[static_cast<std::size_t>(a)]) * spacing_[a];
      const Vec3 du = dense_[grid_.linear_index(hi[0], hi[1], hi[2])] - dense_[grid_.linear_index(lo[0], lo[1], lo[2])];
      j.col(a) += du / h;
    }
    return j;
  }

  // Preservation-of-principal-direction transform for a vector at output
  // voxel ijk: the forward Jacobian J_u^-1 * R (isotropic scale drops out
  // after normalisation).
  Mat3 vector_transform(const Index3& ijk) const {
    if (!has_displacement()) return rotation_;
    return backward_local_jacobian(ijk).inverse() * rotation_;
  }
  Mat3 vector_transform(std::size_t v) const { return vector_transform(grid_.index3(v)); }

  // Smallest Jacobian determinant of the local map over all voxels.
  double min_jacobian_determinant() const {
    if (!has_displacement()) return 1.0;
    double m = std::numeric_limits<double>::infinity();
    const Index3& n = grid_.dims();
    for (int k = 0; k < n[2]; ++k)
      for (int j = 0; j < n[1]; ++j)
        for (int i = 0; i < n[0]; ++i) m = std::min(m, backward_local_jacobian(Index3{i, j, k}).determinant());
    return m;
  }

  const VoxelGrid& grid() const { return grid_; }

 private:
  void build_dense(const DeformationGrid& d) {
    dense_.resize(grid_.voxel_count());
    const Index3& n = grid_.dims();
    std::size_t v = 0;
    for (int k = 0; k < n[2]; ++k)
      for (int j = 0; j < n[1]; ++j)
        for (int i = 0; i < n[0]; ++i) dense_[v++] = d.interpolate(control_coordinate(n, Vec3(i, j, k)));
  }

  VoxelGrid grid_;
  Mat3 rotation_;
  Mat3 backward_linear_;
  Vec3 spacing_;
  Vec3 centre_;
  std::vector<Vec3> dense_;
};

// The channels that are warped together.  FA and V1 travel separately
// because V1 needs reorientation before the RGB encoding.
struct AugmentChannels {
  ScalarVolume t1;
  ScalarVolume fa;
  VectorField v1;
  ProbVolume target;
};

inline void require_channel_grids(const AugmentChannels& ch) {
  require_same_grid(ch.t1.grid(), ch.fa.grid(), "augment (fa)");
  require_same_grid(ch.t1.grid(), ch.v1.grid(), "augment (v1)");
  require_same_grid(ch.t1.grid(), ch.target.grid(), "augment (target)");
}

// One pass over the output grid: the source point and its trilinear
// stencil are shared by every channel.  V1 is pulled back by nearest
// neighbour, reoriented and renormalised.
inline AugmentChannels apply_warp(const AugmentChannels& ch, const SpatialWarp& warp) {
  require_channel_grids(ch);
  const VoxelGrid& g = warp.grid();
  AugmentChannels out{ScalarVolume(g), ScalarVolume(g), VectorField(g, 3), ProbVolume(g, ch.target.components())};
  const Index3& n = g.dims();
  const VoxelGrid& src_grid = ch.t1.grid();
  TrilinearStencil st;
  std::size_t v = 0;
  for (int k = 0; k < n[2]; ++k) {
    for (int j = 0; j < n[1]; ++j) {
      for (int i = 0; i < n[0]; ++i, ++v) {
        const Index3 ijk{i, j, k};
        const Vec3 p = warp.source_voxel(ijk, v);
        if (!trilinear_stencil(src_grid, p, st)) {
          fill_out_of_field(out.target, v);
          continue;
        }
        apply_stencil(ch.t1, st, &out.t1.at(v));
        apply_stencil(ch.fa, st, &out.fa.at(v));
        auto dst = out.target.voxel(v);
        apply_stencil(ch.target, st, dst.data());
        renormalize_simplex(dst);

        const auto nv = nearest_voxel(src_grid, p);
        if (nv < 0) continue;
        const auto s = ch.v1.voxel(static_cast<std::size_t>(nv));
        const Vec3 in(s[0], s[1], s[2]);
        if (in.isZero(0.0)) continue;
        const Vec3 r = (warp.vector_transform(ijk) * in).normalized();
        auto d = out.v1.voxel(v);
        d[0] = r.x();
        d[1] = r.y();
        d[2] = r.z();
      }
    }
  }
  return out;
}

struct GlobalDraw {
  double scale = 1.0;
  Vec3 euler_deg = Vec3::Zero();
};

inline GlobalDraw draw_global(Rng& rng, const AugmentConfig& cfg) {
  GlobalDraw d;
  d.scale = uniform(rng, cfg.scale);
  for (int a = 0; a < 3; ++a) d.euler_deg[a] = uniform(rng, cfg.rotation_deg);
  return d;
}

inline AugmentChannels apply_global(const AugmentChannels& ch, const GlobalDraw& d) {
  return apply_warp(ch, SpatialWarp(ch.t1.grid(), d.scale, euler_rotation_deg(d.euler_deg), nullptr));
}

inline AugmentChannels global_augment(const AugmentChannels& ch, Rng& rng, const AugmentConfig& cfg) {
  return apply_global(ch, draw_global(rng, cfg));
}

// Throws FoldingError if the displacement folds anywhere on the grid.
inline SpatialWarp make_local_warp(const VoxelGrid& grid, const DeformationGrid& displacement) {
  SpatialWarp warp(grid, 1.0, Mat3::Identity(), &displacement);
  if (!(warp.min_jacobian_determinant() > 0.0)) throw FoldingError("local deformation folds (Jacobian determinant <= 0)");
  return warp;
}

inline AugmentChannels apply_local(const AugmentChannels& ch, const DeformationGrid& displacement) {
  return apply_warp(ch, make_local_warp(ch.t1.grid(), displacement));
}

// Draws control displacements until a non-folding one is found.
inline DeformationGrid draw_local(Rng& rng, const AugmentConfig& cfg, const VoxelGrid& grid) {
  const double amp = cfg.local_displacement_mm;
  for (int attempt = 0; attempt < cfg.max_fold_attempts; ++attempt) {
    DeformationGrid d = DeformationGrid::uniform_random(rng, -amp, amp);
    if (SpatialWarp(grid, 1.0, Mat3::Identity(), &d).min_jacobian_determinant() > 0.0) return d;
  }
  throw FoldingError("local deformation folded in " + std::to_string(cfg.max_fold_attempts) + " attempts");
}

inline AugmentChannels local_deform(const AugmentChannels& ch, Rng& rng, const AugmentConfig& cfg) {
  return apply_local(ch, draw_local(rng, cfg, ch.t1.grid()));
}

// ---------------------------------------------------------------------------
// Orientation noise

inline DeformationGrid draw_orientation_angles(Rng& rng, const AugmentConfig& cfg) {
  return DeformationGrid::uniform_random(rng, cfg.local_rotation_deg.lo, cfg.local_rotation_deg.hi);
}

// Rotates each vector by the Euler rotation interpolated from `angles_deg`.
inline VectorField apply_orientation(const VectorField& v1, const DeformationGrid& angles_deg) {
  VectorField out = v1;
  const Index3& n = v1.grid().dims();
  for (std::size_t v = 0; v < v1.voxel_count(); ++v) {
    auto d = out.voxel(v);
    const Vec3 in(d[0], d[1], d[2]);
    if (in.isZero(0.0)) continue;
    const Index3 ijk = v1.grid().index3(v);
    const Vec3 ang = angles_deg.interpolate(control_coordinate(n, Vec3(ijk[0], ijk[1], ijk[2])));
    const Vec3 r = euler_rotation_deg(ang) * in;
    d[0] = r.x();
    d[1] = r.y();
    d[2] = r.z();
  }
  return out;
}

inline VectorField orientation_augment(const VectorField& v1, Rng& rng, const AugmentConfig& cfg) {
  return apply_orientation(v1, draw_orientation_angles(rng, cfg));
}

// ---------------------------------------------------------------------------
// Speckles

// Returns the number of voxels replaced.
inline std::size_t speckle_in_place(RgbVolume& rgb, Rng& rng, const AugmentConfig& cfg) {
  if (cfg.speckle_prob <= 0.0) return 0;
  const std::size_t n = rgb.voxel_count();
  std::size_t count = 0;
  auto replace = [&](std::size_t v) {
    Vec3 u;
    do {
      for (int c = 0; c < 3; ++c) u[c] = uniform(rng, 0.0, 1.0);
    } while (u.norm() < 1e-3);
    const Vec3 val = uniform(rng, cfg.speckle_fa) * u.normalized();
    auto d = rgb.voxel(v);
    d[0] = val.x();
    d[1] = val.y();
    d[2] = val.z();
    ++count;
  };
  if (cfg.speckle_prob >= 1.0) {
    for (std::size_t v = 0; v < n; ++v) replace(v);
    return count;
  }
  // Gaps between successive selected voxels are geometric.
  std::geometric_distribution<std::uint64_t> gap(cfg.speckle_prob);
  std::uint64_t v = gap(rng);
  while (v < n) {
    replace(static_cast<std::size_t>(v));
    const std::uint64_t step = gap(rng);
    if (step >= n) break;
    v += step + 1;
  }
  return count;
}

inline RgbVolume speckle(const RgbVolume& rgb, Rng& rng, const AugmentConfig& cfg) {
  RgbVolume out = rgb;
  speckle_in_place(out, rng, cfg);
  return out;
}

// ---------------------------------------------------------------------------
// Intensity

enum class IntensityKind { T1, Fa };

struct IntensityDraw {
  double brightness = 0.0;
  double contrast = 1.0;
  double noise_sigma = 0.0;
  double gamma = 1.0;
};

inline IntensityDraw draw_intensity(Rng& rng, const AugmentConfig& cfg, IntensityKind kind) {
  IntensityDraw d;
  if (kind == IntensityKind::T1) {
    d.brightness = uniform(rng, cfg.brightness);
    d.contrast = uniform(rng, cfg.contrast);
  }
  d.noise_sigma = uniform(rng, cfg.noise_sigma);
  d.gamma = std::exp(uniform(rng, std::log(cfg.gamma.lo), std::log(cfg.gamma.hi)));
  return d;
}

namespace detail {

inline double noisy_gamma(double x, const IntensityDraw& d, Rng& rng, std::normal_distribution<double>* noise) {
  if (noise != nullptr) x += (*noise)(rng);
  x = std::clamp(x, 0.0, 1.0);
  return d.gamma == 1.0 ? x : std::pow(x, d.gamma);
}

}  // namespace detail

// Brightness/contrast (T1 only, about the 0.5 midpoint), then additive
// Gaussian noise, clipping to [0,1] and a gamma transform.
inline ScalarVolume apply_intensity(const ScalarVolume& vol, const IntensityDraw& d, Rng& rng, IntensityKind kind) {
  ScalarVolume out = vol;
  std::optional<std::normal_distribution<double>> noise;
  if (d.noise_sigma > 0.0) noise.emplace(0.0, d.noise_sigma);
  for (auto& x : out.data()) {
    if (kind == IntensityKind::T1) x = std::clamp(((x + d.brightness) - 0.5) * d.contrast + 0.5, 0.0, 1.0);
    x = detail::noisy_gamma(x, d, rng, noise ? &*noise : nullptr);
  }
  return out;
}

inline ScalarVolume intensity_augment(const ScalarVolume& vol, Rng& rng, const AugmentConfig& cfg, IntensityKind kind) {
  const IntensityDraw d = draw_intensity(rng, cfg, kind);
  return apply_intensity(vol, d, rng, kind);
}

// FA-channel augmentation carried on an RGB image: noise and gamma act on
// the per-voxel norm and the colour direction is kept.  Black voxels stay
// black (no hue to preserve).
inline RgbVolume apply_intensity(const RgbVolume& rgb, const IntensityDraw& d, Rng& rng) {
  RgbVolume out = rgb;
  std::optional<std::normal_distribution<double>> noise;
  if (d.noise_sigma > 0.0) noise.emplace(0.0, d.noise_sigma);
  for (std::size_t v = 0; v < out.voxel_count(); ++v) {
    auto p = out.voxel(v);
    const double norm = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    if (norm == 0.0) continue;
    const double target = detail::noisy_gamma(std::min(norm, 1.0), d, rng, noise ? &*noise : nullptr);
    const double f = target / norm;
    for (int c = 0; c < 3; ++c) p[c] *= f;
  }
  return out;
}

inline RgbVolume intensity_augment(const RgbVolume& rgb, Rng& rng, const AugmentConfig& cfg) {
  const IntensityDraw d = draw_intensity(rng, cfg, IntensityKind::Fa);
  return apply_intensity(rgb, d, rng);
}

}  // namespace thalsynth
