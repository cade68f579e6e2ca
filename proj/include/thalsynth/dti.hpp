#pragma once

// Single-tensor diffusion model: log-linear fit, FA / V1, log-Euclidean
// resampling and the directionally-encoded colour (RGB) image.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "thalsynth/errors.hpp"
#include "thalsynth/volgrid.hpp"

namespace thalsynth {

// Smallest eigenvalue (mm^2/s) allowed before taking a matrix logarithm.
inline constexpr double kMinEigenvalue = 1e-9;

// Measurements with b at or below this are treated as unweighted.
inline constexpr double kB0Threshold = 50.0;

struct GradientEntry {
  double b_value = 0.0;  // s/mm^2
  Vec3 direction = Vec3::Zero();
};

class GradientTable {
 public:
  GradientTable() = default;

  explicit GradientTable(std::vector<GradientEntry> entries) : entries_(std::move(entries)) {
    for (const auto& e : entries_) {
      if (!std::isfinite(e.b_value) || e.b_value < 0.0) throw InvalidInputError("gradient table: invalid b-value");
      if (e.b_value > kB0Threshold && std::abs(e.direction.norm() - 1.0) > 1e-6) {
        throw InvalidInputError("gradient table: diffusion-weighted direction is not unit length");
      }
    }
  }

  const std::vector<GradientEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t unweighted_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.b_value <= kB0Threshold ? 1 : 0;
    return n;
  }

 private:
  std::vector<GradientEntry> entries_;
};

// ---------------------------------------------------------------------------
// Symmetric 3x3 helpers.  Component order is Dxx Dyy Dzz Dxy Dxz Dyz.

inline Mat3 unpack_tensor(std::span<const double> c) {
  Mat3 d;
  d << c[0], c[3], c[4], c[3], c[1], c[5], c[4], c[5], c[2];
  return d;
}

inline void pack_tensor(const Mat3& d, std::span<double> c) {
  c[0] = d(0, 0);
  c[1] = d(1, 1);
  c[2] = d(2, 2);
  c[3] = 0.5 * (d(0, 1) + d(1, 0));
  c[4] = 0.5 * (d(0, 2) + d(2, 0));
  c[5] = 0.5 * (d(1, 2) + d(2, 1));
}

struct SymEigen {
  Vec3 values;   // descending
  Mat3 vectors;  // column i pairs with values[i]
};

inline SymEigen sym_eigen(const Mat3& d) {
  if (d(0, 1) == 0.0 && d(0, 2) == 0.0 && d(1, 2) == 0.0) {
    // Diagonal (background voxels are exactly isotropic): no solver needed.
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return d(a, a) > d(b, b); });
    SymEigen out;
    out.vectors.setZero();
    for (int c = 0; c < 3; ++c) {
      out.values[c] = d(order[static_cast<std::size_t>(c)], order[static_cast<std::size_t>(c)]);
      out.vectors(order[static_cast<std::size_t>(c)], c) = 1.0;
    }
    return out;
  }
  Eigen::SelfAdjointEigenSolver<Mat3> es(d);
  // Eigen sorts ascending.
  SymEigen out;
  out.values = es.eigenvalues().reverse();
  out.vectors = es.eigenvectors().rowwise().reverse();
  return out;
}

// First nonzero component positive.
inline Vec3 canonical_sign(Vec3 v) {
  for (int a = 0; a < 3; ++a) {
    if (v[a] != 0.0) {
      if (v[a] < 0.0) v = -v;
      break;
    }
  }
  return v;
}

inline Mat3 spd_project(const Mat3& d, double min_eig = kMinEigenvalue) {
  SymEigen e = sym_eigen(d);
  const Vec3 vals = e.values.cwiseMax(min_eig);
  return e.vectors * vals.asDiagonal() * e.vectors.transpose();
}

// Matrix log of the SPD projection of `d`.
inline Mat3 spd_log(const Mat3& d, double min_eig = kMinEigenvalue) {
  SymEigen e = sym_eigen(d);
  const Vec3 logs = e.values.cwiseMax(min_eig).array().log();
  return e.vectors * logs.asDiagonal() * e.vectors.transpose();
}

inline Mat3 sym_exp(const Mat3& l) {
  SymEigen e = sym_eigen(l);
  const Vec3 exps = e.values.array().exp();
  return e.vectors * exps.asDiagonal() * e.vectors.transpose();
}

inline double fractional_anisotropy(const Mat3& d) {
  const double norm = d.norm();
  if (norm == 0.0) return 0.0;
  const Mat3 dev = d - (d.trace() / 3.0) * Mat3::Identity();
  return std::clamp(std::sqrt(1.5) * dev.norm() / norm, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Fitting

namespace detail {

// Row for unknowns (ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz).
inline Eigen::Matrix<double, 1, 7> dti_design_row(const GradientEntry& e) {
  const double b = e.b_value;
  const Vec3& g = e.direction;
  Eigen::Matrix<double, 1, 7> row;
  row << 1.0, -b * g.x() * g.x(), -b * g.y() * g.y(), -b * g.z() * g.z(), -2.0 * b * g.x() * g.y(),
      -2.0 * b * g.x() * g.z(), -2.0 * b * g.y() * g.z();
  return row;
}

}  // namespace detail

// Ordinary least-squares solver for the log-linear tensor model.  The design
// matrix is shared by every voxel, so its pseudo-inverse is built once.
class DtiFitter {
 public:
  explicit DtiFitter(const GradientTable& gtab) {
    const auto n = static_cast<Eigen::Index>(gtab.size());
    if (n < 7) {
      throw UnderdeterminedFitError("underdetermined fit: " + std::to_string(n) +
                                    " measurements, at least 7 are required");
    }
    Eigen::MatrixXd design(n, 7);
    for (Eigen::Index i = 0; i < n; ++i) design.row(i) = detail::dti_design_row(gtab.entries()[static_cast<std::size_t>(i)]);
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(design);
    cod.setThreshold(1e-10);
    if (cod.rank() < 7) {
      throw UnderdeterminedFitError("underdetermined fit: design matrix has rank " + std::to_string(cod.rank()) +
                                    " < 7 (need six non-collinear weighted directions and a b=0)");
    }
    if (gtab.unweighted_count() == 0) {
      throw InvalidInputError("gradient table has no b=0 measurement");
    }
    pinv_ = cod.pseudoInverse();
    log_signal_.resize(n);
  }

  // Returns false (zero tensor) when any signal is non-positive or non-finite.
  bool fit(std::span<const double> signals, std::span<double> tensor_out) {
    for (Eigen::Index i = 0; i < log_signal_.size(); ++i) {
      const double s = signals[static_cast<std::size_t>(i)];
      if (!(s > 0.0) || !std::isfinite(s)) {
        std::fill(tensor_out.begin(), tensor_out.end(), 0.0);
        return false;
      }
      log_signal_[i] = std::log(s);
    }
    const Eigen::Matrix<double, 7, 1> x = pinv_ * log_signal_;
    for (int c = 0; c < 6; ++c) tensor_out[static_cast<std::size_t>(c)] = x[c + 1];
    return true;
  }

 private:
  Eigen::Matrix<double, 7, Eigen::Dynamic> pinv_;
  Eigen::VectorXd log_signal_;
};

inline TensorVolume fit_dti(std::span<const ScalarVolume> dwi, const GradientTable& gtab) {
  if (dwi.size() != gtab.size()) {
    throw InvalidInputError("fit_dti: " + std::to_string(dwi.size()) + " volumes but " +
                            std::to_string(gtab.size()) + " gradient entries");
  }
  DtiFitter fitter(gtab);
  const VoxelGrid& grid = dwi.front().grid();
  for (const auto& v : dwi) require_same_grid(grid, v.grid(), "fit_dti");

  TensorVolume out(grid, 6);
  std::vector<double> signals(dwi.size());
  for (std::size_t v = 0; v < grid.voxel_count(); ++v) {
    for (std::size_t m = 0; m < dwi.size(); ++m) signals[m] = dwi[m].at(v);
    fitter.fit(signals, out.voxel(v));
  }
  return out;
}

// Noiseless Stejskal-Tanner signal S0 * exp(-b g^T D g).
inline double simulate_signal(double s0, const Mat3& d, const GradientEntry& e) {
  return s0 * std::exp(-e.b_value * e.direction.dot(d * e.direction));
}

// ---------------------------------------------------------------------------
// Derived maps

struct TensorMetrics {
  ScalarVolume fa;
  VectorField v1;
};

inline TensorMetrics tensor_metrics(const TensorVolume& tensors) {
  TensorMetrics m{ScalarVolume(tensors.grid(), 1), VectorField(tensors.grid(), 3)};
  for (std::size_t v = 0; v < tensors.voxel_count(); ++v) {
    const Mat3 d = unpack_tensor(tensors.voxel(v));
    if (d.norm() == 0.0) continue;
    m.fa.at(v) = fractional_anisotropy(d);
    const Vec3 e1 = canonical_sign(sym_eigen(d).vectors.col(0).normalized());
    auto out = m.v1.voxel(v);
    out[0] = e1.x();
    out[1] = e1.y();
    out[2] = e1.z();
  }
  return m;
}

// Interpolates tensors through their matrix logarithms.  Outside the source
// field of view the output is kMinEigenvalue * I.
inline TensorVolume resample_tensor_log_euclidean(const TensorVolume& tensors, const VoxelGrid& target) {
  if (target.voxel_count() == 0) throw InvalidGridError("resample_tensor_log_euclidean: degenerate target grid");
  for (double c : tensors.data()) {
    if (!std::isfinite(c)) throw InvalidInputError("resample_tensor_log_euclidean: non-finite tensor component");
  }

  TensorVolume logs(tensors.grid(), 6);
  for (std::size_t v = 0; v < tensors.voxel_count(); ++v) {
    pack_tensor(spd_log(unpack_tensor(tensors.voxel(v))), logs.voxel(v));
  }

  TensorVolume out(target, 6);
  const Affine m = tensors.grid().inverse_affine() * target.affine();
  const Mat3 floor_tensor = kMinEigenvalue * Mat3::Identity();
  double buf[6];
  const Index3& n = target.dims();
  for (int k = 0; k < n[2]; ++k) {
    for (int j = 0; j < n[1]; ++j) {
      for (int i = 0; i < n[0]; ++i) {
        const Vec3 p = (m * Eigen::Vector4d(i, j, k, 1.0)).head<3>();
        auto dst = out.voxel(target.linear_index(i, j, k));
        if (!sample_trilinear(logs, p, buf)) {
          pack_tensor(floor_tensor, dst);
          continue;
        }
        pack_tensor(sym_exp(unpack_tensor(std::span<const double>(buf, 6))), dst);
      }
    }
  }
  return out;
}

inline RgbVolume compose_rgb(const ScalarVolume& fa, const VectorField& v1) {
  require_same_grid(fa.grid(), v1.grid(), "compose_rgb");
  RgbVolume rgb(fa.grid(), 3);
  for (std::size_t v = 0; v < fa.voxel_count(); ++v) {
    const double f = fa.at(v);
    const auto d = v1.voxel(v);
    auto out = rgb.voxel(v);
    for (int c = 0; c < 3; ++c) out[c] = f * std::abs(d[c]);
  }
  return rgb;
}

}  // namespace thalsynth
