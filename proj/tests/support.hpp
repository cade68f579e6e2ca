#pragma once

#include <Eigen/Geometry>

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "thalsynth/phantom.hpp"
#include "thalsynth/thalsynth.hpp"

namespace testing_support {

using namespace thalsynth;

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) {
    path = std::filesystem::temp_directory_path() / ("thalsynth_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

// Eigenvalues drawn from a typical brain range, mm^2/s.
inline Mat3 random_spd(std::mt19937_64& rng, double lo = 0.1e-3, double hi = 3.0e-3) {
  std::uniform_real_distribution<double> u(lo, hi);
  const Mat3 r = random_rotation(rng);
  return r * Vec3(u(rng), u(rng), u(rng)).asDiagonal() * r.transpose();
}

// FA straight from the eigenvalues.
inline double fa_from_eigenvalues(double l1, double l2, double l3) {
  const double num = (l1 - l2) * (l1 - l2) + (l2 - l3) * (l2 - l3) + (l3 - l1) * (l3 - l1);
  const double den = l1 * l1 + l2 * l2 + l3 * l3;
  return std::sqrt(0.5 * num / den);
}

inline GradientTable twelve_direction_table(double b = 1000.0) {
  std::vector<GradientEntry> e{{0.0, Vec3::Zero()}};
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  // Icosahedron vertices, one of each antipodal pair.
  const Vec3 dirs[] = {{0, 1, phi}, {0, -1, phi}, {1, phi, 0}, {-1, phi, 0}, {phi, 0, 1}, {-phi, 0, 1}};
  for (const auto& d : dirs) e.push_back({b, d.normalized()});
  // Midpoints of a few edges to reach twelve.
  for (int i = 0; i < 6; ++i) e.push_back({b, (dirs[i] + dirs[(i + 1) % 6]).normalized()});
  return GradientTable(std::move(e));
}

// Taxonomy with `pairs` left/right nuclei; manual groups of two nuclei,
// nuclear groups of three.
inline LabelTaxonomy small_taxonomy(int pairs) {
  std::vector<FineLabel> labels;
  for (int h = 0; h < 2; ++h) {
    for (int n = 0; n < pairs; ++n) {
      FineLabel l;
      l.id = (h == 0 ? 100 : 200) + n + 1;
      l.nucleus = "N" + std::to_string(n + 1);
      l.name = (h == 0 ? "L-" : "R-") + l.nucleus;
      l.hemisphere = h == 0 ? Hemisphere::Left : Hemisphere::Right;
      l.manual_group = n / 2 + 1;
      l.nuclear_group = n / 3 + 1;
      labels.push_back(l);
    }
  }
  return LabelTaxonomy(std::move(labels));
}

inline std::string default_taxonomy_path() { return std::string(THALSYNTH_SOURCE_DIR) + "/data/taxonomy_default.tsv"; }

}  // namespace testing_support
