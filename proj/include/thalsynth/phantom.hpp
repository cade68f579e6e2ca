#pragma once

// Synthetic test case: a T1 head with two four-nucleus "thalami", a
// white-matter mask, a simulated single-shell DWI series at lower resolution
// and several slightly disagreeing candidate segmentations.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "thalsynth/dti.hpp"
#include "thalsynth/nifti.hpp"
#include "thalsynth/pipeline.hpp"
#include "thalsynth/supervise.hpp"
#include "thalsynth/volgrid.hpp"

namespace thalsynth::phantom {

struct Options {
  int dim = 160;
  double spacing_mm = 0.7;
  double dwi_spacing_mm = 1.4;
  int candidates = 6;
  int directions = 12;
  double b_value = 1000.0;
};

// Left nuclei 8101..8104, right 8201..8204.  Manual groups pair the
// anterior nuclei and lump the posterior ones; nuclear groups split
// anterior from posterior.
inline LabelTaxonomy taxonomy() {
  std::vector<FineLabel> labels;
  const char* nuclei[] = {"AntSup", "AntInf", "PostSup", "PostInf"};
  const int manual[] = {1, 2, 3, 3};
  const int nuclear[] = {1, 1, 2, 2};
  for (int h = 0; h < 2; ++h) {
    for (int n = 0; n < 4; ++n) {
      FineLabel l;
      l.id = (h == 0 ? 8101 : 8201) + n;
      l.nucleus = nuclei[n];
      l.name = std::string(h == 0 ? "Left-" : "Right-") + nuclei[n];
      l.hemisphere = h == 0 ? Hemisphere::Left : Hemisphere::Right;
      l.manual_group = manual[n];
      l.nuclear_group = nuclear[n];
      labels.push_back(l);
    }
  }
  return LabelTaxonomy(std::move(labels));
}

// Well-spread directions on the upper hemisphere (golden-angle spiral).
inline GradientTable gradient_table(int directions, double b_value) {
  std::vector<GradientEntry> e;
  e.push_back({0.0, Vec3::Zero()});
  const double golden = 3.14159265358979323846 * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < directions; ++i) {
    const double z = 1.0 - (i + 0.5) / directions;
    const double r = std::sqrt(1.0 - z * z);
    e.push_back({b_value, Vec3(r * std::cos(golden * i), r * std::sin(golden * i), z).normalized()});
  }
  return GradientTable(std::move(e));
}

namespace detail {

inline VoxelGrid centred_grid(int dim, double spacing) {
  const double o = -0.5 * (dim - 1) * spacing;
  return VoxelGrid::isotropic({dim, dim, dim}, spacing, Vec3(o, o, o));
}

inline double brain_radius(const Vec3& p) {
  return std::sqrt(std::pow(p.x() / 48.0, 2) + std::pow(p.y() / 52.0, 2) + std::pow(p.z() / 44.0, 2));
}

// Label id at world point p; `jitter` moves the internal boundaries and the
// outline by a fraction of a millimetre per candidate.
inline std::int32_t thalamus_label(const Vec3& p, double jitter) {
  for (int h = 0; h < 2; ++h) {
    const double cx = h == 0 ? -11.0 : 11.0;
    const Vec3 q(p.x() - cx, p.y(), p.z());
    const double r = std::sqrt(std::pow(q.x() / (9.0 + 0.5 * jitter), 2) + std::pow(q.y() / (15.0 + jitter), 2) +
                               std::pow(q.z() / (9.0 - 0.5 * jitter), 2));
    if (r > 1.0) continue;
    const bool anterior = q.y() > 1.5 * jitter;
    const bool superior = q.z() > -jitter;
    const int nucleus = anterior ? (superior ? 0 : 1) : (superior ? 2 : 3);
    return (h == 0 ? 8101 : 8201) + nucleus;
  }
  return 0;
}

inline Mat3 tissue_tensor(const Vec3& p) {
  const double r = brain_radius(p);
  if (r > 1.0) return Mat3::Zero();
  if (thalamus_label(p, 0.0) != 0) {
    const Vec3 e1 = Vec3(0.2, 1.0, 0.3).normalized();
    return 0.5e-3 * Mat3::Identity() + 0.7e-3 * e1 * e1.transpose();
  }
  if (r > 0.85) return 0.8e-3 * Mat3::Identity();
  // White matter circulating around the z axis.
  Vec3 e1(-p.y(), p.x(), 0.4 * std::hypot(p.x(), p.y()));
  if (e1.norm() < 1e-6) e1 = Vec3::UnitZ();
  e1.normalize();
  return 0.3e-3 * Mat3::Identity() + 1.4e-3 * e1 * e1.transpose();
}

}  // namespace detail

struct Files {
  std::string manifest;
  std::string taxonomy;
};

// Writes one case plus `manifest.json` and `taxonomy.tsv` into `dir`.
inline Files write_case(const std::filesystem::path& dir, const std::string& id, const Options& opt = {}) {
  std::filesystem::create_directories(dir);
  const VoxelGrid grid = detail::centred_grid(opt.dim, opt.spacing_mm);
  const int dwi_dim = static_cast<int>(std::lround(opt.dim * opt.spacing_mm / opt.dwi_spacing_mm));
  const VoxelGrid dwi_grid = detail::centred_grid(dwi_dim, opt.dwi_spacing_mm);

  ScalarVolume t1(grid);
  LabelVolume wm(grid);
  std::vector<LabelVolume> cands(static_cast<std::size_t>(opt.candidates), LabelVolume(grid));
  for (std::size_t v = 0; v < grid.voxel_count(); ++v) {
    const Index3 ijk = grid.index3(v);
    const Vec3 p = voxel_to_world(grid, Vec3(ijk[0], ijk[1], ijk[2]));
    const double r = detail::brain_radius(p);
    const bool thal = detail::thalamus_label(p, 0.0) != 0;
    double intensity = 0.0;
    if (r <= 1.0) {
      intensity = thal ? 90.0 : (r > 0.85 ? 70.0 : 110.0);
      intensity *= 1.0 + 0.03 * std::sin(0.11 * p.x()) * std::cos(0.07 * p.y());
      if (!thal && r <= 0.85) wm.at(v) = 1;
    }
    t1.at(v) = intensity;
    for (int c = 0; c < opt.candidates; ++c) {
      const double jitter = 0.6 * std::sin(1.7 * c + 0.3);
      cands[static_cast<std::size_t>(c)].at(v) = detail::thalamus_label(p, jitter);
    }
  }

  const GradientTable gtab = gradient_table(opt.directions, opt.b_value);
  std::vector<ScalarVolume> dwi(gtab.size(), ScalarVolume(dwi_grid));
  for (std::size_t v = 0; v < dwi_grid.voxel_count(); ++v) {
    const Index3 ijk = dwi_grid.index3(v);
    const Vec3 p = voxel_to_world(dwi_grid, Vec3(ijk[0], ijk[1], ijk[2]));
    if (detail::brain_radius(p) > 1.0) continue;
    const Mat3 d = detail::tissue_tensor(p);
    for (std::size_t m = 0; m < gtab.size(); ++m) dwi[m].at(v) = simulate_signal(1000.0, d, gtab.entries()[m]);
  }

  const auto path = [&](const std::string& name) { return (dir / name).string(); };
  nifti::save(path(id + "_t1.nii.gz"), t1);
  nifti::save(path(id + "_wm.nii.gz"), wm);
  nifti::save_series(path(id + "_dwi.nii.gz"), dwi);
  save_gradient_table(gtab, path(id + ".bval"), path(id + ".bvec"));
  json cand_list = json::array();
  for (int c = 0; c < opt.candidates; ++c) {
    const std::string name = id + "_seg" + std::to_string(c) + ".nii.gz";
    nifti::save(path(name), cands[static_cast<std::size_t>(c)]);
    cand_list.push_back(name);
  }
  {
    std::ofstream tax(path("taxonomy.tsv"));
    tax << taxonomy().serialize();
  }
  const json manifest{
      {"taxonomy", "taxonomy.tsv"},
      {"cases",
       {{{"id", id},
         {"t1", id + "_t1.nii.gz"},
         {"wm_mask", id + "_wm.nii.gz"},
         {"shells", {{{"dwi", id + "_dwi.nii.gz"}, {"bval", id + ".bval"}, {"bvec", id + ".bvec"}}}},
         {"candidates", cand_list}}}},
  };
  std::ofstream m(path("manifest.json"));
  m << manifest.dump(2) << '\n';
  if (!m) throw IoError("cannot write phantom manifest");
  return {path("manifest.json"), path("taxonomy.tsv")};
}

}  // namespace thalsynth::phantom
