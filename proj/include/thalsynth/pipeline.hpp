#pragma once

// Orchestration: configuration and manifest files, gradient tables, T1
// normalisation, thalamus-containing crops, deterministic per-sample random
// streams and parallel batch generation.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "thalsynth/dti.hpp"
#include "thalsynth/errors.hpp"
#include "thalsynth/nifti.hpp"
#include "thalsynth/supervise.hpp"
#include "thalsynth/synthgen.hpp"
#include "thalsynth/volgrid.hpp"

namespace thalsynth {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  AugmentConfig augment;
  double output_spacing_mm = 0.7;
  int crop_size = 128;
  // A voxel is thalamic when its summed foreground probability exceeds this.
  double foreground_threshold = 0.5;

  bool operator==(const PipelineConfig&) const = default;

  void validate() const {
    augment.validate();
    if (!(output_spacing_mm > 0.0)) throw ConfigError("config: output_spacing_mm must be positive");
    if (crop_size < 1) throw ConfigError("config: crop_size must be >= 1");
    if (!(foreground_threshold >= 0.0 && foreground_threshold < 1.0)) {
      throw ConfigError("config: foreground_threshold must be in [0, 1)");
    }
  }
};

namespace detail {

inline json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

inline Range range_from(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw ConfigError("config: '" + key + "' must be a two-element numeric array [lo, hi]");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

inline double number_from(const json& j, const std::string& key) {
  if (!j.is_number()) throw ConfigError("config: '" + key + "' must be a number");
  return j.get<double>();
}

inline int int_from(const json& j, const std::string& key) {
  if (!j.is_number_integer()) throw ConfigError("config: '" + key + "' must be an integer");
  return j.get<int>();
}

}  // namespace detail

inline json to_json(const AugmentConfig& c) {
  using detail::range_json;
  return json{
      {"coarse_res_mm", range_json(c.coarse_res_mm)},
      {"per_axis_sigma_mm", c.per_axis_sigma_mm},
      {"thickness_ratio", range_json(c.thickness_ratio)},
      {"scale", range_json(c.scale)},
      {"rotation_deg", range_json(c.rotation_deg)},
      {"local_displacement_mm", c.local_displacement_mm},
      {"max_fold_attempts", c.max_fold_attempts},
      {"local_rotation_deg", range_json(c.local_rotation_deg)},
      {"speckle_prob", c.speckle_prob},
      {"speckle_fa", range_json(c.speckle_fa)},
      {"brightness", range_json(c.brightness)},
      {"contrast", range_json(c.contrast)},
      {"noise_sigma", range_json(c.noise_sigma)},
      {"gamma", range_json(c.gamma)},
  };
}

// Missing keys keep their defaults; unknown keys are rejected.
inline AugmentConfig augment_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: 'augment' must be an object");
  AugmentConfig c;
  for (const auto& [key, val] : j.items()) {
    using namespace detail;
    if (key == "coarse_res_mm") c.coarse_res_mm = range_from(val, key);
    else if (key == "per_axis_sigma_mm") c.per_axis_sigma_mm = number_from(val, key);
    else if (key == "thickness_ratio") c.thickness_ratio = range_from(val, key);
    else if (key == "scale") c.scale = range_from(val, key);
    else if (key == "rotation_deg") c.rotation_deg = range_from(val, key);
    else if (key == "local_displacement_mm") c.local_displacement_mm = number_from(val, key);
    else if (key == "max_fold_attempts") c.max_fold_attempts = int_from(val, key);
    else if (key == "local_rotation_deg") c.local_rotation_deg = range_from(val, key);
    else if (key == "speckle_prob") c.speckle_prob = number_from(val, key);
    else if (key == "speckle_fa") c.speckle_fa = range_from(val, key);
    else if (key == "brightness") c.brightness = range_from(val, key);
    else if (key == "contrast") c.contrast = range_from(val, key);
    else if (key == "noise_sigma") c.noise_sigma = range_from(val, key);
    else if (key == "gamma") c.gamma = range_from(val, key);
    else throw ConfigError("config: unknown augment field '" + key + "'");
  }
  return c;
}

inline json to_json(const PipelineConfig& c) {
  return json{{"augment", to_json(c.augment)},
              {"output_spacing_mm", c.output_spacing_mm},
              {"crop_size", c.crop_size},
              {"foreground_threshold", c.foreground_threshold}};
}

inline PipelineConfig pipeline_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  PipelineConfig c;
  for (const auto& [key, val] : j.items()) {
    if (key == "augment") c.augment = augment_config_from_json(val);
    else if (key == "output_spacing_mm") c.output_spacing_mm = detail::number_from(val, key);
    else if (key == "crop_size") c.crop_size = detail::int_from(val, key);
    else if (key == "foreground_threshold") c.foreground_threshold = detail::number_from(val, key);
    else throw ConfigError("config: unknown field '" + key + "'");
  }
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path + "': malformed JSON: " + e.what());
  }
  try {
    return pipeline_config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

// 64-bit FNV-1a of the canonical JSON form, as 16 hex digits.
inline std::string config_hash(const PipelineConfig& c) {
  const std::string s = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

// ---------------------------------------------------------------------------
// Gradient tables (bval / bvec text files)

namespace detail {

inline std::vector<std::vector<double>> read_number_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::vector<double> row;
    std::string tok;
    while (ss >> tok) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw IoError("'" + path + "': not a number: '" + tok + "'");
      }
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

// b-values: whitespace separated, any line layout.  Directions: either one
// "x y z" triple per line, or the FSL layout of three rows with one column
// per measurement.  Weighted directions are renormalised when they are
// within 1% of unit length (text files carry limited precision).
inline GradientTable load_gradient_table(const std::string& bval_path, const std::string& bvec_path) {
  std::vector<double> bvals;
  for (const auto& row : detail::read_number_rows(bval_path)) bvals.insert(bvals.end(), row.begin(), row.end());
  const auto rows = detail::read_number_rows(bvec_path);
  const std::size_t n = bvals.size();

  std::vector<Vec3> dirs;
  const bool per_line = rows.size() == n && std::all_of(rows.begin(), rows.end(), [](const auto& r) { return r.size() == 3; });
  const bool fsl = rows.size() == 3 && std::all_of(rows.begin(), rows.end(), [n](const auto& r) { return r.size() == n; });
  if (per_line) {
    for (const auto& r : rows) dirs.emplace_back(r[0], r[1], r[2]);
  } else if (fsl) {
    for (std::size_t i = 0; i < n; ++i) dirs.emplace_back(rows[0][i], rows[1][i], rows[2][i]);
  } else {
    throw IoError("'" + bvec_path + "': expected " + std::to_string(n) + " directions (one per line or 3 rows)");
  }

  std::vector<GradientEntry> entries;
  for (std::size_t i = 0; i < n; ++i) {
    GradientEntry e{bvals[i], dirs[i]};
    if (e.b_value > kB0Threshold) {
      const double norm = e.direction.norm();
      if (std::abs(norm - 1.0) > 1e-2) {
        throw IoError("'" + bvec_path + "': direction " + std::to_string(i) + " is not unit length");
      }
      e.direction /= norm;
    }
    entries.push_back(e);
  }
  return GradientTable(std::move(entries));
}

inline void save_gradient_table(const GradientTable& g, const std::string& bval_path, const std::string& bvec_path) {
  std::ofstream bv(bval_path), bd(bvec_path);
  if (!bv || !bd) throw IoError("cannot write gradient table");
  bv.precision(17);
  bd.precision(17);
  for (const auto& e : g.entries()) {
    bv << e.b_value << '\n';
    bd << e.direction.x() << ' ' << e.direction.y() << ' ' << e.direction.z() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Manifest

struct ShellRecord {
  std::string dwi;
  std::string bval;
  std::string bvec;
};

struct CaseRecord {
  std::string id;
  std::string t1;
  std::optional<std::string> wm_mask;
  std::vector<ShellRecord> shells;
  std::vector<std::string> candidates;
};

struct Manifest {
  std::vector<CaseRecord> cases;
  LabelTaxonomy taxonomy;
};

namespace detail {

inline std::string resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path.string() : (base / path).lexically_normal().string();
}

inline std::string string_field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j[key].is_string()) throw ConfigError(where + ": missing string field '" + key + "'");
  return j[key].get<std::string>();
}

inline void require_file(const std::string& path, const std::string& where) {
  if (!fs::is_regular_file(path)) throw IoError(where + ": file not found: '" + path + "'");
}

}  // namespace detail

// JSON manifest:
//   {"taxonomy": "tax.tsv",
//    "cases": [{"id": ..., "t1": ..., "wm_mask": ...,
//               "shells": [{"dwi": ..., "bval": ..., "bvec": ...}],
//               "candidates": [...]}]}
// Relative paths are resolved against the manifest's directory.  A taxonomy
// path given explicitly overrides the manifest's.
inline Manifest load_manifest(const std::string& path, const std::optional<std::string>& taxonomy_override = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path + "': malformed JSON: " + e.what());
  }
  const fs::path base = fs::path(path).parent_path();
  Manifest m;
  if (taxonomy_override) {
    m.taxonomy = LabelTaxonomy::load(*taxonomy_override);
  } else if (j.contains("taxonomy")) {
    m.taxonomy = LabelTaxonomy::load(detail::resolve(base, detail::string_field(j, "taxonomy", path)));
  } else {
    throw ConfigError("'" + path + "': no taxonomy given (manifest field 'taxonomy' or --taxonomy)");
  }
  if (!j.contains("cases") || !j["cases"].is_array() || j["cases"].empty()) {
    throw ConfigError("'" + path + "': 'cases' must be a non-empty array");
  }
  for (const auto& c : j["cases"]) {
    CaseRecord rec;
    rec.id = detail::string_field(c, "id", path);
    const std::string where = path + " case '" + rec.id + "'";
    rec.t1 = detail::resolve(base, detail::string_field(c, "t1", where));
    detail::require_file(rec.t1, where);
    if (c.contains("wm_mask") && !c["wm_mask"].is_null()) {
      rec.wm_mask = detail::resolve(base, detail::string_field(c, "wm_mask", where));
      detail::require_file(*rec.wm_mask, where);
    }
    if (!c.contains("shells") || !c["shells"].is_array() || c["shells"].empty()) {
      throw ConfigError(where + ": 'shells' must be a non-empty array");
    }
    for (const auto& s : c["shells"]) {
      ShellRecord sh{detail::resolve(base, detail::string_field(s, "dwi", where)),
                     detail::resolve(base, detail::string_field(s, "bval", where)),
                     detail::resolve(base, detail::string_field(s, "bvec", where))};
      detail::require_file(sh.dwi, where);
      detail::require_file(sh.bval, where);
      detail::require_file(sh.bvec, where);
      rec.shells.push_back(std::move(sh));
    }
    if (!c.contains("candidates") || !c["candidates"].is_array() || c["candidates"].empty()) {
      throw ConfigError(where + ": 'candidates' must be a non-empty array");
    }
    for (const auto& s : c["candidates"]) {
      if (!s.is_string()) throw ConfigError(where + ": candidate paths must be strings");
      rec.candidates.push_back(detail::resolve(base, s.get<std::string>()));
      detail::require_file(rec.candidates.back(), where);
    }
    m.cases.push_back(std::move(rec));
  }
  return m;
}

// ---------------------------------------------------------------------------
// T1 normalisation

struct NormalizedT1 {
  ScalarVolume t1;
  double reference = 0.0;  // intensity mapped to 0.75
  bool used_fallback = false;
};

inline constexpr double kWhiteMatterTarget = 0.75;
inline constexpr double kFallbackPercentile = 0.90;

namespace detail {

inline double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

}  // namespace detail

// Scales so the white-matter median becomes 0.75, then clips to [0,1].
// Without a mask the 90th percentile of nonzero voxels is the reference.
inline NormalizedT1 normalize_t1(const ScalarVolume& t1, const LabelVolume* wm_mask) {
  NormalizedT1 out;
  std::vector<double> values;
  if (wm_mask != nullptr) {
    require_same_grid(t1.grid(), wm_mask->grid(), "normalize_t1");
    for (std::size_t v = 0; v < t1.voxel_count(); ++v) {
      if (wm_mask->at(v) != 0) values.push_back(t1.at(v));
    }
    if (values.empty()) throw NormalizationError("normalize_t1: white-matter mask is empty");
    out.reference = detail::median(std::move(values));
  } else {
    for (double x : t1.data()) {
      if (x > 0.0) values.push_back(x);
    }
    if (values.empty()) throw NormalizationError("normalize_t1: image has no positive voxels");
    const auto k = static_cast<std::size_t>(std::floor(kFallbackPercentile * static_cast<double>(values.size() - 1)));
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
    out.reference = values[k];
    out.used_fallback = true;
  }
  if (!(out.reference > 0.0)) throw NormalizationError("normalize_t1: reference intensity is not positive");
  const double scale = kWhiteMatterTarget / out.reference;
  out.t1 = t1;
  for (auto& x : out.t1.data()) x = std::clamp(x * scale, 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Cropping

struct BoundingBox {
  Index3 lo{0, 0, 0};
  Index3 hi{-1, -1, -1};  // inclusive
  bool empty() const { return hi[0] < lo[0]; }
};

inline BoundingBox foreground_bbox(const ProbVolume& target, double threshold) {
  BoundingBox b;
  b.lo = {std::numeric_limits<int>::max(), std::numeric_limits<int>::max(), std::numeric_limits<int>::max()};
  b.hi = {-1, -1, -1};
  for (std::size_t v = 0; v < target.voxel_count(); ++v) {
    double fg = 0.0;
    for (int c = 1; c < target.components(); ++c) fg += static_cast<double>(target.at(v, c));
    if (fg > threshold) {
      const Index3 ijk = target.grid().index3(v);
      for (int a = 0; a < 3; ++a) {
        b.lo[static_cast<std::size_t>(a)] = std::min(b.lo[static_cast<std::size_t>(a)], ijk[static_cast<std::size_t>(a)]);
        b.hi[static_cast<std::size_t>(a)] = std::max(b.hi[static_cast<std::size_t>(a)], ijk[static_cast<std::size_t>(a)]);
      }
    }
  }
  if (b.hi[0] < 0) return BoundingBox{};
  return b;
}

// Per-axis inclusive range of crop offsets whose window holds the bbox.
inline std::array<std::pair<int, int>, 3> feasible_offsets(const BoundingBox& bbox, const Index3& dims, int size) {
  if (bbox.empty()) throw CropInfeasibleError("crop infeasible: target has no foreground voxels");
  std::array<std::pair<int, int>, 3> r{};
  for (int a = 0; a < 3; ++a) {
    const auto i = static_cast<std::size_t>(a);
    if (dims[i] < size) {
      throw CropInfeasibleError("crop infeasible: volume has " + std::to_string(dims[i]) + " voxels along axis " +
                                std::to_string(a) + ", crop needs " + std::to_string(size));
    }
    const int extent = bbox.hi[i] - bbox.lo[i] + 1;
    if (extent > size) {
      throw CropInfeasibleError("crop infeasible: foreground spans " + std::to_string(extent) + " voxels along axis " +
                                std::to_string(a) + ", more than the crop size " + std::to_string(size));
    }
    r[i] = {std::max(0, bbox.hi[i] - size + 1), std::min(bbox.lo[i], dims[i] - size)};
  }
  return r;
}

struct TrainingSample {
  ScalarVolume t1;
  RgbVolume rgb;
  ProbVolume target;
  Index3 crop_offset{0, 0, 0};
  json provenance;
};

inline Index3 draw_crop_offset(const ProbVolume& target, Rng& rng, int size, double threshold) {
  const auto ranges = feasible_offsets(foreground_bbox(target, threshold), target.grid().dims(), size);
  Index3 off{};
  for (int a = 0; a < 3; ++a) {
    const auto [lo, hi] = ranges[static_cast<std::size_t>(a)];
    off[static_cast<std::size_t>(a)] = std::uniform_int_distribution<int>(lo, hi)(rng);
  }
  return off;
}

inline TrainingSample crop_sample(const ScalarVolume& t1, const RgbVolume& rgb, const ProbVolume& target, Rng& rng,
                                  int size = 128, double threshold = 0.5) {
  require_same_grid(t1.grid(), rgb.grid(), "crop_sample (rgb)");
  require_same_grid(t1.grid(), target.grid(), "crop_sample (target)");
  TrainingSample s;
  s.crop_offset = draw_crop_offset(target, rng, size, threshold);
  const Index3 dims{size, size, size};
  s.t1 = crop(t1, s.crop_offset, dims);
  s.rgb = crop(rgb, s.crop_offset, dims);
  s.target = crop(target, s.crop_offset, dims);
  return s;
}

// Throws InvalidInputError naming the first violated invariant.
inline void validate_sample(const TrainingSample& s, int size, double spacing_mm) {
  const Index3 dims{size, size, size};
  for (const VoxelGrid* g : {&s.t1.grid(), &s.rgb.grid(), &s.target.grid()}) {
    if (g->dims() != dims) throw InvalidInputError("sample: channel is not " + std::to_string(size) + "^3");
    if (!(*g == s.t1.grid())) throw InvalidInputError("sample: channels are on different grids");
    if ((g->voxel_size() - Vec3::Constant(spacing_mm)).cwiseAbs().maxCoeff() > 1e-6) {
      throw InvalidInputError("sample: grid is not isotropic at the output spacing");
    }
  }
  for (double x : s.t1.data()) {
    if (!(x >= 0.0 && x <= 1.0)) throw InvalidInputError("sample: t1 outside [0,1]");
  }
  for (double x : s.rgb.data()) {
    if (!(x >= 0.0 && x <= 1.0)) throw InvalidInputError("sample: rgb outside [0,1]");
  }
  for (std::size_t v = 0; v < s.target.voxel_count(); ++v) {
    double sum = 0.0;
    for (float p : s.target.voxel(v)) {
      if (!(p >= 0.0f)) throw InvalidInputError("sample: negative target probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-5) throw InvalidInputError("sample: target not on the simplex");
  }
}

// ---------------------------------------------------------------------------
// Random streams

enum class Stage : std::uint64_t {
  Shell = 1,
  Geometric,
  Orientation,
  T1Resolution,
  DtiResolution,
  Speckle,
  T1Intensity,
  FaIntensity,
  Crop,
};

// Independent stream for (master seed, case, sample, stage).
inline Rng stage_rng(std::uint64_t master_seed, std::uint64_t case_index, std::uint64_t sample_index, Stage stage) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed), static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(case_index), static_cast<std::uint32_t>(case_index >> 32),
                    static_cast<std::uint32_t>(sample_index), static_cast<std::uint32_t>(sample_index >> 32),
                    static_cast<std::uint32_t>(stage)};
  return Rng(seq);
}

// ---------------------------------------------------------------------------
// Case preparation (once per case) and sample generation

// Everything deterministic about a case, on the output grid.
struct PreparedCase {
  std::string id;
  VoxelGrid grid;
  ScalarVolume t1;  // normalised
  double t1_reference = 0.0;
  bool t1_fallback = false;
  std::vector<ScalarVolume> fa;  // one per shell
  std::vector<VectorField> v1;
  ProbVolume target;
};

inline VoxelGrid output_grid_for(const VoxelGrid& t1_grid, double spacing_mm) {
  if ((t1_grid.voxel_size() - Vec3::Constant(spacing_mm)).cwiseAbs().maxCoeff() < 1e-6) return t1_grid;
  return regrid_same_fov(t1_grid, Vec3::Constant(spacing_mm));
}

template <typename F>
auto run_stage(const std::string& stage, const std::string& case_id, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, case_id, e.what());
  }
}

inline PreparedCase prepare_case(const CaseRecord& rec, const LabelTaxonomy& tax, const PipelineConfig& cfg) {
  PreparedCase pc;
  pc.id = rec.id;
  const ScalarVolume raw_t1 = run_stage("load t1", rec.id, [&] { return nifti::load<ScalarVolume>(rec.t1, 1); });
  pc.grid = output_grid_for(raw_t1.grid(), cfg.output_spacing_mm);

  std::optional<LabelVolume> wm;
  if (rec.wm_mask) {
    wm = run_stage("load wm mask", rec.id, [&] {
      return resample(nifti::load<LabelVolume>(*rec.wm_mask, 1), pc.grid, Interp::Nearest);
    });
  }
  const NormalizedT1 norm = run_stage("normalize_t1", rec.id, [&] {
    return normalize_t1(resample(raw_t1, pc.grid, Interp::Trilinear), wm ? &*wm : nullptr);
  });
  pc.t1 = norm.t1;
  pc.t1_reference = norm.reference;
  pc.t1_fallback = norm.used_fallback;

  for (const auto& shell : rec.shells) {
    const TensorVolume tensors = run_stage("fit_dti", rec.id, [&] {
      const auto dwi = nifti::load_series(shell.dwi);
      return fit_dti(dwi, load_gradient_table(shell.bval, shell.bvec));
    });
    const TensorVolume up = run_stage("resample_tensor_log_euclidean", rec.id,
                                      [&] { return resample_tensor_log_euclidean(tensors, pc.grid); });
    TensorMetrics m = run_stage("tensor_metrics", rec.id, [&] { return tensor_metrics(up); });
    pc.fa.push_back(std::move(m.fa));
    pc.v1.push_back(std::move(m.v1));
  }

  pc.target = run_stage("fuse_targets", rec.id, [&] {
    std::vector<LabelVolume> cands;
    for (const auto& p : rec.candidates) {
      cands.push_back(resample(nifti::load<LabelVolume>(p, 1), pc.grid, Interp::Nearest));
    }
    return fuse_targets(cands, tax);
  });
  return pc;
}

namespace detail {

inline json resolution_json(const ResolutionSample& r) {
  return json{{"coarse_mm", r.coarse},
              {"voxel_size_mm", {r.per_axis.x(), r.per_axis.y(), r.per_axis.z()}},
              {"slice_thickness_mm", {r.slice_thickness.x(), r.slice_thickness.y(), r.slice_thickness.z()}}};
}

}  // namespace detail

// Draws the global and local geometric transform, redrawing the local
// displacement while it folds.
inline SpatialWarp draw_geometric_warp(Rng& rng, const AugmentConfig& cfg, const VoxelGrid& grid, GlobalDraw* drawn) {
  const GlobalDraw g = draw_global(rng, cfg);
  if (drawn != nullptr) *drawn = g;
  const Mat3 r = euler_rotation_deg(g.euler_deg);
  if (cfg.local_displacement_mm == 0.0) return SpatialWarp(grid, g.scale, r, nullptr);
  for (int attempt = 0; attempt < cfg.max_fold_attempts; ++attempt) {
    const DeformationGrid d = DeformationGrid::uniform_random(rng, -cfg.local_displacement_mm, cfg.local_displacement_mm);
    SpatialWarp w(grid, g.scale, r, &d);
    if (w.min_jacobian_determinant() > 0.0) return w;
  }
  throw FoldingError("local deformation folded in " + std::to_string(cfg.max_fold_attempts) + " attempts");
}

struct SampleId {
  std::uint64_t master_seed = 0;
  std::uint64_t case_index = 0;
  std::uint64_t sample_index = 0;
};

// The full augmentation chain for one sample.  Deterministic in
// (prepared case, config, id).
// Stage timings go to `timings` when given; they are kept out of the
// provenance so output files stay byte-identical between runs.
using StageTimings = std::vector<std::pair<std::string, double>>;

inline TrainingSample generate_sample(const PreparedCase& pc, const PipelineConfig& cfg, const SampleId& id,
                                      StageTimings* timings = nullptr) {
  const AugmentConfig& ac = cfg.augment;
  auto rng = [&](Stage s) { return stage_rng(id.master_seed, id.case_index, id.sample_index, s); };
  auto stage = [&](const char* name, auto&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    auto result = run_stage(name, pc.id, f);
    if (timings != nullptr) {
      timings->emplace_back(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return result;
  };

  Rng shell_rng = rng(Stage::Shell);
  const auto shell = static_cast<std::size_t>(
      std::uniform_int_distribution<std::size_t>(0, pc.fa.size() - 1)(shell_rng));

  GlobalDraw global;
  AugmentChannels ch = stage("geometric augmentation", [&] {
    Rng r = rng(Stage::Geometric);
    const SpatialWarp warp = draw_geometric_warp(r, ac, pc.grid, &global);
    return apply_warp(AugmentChannels{pc.t1, pc.fa[shell], pc.v1[shell], pc.target}, warp);
  });
  ch.v1 = stage("orientation_augment", [&] {
    Rng r = rng(Stage::Orientation);
    return orientation_augment(ch.v1, r, ac);
  });
  const RgbVolume rgb = stage("compose_rgb", [&] { return compose_rgb(ch.fa, ch.v1); });

  Rng t1_res_rng = rng(Stage::T1Resolution);
  Rng dti_res_rng = rng(Stage::DtiResolution);
  const ResolutionSample t1_res = sample_resolution(t1_res_rng, ac);
  const ResolutionSample dti_res = sample_resolution(dti_res_rng, ac);

  ScalarVolume t1_low = stage("degrade t1", [&] { return simulate_acquisition(ch.t1, t1_res); });
  RgbVolume rgb_low = stage("degrade rgb", [&] { return simulate_acquisition(rgb, dti_res); });

  const std::size_t speckles = stage("speckle", [&] {
    Rng r = rng(Stage::Speckle);
    return speckle_in_place(rgb_low, r, ac);
  });

  Rng t1_int_rng = rng(Stage::T1Intensity);
  Rng fa_int_rng = rng(Stage::FaIntensity);
  const IntensityDraw t1_draw = draw_intensity(t1_int_rng, ac, IntensityKind::T1);
  const IntensityDraw fa_draw = draw_intensity(fa_int_rng, ac, IntensityKind::Fa);
  t1_low = stage("intensity t1", [&] { return apply_intensity(t1_low, t1_draw, t1_int_rng, IntensityKind::T1); });
  rgb_low = stage("intensity rgb", [&] { return apply_intensity(rgb_low, fa_draw, fa_int_rng); });

  // Only the crop window is upsampled.  The offset depends on the warped
  // target alone, so it can be drawn before the channels are finished.
  TrainingSample s;
  const Index3 crop_dims{cfg.crop_size, cfg.crop_size, cfg.crop_size};
  stage("crop_sample", [&] {
    Rng r = rng(Stage::Crop);
    s.crop_offset = draw_crop_offset(ch.target, r, cfg.crop_size, cfg.foreground_threshold);
    s.target = crop(ch.target, s.crop_offset, crop_dims);
    return 0;
  });
  const VoxelGrid window = crop_grid(pc.grid, s.crop_offset, crop_dims);
  s.t1 = stage("upsample t1", [&] { return resample(t1_low, window, Interp::Trilinear); });
  s.rgb = stage("upsample rgb", [&] { return resample(rgb_low, window, Interp::Trilinear); });

  s.provenance = json{
      {"case_id", pc.id},
      {"master_seed", id.master_seed},
      {"case_index", id.case_index},
      {"sample_index", id.sample_index},
      {"config_hash", config_hash(cfg)},
      {"shell_index", shell},
      {"t1_resolution", detail::resolution_json(t1_res)},
      {"dti_resolution", detail::resolution_json(dti_res)},
      {"global_scale", global.scale},
      {"global_euler_deg", {global.euler_deg.x(), global.euler_deg.y(), global.euler_deg.z()}},
      {"speckle_count", speckles},
      {"t1_intensity", {{"brightness", t1_draw.brightness}, {"contrast", t1_draw.contrast},
                        {"noise_sigma", t1_draw.noise_sigma}, {"gamma", t1_draw.gamma}}},
      {"fa_intensity", {{"noise_sigma", fa_draw.noise_sigma}, {"gamma", fa_draw.gamma}}},
      {"t1_reference_intensity", pc.t1_reference},
      {"t1_reference_fallback", pc.t1_fallback},
      {"crop_offset", {s.crop_offset[0], s.crop_offset[1], s.crop_offset[2]}},
  };
  return s;
}

// ---------------------------------------------------------------------------
// Batch generation

struct SampleFiles {
  std::string t1, rgb, target, provenance;
};

inline SampleFiles sample_file_names(const std::string& case_id, std::uint64_t sample_index) {
  const std::string stem = case_id + "_" + std::to_string(sample_index);
  return {stem + "_t1.nii.gz", stem + "_rgb.nii.gz", stem + "_target.nii.gz", stem + "_provenance.json"};
}

inline SampleFiles write_sample(const fs::path& out_dir, const std::string& case_id, std::uint64_t sample_index,
                                const TrainingSample& s, const PipelineConfig& cfg) {
  validate_sample(s, cfg.crop_size, cfg.output_spacing_mm);
  const SampleFiles f = sample_file_names(case_id, sample_index);
  nifti::save((out_dir / f.t1).string(), s.t1);
  nifti::save((out_dir / f.rgb).string(), s.rgb);
  nifti::save((out_dir / f.target).string(), s.target);
  std::ofstream p(out_dir / f.provenance);
  p << s.provenance.dump(2) << '\n';
  if (!p) throw IoError("cannot write '" + (out_dir / f.provenance).string() + "'");
  return f;
}

struct BatchOptions {
  std::uint64_t master_seed = 0;
  int count = 1;  // samples per case
  int workers = 1;
  fs::path out_dir = ".";
  bool verbose = false;
};

// Writes `count` samples per case plus `samples.json`.  Work is split at
// sample granularity; file contents do not depend on the worker count.
inline json generate_batch(const Manifest& manifest, const PipelineConfig& cfg, const BatchOptions& opt) {
  cfg.validate();
  if (opt.count < 1) throw ConfigError("--count must be >= 1");
  fs::create_directories(opt.out_dir);

  std::vector<PreparedCase> prepared;
  prepared.reserve(manifest.cases.size());
  for (const auto& rec : manifest.cases) prepared.push_back(prepare_case(rec, manifest.taxonomy, cfg));

  struct Job {
    std::size_t case_index;
    std::uint64_t sample_index;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < prepared.size(); ++c) {
    for (int s = 0; s < opt.count; ++s) jobs.push_back({c, static_cast<std::uint64_t>(s)});
  }
  std::vector<SampleFiles> files(jobs.size());
  std::vector<std::string> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;

  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      const Job& job = jobs[j];
      const PreparedCase& pc = prepared[job.case_index];
      try {
        const auto t0 = std::chrono::steady_clock::now();
        StageTimings timings;
        const TrainingSample s =
            generate_sample(pc, cfg, {opt.master_seed, job.case_index, job.sample_index}, opt.verbose ? &timings : nullptr);
        files[j] = write_sample(opt.out_dir, pc.id, job.sample_index, s, cfg);
        if (opt.verbose) {
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          std::lock_guard lock(log_mutex);
          std::cerr << pc.id << " sample " << job.sample_index << ": " << secs << " s (";
          for (std::size_t t = 0; t < timings.size(); ++t) {
            std::cerr << (t ? ", " : "") << timings[t].first << " " << timings[t].second;
          }
          std::cerr << ")\n";
        }
      } catch (const std::exception& e) {
        errors[j] = e.what();
      }
    }
  };
  const int nworkers = std::max(1, std::min<int>(opt.workers, static_cast<int>(jobs.size())));
  std::vector<std::thread> pool;
  for (int w = 1; w < nworkers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (const auto& e : errors) {
    if (!e.empty()) throw Error(e);
  }

  json index = json::array();
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    index.push_back({{"case_id", prepared[jobs[j].case_index].id},
                     {"sample_index", jobs[j].sample_index},
                     {"t1", files[j].t1},
                     {"rgb", files[j].rgb},
                     {"target", files[j].target},
                     {"provenance", files[j].provenance}});
  }
  json out{{"master_seed", opt.master_seed},
           {"config_hash", config_hash(cfg)},
           {"config", to_json(cfg)},
           {"samples", index}};
  std::ofstream f(opt.out_dir / "samples.json");
  f << out.dump(2) << '\n';
  if (!f) throw IoError("cannot write samples.json");
  return out;
}

}  // namespace thalsynth
