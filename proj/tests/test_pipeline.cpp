#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "support.hpp"

using namespace thalsynth;
using namespace testing_support;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  f << text;
}

// Small phantom (100^3 at 0.7 mm) prepared once for the whole suite.  The
// crop is 96^3 so a thalamus scaled up by the global transform still fits.
class PhantomCase : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("pipeline_phantom");
    phantom::Options opt;
    opt.dim = 100;
    manifest_path_ = phantom::write_case(dir_->path, "ph", opt).manifest;
    manifest_ = new Manifest(load_manifest(manifest_path_));
    cfg_ = small_config(PipelineConfig{});
    prepared_ = new PreparedCase(prepare_case(manifest_->cases[0], manifest_->taxonomy, cfg_));
  }
  static void TearDownTestSuite() {
    delete prepared_;
    delete manifest_;
    delete dir_;
  }

  static PipelineConfig small_config(PipelineConfig c) {
    c.crop_size = 96;
    return c;
  }

  static TempDir* dir_;
  static std::string manifest_path_;
  static Manifest* manifest_;
  static PipelineConfig cfg_;
  static PreparedCase* prepared_;
};

TempDir* PhantomCase::dir_ = nullptr;
std::string PhantomCase::manifest_path_;
Manifest* PhantomCase::manifest_ = nullptr;
PipelineConfig PhantomCase::cfg_;
PreparedCase* PhantomCase::prepared_ = nullptr;

}  // namespace

// ---------------------------------------------------------------------------
// T1 normalisation

TEST(NormalizeT1, ConstantInsideMask) {
  const VoxelGrid g = VoxelGrid::isotropic({6, 6, 6}, 1.0);
  const ScalarVolume t1(g, 1, 1.0);
  const LabelVolume mask(g, 1, 1);
  const NormalizedT1 n = normalize_t1(t1, &mask);
  for (double x : n.t1.data()) EXPECT_DOUBLE_EQ(x, 0.75);
  EXPECT_FALSE(n.used_fallback);
}

TEST(NormalizeT1, WhiteMatterMedianTwoHundred) {
  const VoxelGrid g({5, 1, 1}, Affine::Identity());
  ScalarVolume t1(g);
  LabelVolume mask(g);
  const double vals[] = {100, 200, 300, 400, 10};
  for (int i = 0; i < 5; ++i) t1.at(static_cast<std::size_t>(i)) = vals[i];
  for (int i = 0; i < 3; ++i) mask.at(static_cast<std::size_t>(i)) = 1;
  const NormalizedT1 n = normalize_t1(t1, &mask);
  EXPECT_DOUBLE_EQ(n.reference, 200.0);
  EXPECT_DOUBLE_EQ(n.t1.at(3), 1.0);  // 400 * 0.00375 = 1.5, clipped
  EXPECT_NEAR(n.t1.at(0), 0.375, 1e-15);
  EXPECT_NEAR(n.t1.at(4), 0.0375, 1e-15);
}

TEST(NormalizeT1, AlreadyNormalized) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const VoxelGrid g = VoxelGrid::isotropic({7, 7, 7}, 1.0);
  ScalarVolume t1(g);
  LabelVolume mask(g);
  for (auto& x : t1.data()) x = u(rng);
  // Odd-sized mask whose median is 0.75.
  for (std::size_t v = 0; v < 101; ++v) {
    mask.at(v) = 1;
    t1.at(v) = v < 50 ? 0.5 : (v == 50 ? 0.75 : 0.9);
  }
  const NormalizedT1 n = normalize_t1(t1, &mask);
  for (std::size_t v = 0; v < t1.voxel_count(); ++v) EXPECT_NEAR(n.t1.at(v), t1.at(v), 1e-12);
}

TEST(NormalizeT1, FallbackPercentile) {
  const VoxelGrid g({11, 1, 1}, Affine::Identity());
  ScalarVolume t1(g);
  for (int i = 1; i <= 10; ++i) t1.at(static_cast<std::size_t>(i)) = i;  // voxel 0 stays 0
  const NormalizedT1 n = normalize_t1(t1, nullptr);
  EXPECT_TRUE(n.used_fallback);
  EXPECT_DOUBLE_EQ(n.reference, 9.0);
}

TEST(NormalizeT1, Errors) {
  const VoxelGrid g = VoxelGrid::isotropic({3, 3, 3}, 1.0);
  const ScalarVolume t1(g, 1, 1.0);
  const LabelVolume empty(g);
  EXPECT_THROW(normalize_t1(t1, &empty), NormalizationError);
  const ScalarVolume zero(g);
  const LabelVolume full(g, 1, 1);
  EXPECT_THROW(normalize_t1(zero, &full), NormalizationError);
  EXPECT_THROW(normalize_t1(zero, nullptr), NormalizationError);
}

// ---------------------------------------------------------------------------
// Cropping

TEST(Crop, BoundingBoxFillingTheWindowHasOneOffset) {
  const VoxelGrid g = VoxelGrid::isotropic({130, 130, 130}, 0.7);
  ProbVolume target(g, 2);
  for (int k = 0; k < 130; ++k)
    for (int j = 0; j < 130; ++j)
      for (int i = 0; i < 130; ++i) {
        const bool fg = i >= 1 && i <= 128 && j >= 2 && j <= 129 && k <= 127;
        target(i, j, k, fg ? 1 : 0) = 1.0f;
      }
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    EXPECT_EQ(draw_crop_offset(target, rng, 128, 0.5), (Index3{1, 2, 0}));
  }
}

TEST(Crop, EmptyTargetIsInfeasible) {
  ProbVolume target(VoxelGrid::isotropic({40, 40, 40}, 0.7), 2);
  for (std::size_t v = 0; v < target.voxel_count(); ++v) target.at(v, 0) = 1.0f;
  Rng rng(1);
  try {
    draw_crop_offset(target, rng, 32, 0.5);
    FAIL() << "expected CropInfeasibleError";
  } catch (const CropInfeasibleError& e) {
    EXPECT_NE(std::string(e.what()).find("no foreground"), std::string::npos);
  }
}

TEST(Crop, OversizedForegroundIsInfeasible) {
  ProbVolume target(VoxelGrid::isotropic({40, 40, 40}, 0.7), 2);
  for (std::size_t v = 0; v < target.voxel_count(); ++v) target.at(v, 1) = 1.0f;
  Rng rng(1);
  EXPECT_THROW(draw_crop_offset(target, rng, 32, 0.5), CropInfeasibleError);
  EXPECT_THROW(draw_crop_offset(target, rng, 41, 0.5), CropInfeasibleError);
}

TEST(Crop, EveryDrawContainsTheBoundingBox) {
  const VoxelGrid g = VoxelGrid::isotropic({40, 36, 44}, 0.7);
  ProbVolume target(g, 3);
  for (std::size_t v = 0; v < g.voxel_count(); ++v) target.at(v, 0) = 1.0f;
  auto set_fg = [&](int i, int j, int k) {
    target(i, j, k, 0) = 0.3f;
    target(i, j, k, 2) = 0.7f;
  };
  set_fg(8, 10, 12);
  set_fg(17, 20, 25);
  // Below threshold: must not widen the box.
  target(39, 35, 43, 0) = 0.6f;
  target(39, 35, 43, 1) = 0.4f;
  std::set<std::array<int, 3>> seen;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const Index3 o = draw_crop_offset(target, rng, 20, 0.5);
    for (int a = 0; a < 3; ++a) {
      EXPECT_GE(o[static_cast<std::size_t>(a)], 0);
      EXPECT_LE(o[static_cast<std::size_t>(a)] + 20, g.dim(a));
    }
    EXPECT_LE(o[0], 8);
    EXPECT_GE(o[0] + 19, 17);
    EXPECT_LE(o[1], 10);
    EXPECT_GE(o[1] + 19, 20);
    EXPECT_LE(o[2], 12);
    EXPECT_GE(o[2] + 19, 25);
    seen.insert({o[0], o[1], o[2]});
  }
  EXPECT_GT(seen.size(), 100u);  // spread over the feasible set, not a fixed offset
}

TEST(Crop, ChannelsCroppedIdentically) {
  const VoxelGrid g = VoxelGrid::isotropic({20, 20, 20}, 0.7, Vec3(-7, -7, -7));
  ScalarVolume t1(g);
  RgbVolume rgb(g, 3);
  ProbVolume target(g, 2);
  for (std::size_t v = 0; v < g.voxel_count(); ++v) {
    t1.at(v) = static_cast<double>(v) / 8000.0;
    rgb.at(v, 1) = t1.at(v);
    target.at(v, 0) = 1.0f;
  }
  target(10, 10, 10, 0) = 0.0f;
  target(10, 10, 10, 1) = 1.0f;
  Rng rng(3);
  const TrainingSample s = crop_sample(t1, rgb, target, rng, 8);
  const Index3& o = s.crop_offset;
  EXPECT_EQ(s.t1(0, 0, 0), t1(o[0], o[1], o[2]));
  EXPECT_EQ(s.rgb(0, 0, 0, 1), t1(o[0], o[1], o[2]));
  EXPECT_EQ(s.target(10 - o[0], 10 - o[1], 10 - o[2], 1), 1.0f);
  EXPECT_EQ(s.t1.grid(), s.rgb.grid());
  EXPECT_EQ(s.t1.grid(), s.target.grid());
  EXPECT_NO_THROW(validate_sample(s, 8, 0.7));
}

TEST(ValidateSample, CatchesViolations) {
  const VoxelGrid g = VoxelGrid::isotropic({4, 4, 4}, 0.7);
  TrainingSample s{ScalarVolume(g, 1, 0.5), RgbVolume(g, 3, 0.2), ProbVolume(g, 2), {0, 0, 0}, {}};
  for (std::size_t v = 0; v < g.voxel_count(); ++v) s.target.at(v, 0) = 1.0f;
  EXPECT_NO_THROW(validate_sample(s, 4, 0.7));
  EXPECT_THROW(validate_sample(s, 5, 0.7), InvalidInputError);
  EXPECT_THROW(validate_sample(s, 4, 1.0), InvalidInputError);
  TrainingSample bad = s;
  bad.t1.at(3) = 1.5;
  EXPECT_THROW(validate_sample(bad, 4, 0.7), InvalidInputError);
  bad = s;
  bad.rgb.at(3, 2) = -0.1;
  EXPECT_THROW(validate_sample(bad, 4, 0.7), InvalidInputError);
  bad = s;
  bad.target.at(3, 1) = 0.5f;
  EXPECT_THROW(validate_sample(bad, 4, 0.7), InvalidInputError);
}

// ---------------------------------------------------------------------------
// Random streams

TEST(StageRng, StreamsAreKeyedOnEveryField) {
  auto first = [](std::uint64_t m, std::uint64_t c, std::uint64_t s, Stage st) {
    Rng r = stage_rng(m, c, s, st);
    return r();
  };
  const auto base = first(7, 0, 0, Stage::Geometric);
  EXPECT_EQ(base, first(7, 0, 0, Stage::Geometric));
  EXPECT_NE(base, first(8, 0, 0, Stage::Geometric));
  EXPECT_NE(base, first(7, 1, 0, Stage::Geometric));
  EXPECT_NE(base, first(7, 0, 1, Stage::Geometric));
  EXPECT_NE(base, first(7, 0, 0, Stage::Orientation));
  EXPECT_NE(first(1ULL << 32, 0, 0, Stage::Crop), first(0, 0, 0, Stage::Crop));
}

// ---------------------------------------------------------------------------
// Gradient tables

TEST(GradientFiles, BothLayoutsAgree) {
  TempDir d("gtab");
  write_text(d.file("b.bval"), "0 1000 1000\n1000\n");
  write_text(d.file("lines.bvec"), "0 0 0\n1 0 0\n0 1 0\n0 0 1\n");
  write_text(d.file("fsl.bvec"), "0 1 0 0\n0 0 1 0\n0 0 0 1\n");
  const GradientTable a = load_gradient_table(d.file("b.bval"), d.file("lines.bvec"));
  const GradientTable b = load_gradient_table(d.file("b.bval"), d.file("fsl.bvec"));
  ASSERT_EQ(a.size(), 4u);
  ASSERT_EQ(b.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.entries()[i].b_value, b.entries()[i].b_value);
    EXPECT_EQ(a.entries()[i].direction, b.entries()[i].direction);
  }
  EXPECT_EQ(b.entries()[2].direction, Vec3(0, 1, 0));
}

TEST(GradientFiles, RoundTripAndErrors) {
  TempDir d("gtab_rt");
  const GradientTable g = twelve_direction_table();
  save_gradient_table(g, d.file("g.bval"), d.file("g.bvec"));
  const GradientTable h = load_gradient_table(d.file("g.bval"), d.file("g.bvec"));
  ASSERT_EQ(h.size(), g.size());
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_LT((h.entries()[i].direction - g.entries()[i].direction).norm(), 1e-15);

  write_text(d.file("x.bval"), "0 1000\n");
  write_text(d.file("short.bvec"), "0 0 0\n");
  EXPECT_THROW(load_gradient_table(d.file("x.bval"), d.file("short.bvec")), IoError);
  write_text(d.file("long.bvec"), "0 0 0\n2 0 0\n");
  EXPECT_THROW(load_gradient_table(d.file("x.bval"), d.file("long.bvec")), IoError);
  write_text(d.file("junk.bvec"), "0 0 0\n1 0 x\n");
  EXPECT_THROW(load_gradient_table(d.file("x.bval"), d.file("junk.bvec")), IoError);
  EXPECT_THROW(load_gradient_table(d.file("missing.bval"), d.file("junk.bvec")), IoError);
}

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, JsonRoundTrip) {
  PipelineConfig c;
  c.augment.speckle_prob = 2e-4;
  c.augment.gamma = {0.8, 1.2};
  c.crop_size = 96;
  EXPECT_EQ(pipeline_config_from_json(to_json(c)), c);
  EXPECT_EQ(pipeline_config_from_json(json::object()), PipelineConfig{});
  EXPECT_EQ(config_hash(c), config_hash(pipeline_config_from_json(to_json(c))));
  EXPECT_NE(config_hash(c), config_hash(PipelineConfig{}));
  EXPECT_EQ(config_hash(c).size(), 16u);
}

TEST(Config, StrictParsing) {
  EXPECT_THROW(pipeline_config_from_json(json{{"crop_sise", 64}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json{{"augment", {{"gama", {1, 2}}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json{{"augment", {{"gamma", {2, 1}}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json{{"augment", {{"gamma", 1}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json{{"crop_size", 6.5}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json{{"output_spacing_mm", -1}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json::array()), ConfigError);
  TempDir d("config");
  write_text(d.file("bad.json"), "{\"crop_size\": ");
  EXPECT_THROW(load_config(d.file("bad.json")), ConfigError);
  EXPECT_THROW(load_config(d.file("missing.json")), IoError);
  write_text(d.file("ok.json"), "{\"augment\": {\"speckle_prob\": 0.001}}");
  EXPECT_EQ(load_config(d.file("ok.json")).augment.speckle_prob, 0.001);
}

// ---------------------------------------------------------------------------
// Manifest

TEST(Manifest, Errors) {
  TempDir d("manifest");
  write_text(d.file("tax.tsv"), "1 a a L 1 1\n");
  write_text(d.file("t1.nii"), "x");
  write_text(d.file("nocases.json"), R"({"taxonomy": "tax.tsv", "cases": []})");
  EXPECT_THROW(load_manifest(d.file("nocases.json")), ConfigError);
  write_text(d.file("notax.json"), R"({"cases": [{"id": "a"}]})");
  EXPECT_THROW(load_manifest(d.file("notax.json")), ConfigError);
  write_text(d.file("missing.json"),
             R"({"taxonomy": "tax.tsv", "cases": [{"id": "a", "t1": "nope.nii.gz", "shells": [], "candidates": []}]})");
  try {
    load_manifest(d.file("missing.json"));
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("nope.nii.gz"), std::string::npos);
  }
  write_text(d.file("noshell.json"),
             R"({"taxonomy": "tax.tsv", "cases": [{"id": "a", "t1": "t1.nii", "shells": [], "candidates": ["t1.nii"]}]})");
  EXPECT_THROW(load_manifest(d.file("noshell.json")), ConfigError);
  write_text(d.file("malformed.json"), "{");
  EXPECT_THROW(load_manifest(d.file("malformed.json")), ConfigError);
}

// ---------------------------------------------------------------------------
// Sample generation on a phantom

TEST_F(PhantomCase, PreparedCaseIsOnTheT1Grid) {
  const PreparedCase& pc = *prepared_;
  EXPECT_EQ(pc.grid.dims(), (Index3{100, 100, 100}));
  EXPECT_LT((pc.grid.voxel_size() - Vec3::Constant(0.7)).norm(), 1e-6);  // float32 header
  EXPECT_EQ(pc.fa.size(), 1u);
  EXPECT_FALSE(pc.t1_fallback);
  EXPECT_EQ(pc.target.components(), 9);
  double fg = 0.0;
  for (std::size_t v = 0; v < pc.target.voxel_count(); ++v) fg += 1.0 - pc.target.at(v, 0);
  EXPECT_GT(fg, 1000.0);
}

TEST_F(PhantomCase, Deterministic) {
  const TrainingSample a = generate_sample(*prepared_, cfg_, {7, 0, 3});
  const TrainingSample b = generate_sample(*prepared_, cfg_, {7, 0, 3});
  EXPECT_EQ(a.t1, b.t1);
  EXPECT_EQ(a.rgb, b.rgb);
  EXPECT_EQ(a.target, b.target);
  EXPECT_EQ(a.provenance, b.provenance);
  EXPECT_NO_THROW(validate_sample(a, 96, 0.7));
}

TEST_F(PhantomCase, SeedsChangeResolutionsIndependently) {
  const TrainingSample a = generate_sample(*prepared_, cfg_, {1, 0, 0});
  const TrainingSample b = generate_sample(*prepared_, cfg_, {2, 0, 0});
  EXPECT_NE(a.provenance["t1_resolution"], b.provenance["t1_resolution"]);
  EXPECT_NE(a.provenance["dti_resolution"], b.provenance["dti_resolution"]);
  EXPECT_NE(a.provenance["t1_resolution"], a.provenance["dti_resolution"]);
  EXPECT_NE(a.t1, b.t1);
}

TEST_F(PhantomCase, OutputGridSitsAtTheCropWorldPosition) {
  const TrainingSample s = generate_sample(*prepared_, cfg_, {5, 0, 1});
  const Index3& o = s.crop_offset;
  for (const Vec3 q : {Vec3(0, 0, 0), Vec3(95, 0, 17), Vec3(12.5, 40, 95)}) {
    const Vec3 world = voxel_to_world(s.t1.grid(), q);
    const Vec3 src = world_to_voxel(prepared_->grid, world);
    EXPECT_LT((src - (q + Vec3(o[0], o[1], o[2]))).norm(), 1e-6);
  }
  // The warped thalamus is what the crop was placed around.
  double fg = 0.0;
  for (std::size_t v = 0; v < s.target.voxel_count(); ++v) fg += 1.0 - s.target.at(v, 0);
  EXPECT_GT(fg, 1000.0);
}

TEST_F(PhantomCase, IdentityPipelineReproducesPreparedChannels) {
  PipelineConfig cfg = cfg_;
  cfg.augment = AugmentConfig::identity(0.7);
  const TrainingSample s = generate_sample(*prepared_, cfg, {11, 0, 0});
  const PreparedCase& pc = *prepared_;
  const Index3 dims{96, 96, 96};
  const ScalarVolume t1 = crop(pc.t1, s.crop_offset, dims);
  const RgbVolume rgb = crop(compose_rgb(pc.fa[0], pc.v1[0]), s.crop_offset, dims);
  const ProbVolume target = crop(pc.target, s.crop_offset, dims);
  ASSERT_EQ(s.t1.grid(), t1.grid());
  double worst = 0.0;
  for (std::size_t i = 0; i < t1.data().size(); ++i) worst = std::max(worst, std::abs(s.t1.data()[i] - t1.data()[i]));
  for (std::size_t i = 0; i < rgb.data().size(); ++i) worst = std::max(worst, std::abs(s.rgb.data()[i] - rgb.data()[i]));
  for (std::size_t i = 0; i < target.data().size(); ++i)
    worst = std::max(worst, static_cast<double>(std::abs(s.target.data()[i] - target.data()[i])));
  EXPECT_LT(worst, 1e-5);
  // The whole thalamic box lies inside the crop.
  const BoundingBox box = foreground_bbox(pc.target, 0.5);
  for (std::size_t a = 0; a < 3; ++a) {
    EXPECT_LE(s.crop_offset[a], box.lo[a]);
    EXPECT_GE(s.crop_offset[a] + 95, box.hi[a]);
  }
}

TEST_F(PhantomCase, SampleIndexDoesNotPerturbOtherSamples) {
  const TrainingSample a = generate_sample(*prepared_, cfg_, {9, 0, 1});
  generate_sample(*prepared_, cfg_, {9, 0, 0});
  generate_sample(*prepared_, cfg_, {9, 0, 2});
  const TrainingSample b = generate_sample(*prepared_, cfg_, {9, 0, 1});
  EXPECT_EQ(a.t1, b.t1);
  EXPECT_NE(a.provenance, generate_sample(*prepared_, cfg_, {9, 0, 4}).provenance);
}

TEST_F(PhantomCase, StageErrorsNameStageAndCase) {
  PipelineConfig cfg = cfg_;
  cfg.crop_size = 200;  // larger than the volume
  try {
    generate_sample(*prepared_, cfg, {1, 0, 0});
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "crop_sample");
    EXPECT_EQ(e.case_id(), "ph");
  }
  CaseRecord rec = manifest_->cases[0];
  rec.shells[0].bval = rec.candidates[0];  // not a text file of numbers
  try {
    prepare_case(rec, manifest_->taxonomy, cfg_);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "fit_dti");
  }
}

TEST_F(PhantomCase, BatchOutputIndependentOfWorkerCount) {
  TempDir a("batch_a"), b("batch_b");
  BatchOptions opt;
  opt.master_seed = 3;
  opt.count = 2;
  opt.workers = 1;
  opt.out_dir = a.path;
  const json ia = generate_batch(*manifest_, cfg_, opt);
  opt.workers = 2;
  opt.out_dir = b.path;
  const json ib = generate_batch(*manifest_, cfg_, opt);
  EXPECT_EQ(ia, ib);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  int files = 0;
  for (const auto& e : std::filesystem::directory_iterator(a.path)) {
    EXPECT_EQ(slurp(e.path()), slurp(b.path / e.path().filename())) << e.path();
    ++files;
  }
  EXPECT_EQ(files, 2 * 4 + 1);
}
