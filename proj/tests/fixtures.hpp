#pragma once

// Hand-built constructions shared by the unit tests and the acceptance run.

#include <vector>

#include "thalsynth/thalsynth.hpp"

namespace fixtures {

using namespace thalsynth;

// Labels 1,2 form manual group 1 and labels 3,4 group 2.
inline LabelTaxonomy fusion_taxonomy() {
  std::vector<FineLabel> l;
  const char* names[] = {"a", "b", "c", "d"};
  for (int i = 0; i < 4; ++i) l.push_back({i + 1, names[i], names[i], Hemisphere::Left, i < 2 ? 1 : 2, 1});
  return LabelTaxonomy(std::move(l));
}

struct FusionCase {
  std::vector<LabelVolume> candidates;  // six, on a 20x1x1 grid
  std::vector<std::vector<float>> expected;  // per voxel, channels 0..4
};

// Twenty voxels of six votes each, with the fused result worked out by hand:
// unanimous, same-group splits, cross-group splits and ties.
inline FusionCase fusion_case() {
  const std::vector<std::vector<int>> votes = {
      {1, 1, 1, 1, 1, 1},  // unanimous a
      {0, 0, 0, 0, 0, 0},  // unanimous background
      {1, 1, 1, 1, 2, 2},  // same group 4:2
      {1, 1, 1, 1, 3, 3},  // cross group 4:2
      {1, 1, 1, 3, 3, 3},  // group tie 1 vs 2
      {0, 0, 0, 1, 1, 1},  // tie background vs group 1
      {1, 1, 2, 2, 3, 3},  // group 1 wins 4:2
      {3, 3, 4, 4, 1, 1},  // group 2 wins 4:2
      {1, 2, 3, 4, 0, 0},  // three-way tie
      {2, 2, 2, 2, 2, 4},  // cross group 5:1
      {3, 3, 3, 4, 1, 1},  // group 2 wins, uneven split
      {1, 2, 0, 0, 0, 0},  // background wins
      {1, 1, 2, 0, 0, 0},  // tie background vs group 1
      {1, 1, 2, 3, 0, 0},  // group 1 wins 3:2:1
      {4, 4, 4, 4, 4, 4},  // unanimous d
      {2, 2, 2, 4, 4, 4},  // group tie 1 vs 2
      {1, 2, 2, 3, 3, 3},  // group tie 1 vs 2, uneven inside
      {0, 0, 3, 3, 4, 4},  // group 2 wins 4:2
      {2, 2, 2, 2, 1, 1},  // same group 4:2
      {0, 1, 1, 2, 3, 4},  // group 1 wins 3:2:1
  };
  const auto t = static_cast<float>(1.0 / 3.0), tt = static_cast<float>(2.0 / 3.0);
  FusionCase fc;
  fc.expected = {
      {0, 1, 0, 0, 0},       {1, 0, 0, 0, 0},         {0, tt, t, 0, 0},        {0, 1, 0, 0, 0},
      {0, 1, 0, 0, 0},       {1, 0, 0, 0, 0},         {0, 0.5f, 0.5f, 0, 0},   {0, 0, 0, 0.5f, 0.5f},
      {1, 0, 0, 0, 0},       {0, 0, 1, 0, 0},         {0, 0, 0, 0.75f, 0.25f}, {1, 0, 0, 0, 0},
      {1, 0, 0, 0, 0},       {0, tt, t, 0, 0},        {0, 0, 0, 0, 1},         {0, 0, 1, 0, 0},
      {0, t, tt, 0, 0},      {0, 0, 0, 0.5f, 0.5f},   {0, t, tt, 0, 0},        {0, tt, t, 0, 0},
  };
  const VoxelGrid g({20, 1, 1}, Affine::Identity());
  for (int c = 0; c < 6; ++c) {
    LabelVolume v(g);
    for (int i = 0; i < 20; ++i) v.at(static_cast<std::size_t>(i)) = votes[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
    fc.candidates.push_back(std::move(v));
  }
  return fc;
}

// Two 10^3 cubes of label `id`, the second shifted 5 voxels along x.
inline std::pair<LabelVolume, LabelVolume> shifted_cubes(std::int32_t id) {
  const VoxelGrid g = VoxelGrid::isotropic({24, 16, 16}, 1.0);
  LabelVolume a(g), b(g);
  for (int k = 3; k < 13; ++k)
    for (int j = 3; j < 13; ++j)
      for (int i = 2; i < 12; ++i) {
        a(i, j, k) = id;
        b(i + 5, j, k) = id;
      }
  return {a, b};
}

}  // namespace fixtures
