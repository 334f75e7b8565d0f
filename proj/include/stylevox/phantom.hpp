#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "stylevox/volume.hpp"

namespace sv::io {

// Procedural brain-like test volumes: bright head rim over a cortex shell,
// mid-intensity interior and a dark central ventricle, warped smoothly and
// modulated by a low-frequency field. Deterministic per (seed, index).
struct PhantomSpec {
  uint64_t seed = 0;
  int count = 1;
  std::array<int64_t, 3> dims{20, 24, 28};
  std::array<double, 2> head_radius_frac{0.72, 0.88};    // of half-extent
  std::array<double, 2> cortex_thickness{0.10, 0.20};    // of unit radius
  std::array<double, 2> ventricle_radius_frac{0.15, 0.35};
  double deform_amplitude = 0.08;
  double field_amplitude = 0.10;
  double noise_level = 0.02;

  void validate() const;
};

struct PhantomFactors {
  int index = 0;
  std::array<double, 3> head_radii{};  // voxels
  double cortex_thickness = 0;
  double ventricle_radius_frac = 0;
};

Volume phantom_item(const PhantomSpec& spec, int index, PhantomFactors* factors = nullptr);
std::vector<Volume> phantom_generate(const PhantomSpec& spec,
                                     std::vector<PhantomFactors>* factors = nullptr);

}  // namespace sv::io
