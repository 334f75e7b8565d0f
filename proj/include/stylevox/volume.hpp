#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "stylevox/tensor.hpp"

namespace sv {

// Axis convention, fixed project-wide: x = sagittal axis, y = coronal axis,
// z = axial axis. Data is row-major with z fastest: data[(x*Dy + y)*Dz + z].
enum class Plane { Sagittal, Axial, Coronal };

Plane plane_from_string(const std::string& s);
const char* plane_name(Plane p);

struct Slice2D {
  int64_t rows = 0, cols = 0;
  std::vector<float> data;  // row-major
  float at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols + c)]; }
};

struct Volume {
  int64_t dx = 0, dy = 0, dz = 0;
  std::vector<float> data;
  float vmin = 0.0f, vmax = 0.0f;  // intensity range metadata

  int64_t voxels() const { return dx * dy * dz; }
  float at(int64_t x, int64_t y, int64_t z) const {
    return data[static_cast<size_t>((x * dy + y) * dz + z)];
  }
  void update_range();
};

Volume make_volume(int64_t dx, int64_t dy, int64_t dz);

// [1,1,dx,dy,dz] tensor view of the voxel data (copies)
Tensor volume_to_tensor(const Volume& v, DType dt = DType::F32);
Volume tensor_to_volume(const Tensor& t);  // [1,1,D,H,W] or [D,H,W]

// middle slice at floor(extent/2) along the plane's axis:
//   sagittal -> [dy, dz], coronal -> [dx, dz], axial -> [dx, dy]
Slice2D extract_middle_slice(const Volume& v, Plane plane);

// affine map of [min,max] onto [-1,1]; constant volumes map to all zeros
Volume normalize_intensity(const Volume& v);

}  // namespace sv
