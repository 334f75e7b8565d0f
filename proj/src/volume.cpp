#include "stylevox/volume.hpp"

#include <algorithm>
#include <stdexcept>

namespace sv {

Plane plane_from_string(const std::string& s) {
  if (s == "sagittal") return Plane::Sagittal;
  if (s == "axial") return Plane::Axial;
  if (s == "coronal") return Plane::Coronal;
  throw std::invalid_argument("unknown plane '" + s + "' (sagittal|axial|coronal)");
}

const char* plane_name(Plane p) {
  switch (p) {
    case Plane::Sagittal: return "sagittal";
    case Plane::Axial: return "axial";
    case Plane::Coronal: return "coronal";
  }
  return "?";
}

void Volume::update_range() {
  if (data.empty()) {
    vmin = vmax = 0.0f;
    return;
  }
  auto [lo, hi] = std::minmax_element(data.begin(), data.end());
  vmin = *lo;
  vmax = *hi;
}

Volume make_volume(int64_t dx, int64_t dy, int64_t dz) {
  if (dx < 1 || dy < 1 || dz < 1) throw std::invalid_argument("volume extents must be >= 1");
  Volume v;
  v.dx = dx;
  v.dy = dy;
  v.dz = dz;
  v.data.assign(static_cast<size_t>(dx * dy * dz), 0.0f);
  return v;
}

Tensor volume_to_tensor(const Volume& v, DType dt) {
  Tensor t = Tensor::from_f32({1, 1, v.dx, v.dy, v.dz}, v.data);
  return dt == DType::F32 ? t : t.astype(dt);
}

Volume tensor_to_volume(const Tensor& t) {
  std::vector<int64_t> s = t.shape();
  if (s.size() == 5 && s[0] == 1 && s[1] == 1) s = {s[2], s[3], s[4]};
  if (s.size() != 3)
    throw std::invalid_argument("tensor_to_volume: expected [1,1,D,H,W] or [D,H,W], got " +
                                shape_str(t.shape()));
  Volume v = make_volume(s[0], s[1], s[2]);
  for (int64_t i = 0; i < t.numel(); ++i) v.data[static_cast<size_t>(i)] = static_cast<float>(t.at(i));
  v.update_range();
  return v;
}

Slice2D extract_middle_slice(const Volume& v, Plane plane) {
  Slice2D s;
  switch (plane) {
    case Plane::Sagittal: {
      const int64_t x = v.dx / 2;
      s.rows = v.dy;
      s.cols = v.dz;
      s.data.resize(static_cast<size_t>(s.rows * s.cols));
      for (int64_t y = 0; y < v.dy; ++y)
        for (int64_t z = 0; z < v.dz; ++z) s.data[static_cast<size_t>(y * v.dz + z)] = v.at(x, y, z);
      break;
    }
    case Plane::Coronal: {
      const int64_t y = v.dy / 2;
      s.rows = v.dx;
      s.cols = v.dz;
      s.data.resize(static_cast<size_t>(s.rows * s.cols));
      for (int64_t x = 0; x < v.dx; ++x)
        for (int64_t z = 0; z < v.dz; ++z) s.data[static_cast<size_t>(x * v.dz + z)] = v.at(x, y, z);
      break;
    }
    case Plane::Axial: {
      const int64_t z = v.dz / 2;
      s.rows = v.dx;
      s.cols = v.dy;
      s.data.resize(static_cast<size_t>(s.rows * s.cols));
      for (int64_t x = 0; x < v.dx; ++x)
        for (int64_t y = 0; y < v.dy; ++y) s.data[static_cast<size_t>(x * v.dy + y)] = v.at(x, y, z);
      break;
    }
  }
  return s;
}

Volume normalize_intensity(const Volume& v) {
  Volume out = v;
  out.update_range();
  const float lo = out.vmin, hi = out.vmax;
  if (hi <= lo) {
    std::fill(out.data.begin(), out.data.end(), 0.0f);
    out.vmin = out.vmax = 0.0f;
    return out;
  }
  const float scale = 2.0f / (hi - lo);
  for (auto& x : out.data) x = (x - lo) * scale - 1.0f;
  out.update_range();
  return out;
}

}  // namespace sv
