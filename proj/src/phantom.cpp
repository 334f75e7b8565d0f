#include "stylevox/phantom.hpp"

#include <cmath>
#include <stdexcept>

#include "stylevox/rng.hpp"

namespace sv::io {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kRimThickness = 0.08;  // of unit radius

double uniform_in(CounterRng& rng, const std::array<double, 2>& range) {
  return range[0] + (range[1] - range[0]) * rng.uniform();
}
}  // namespace

void PhantomSpec::validate() const {
  for (int64_t d : dims)
    if (d < 16)
      throw std::invalid_argument("phantom: dims too small for smallest structure (< 16 per axis)");
  auto ordered = [](const std::array<double, 2>& r) { return r[0] <= r[1] && r[0] >= 0.0; };
  if (!ordered(head_radius_frac) || !ordered(cortex_thickness) || !ordered(ventricle_radius_frac))
    throw std::invalid_argument("phantom: factor ranges must be non-empty");
  if (count < 0) throw std::invalid_argument("phantom: count must be >= 0");
  if (noise_level < 0 || deform_amplitude < 0 || field_amplitude < 0)
    throw std::invalid_argument("phantom: amplitudes must be >= 0");
}

Volume phantom_item(const PhantomSpec& spec, int index, PhantomFactors* factors) {
  spec.validate();
  CounterRng rng(spec.seed, Stream::PhantomItem, static_cast<uint64_t>(index));
  const double DX = static_cast<double>(spec.dims[0]);
  const double DY = static_cast<double>(spec.dims[1]);
  const double DZ = static_cast<double>(spec.dims[2]);

  // factor draws in fixed order
  std::array<double, 3> rfrac = {uniform_in(rng, spec.head_radius_frac),
                                 uniform_in(rng, spec.head_radius_frac),
                                 uniform_in(rng, spec.head_radius_frac)};
  const double thick = uniform_in(rng, spec.cortex_thickness);
  const double vfrac = uniform_in(rng, spec.ventricle_radius_frac);
  std::array<double, 3> center = {DX * (0.5 + 0.03 * (rng.uniform() - 0.5)),
                                  DY * (0.5 + 0.03 * (rng.uniform() - 0.5)),
                                  DZ * (0.5 + 0.03 * (rng.uniform() - 0.5))};
  std::array<double, 3> vcenter = {center[0] + DX * 0.04 * (rng.uniform() - 0.5),
                                   center[1] + DY * 0.04 * (rng.uniform() - 0.5),
                                   center[2] + DZ * 0.04 * (rng.uniform() - 0.5)};
  std::array<double, 3> radii = {rfrac[0] * (DX / 2 - 1.5), rfrac[1] * (DY / 2 - 1.5),
                                 rfrac[2] * (DZ / 2 - 1.5)};
  double warp_phase[3][2], warp_freq[3][2];
  for (int a = 0; a < 3; ++a)
    for (int j = 0; j < 2; ++j) {
      warp_phase[a][j] = rng.uniform();
      warp_freq[a][j] = 1.0 + static_cast<double>(rng.uniform_int(2));
    }
  double field_phase[3];
  for (double& p : field_phase) p = rng.uniform();
  const double field_freq = 1.0 + static_cast<double>(rng.uniform_int(2));

  const double min_half = std::min({radii[0], radii[1], radii[2]});
  Volume v = make_volume(spec.dims[0], spec.dims[1], spec.dims[2]);

  for (int64_t x = 0; x < spec.dims[0]; ++x)
    for (int64_t y = 0; y < spec.dims[1]; ++y)
      for (int64_t z = 0; z < spec.dims[2]; ++z) {
        const double u[3] = {static_cast<double>(x) / DX, static_cast<double>(y) / DY,
                             static_cast<double>(z) / DZ};
        double p[3] = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
        for (int a = 0; a < 3; ++a) {
          const int b = (a + 1) % 3, c = (a + 2) % 3;
          p[a] += spec.deform_amplitude * min_half *
                  std::sin(kTwoPi * (u[b] * warp_freq[a][0] + warp_phase[a][0])) *
                  std::sin(kTwoPi * (u[c] * warp_freq[a][1] + warp_phase[a][1]));
        }
        auto rho = [&](const std::array<double, 3>& ctr, const std::array<double, 3>& rad) {
          double s = 0;
          for (int a = 0; a < 3; ++a) {
            const double t = (p[a] - ctr[a]) / rad[a];
            s += t * t;
          }
          return std::sqrt(s);
        };
        double val = 0.0;
        const double rh = rho(center, radii);
        if (rh <= 1.0) {
          if (rh >= 1.0 - kRimThickness)
            val = 0.7;
          else if (rh >= 1.0 - kRimThickness - thick)
            val = 0.9;
          else
            val = 0.5;
          if (vfrac > 0.0) {
            const std::array<double, 3> vr = {vfrac * radii[0], vfrac * radii[1], vfrac * radii[2]};
            if (rho(vcenter, vr) <= 1.0) val = 0.1;
          }
        }
        const double field =
            1.0 + spec.field_amplitude *
                      (std::cos(kTwoPi * (u[0] * field_freq + field_phase[0])) +
                       std::cos(kTwoPi * (u[1] * field_freq + field_phase[1])) +
                       std::cos(kTwoPi * (u[2] * field_freq + field_phase[2]))) /
                      3.0;
        val = val * field + spec.noise_level * rng.normal();
        v.data[static_cast<size_t>((x * spec.dims[1] + y) * spec.dims[2] + z)] =
            static_cast<float>(val);
      }

  if (factors) {
    factors->index = index;
    factors->head_radii = radii;
    factors->cortex_thickness = thick;
    factors->ventricle_radius_frac = vfrac;
  }
  return normalize_intensity(v);
}

std::vector<Volume> phantom_generate(const PhantomSpec& spec,
                                     std::vector<PhantomFactors>* factors) {
  spec.validate();
  std::vector<Volume> out;
  out.reserve(static_cast<size_t>(spec.count));
  if (factors) factors->clear();
  for (int i = 0; i < spec.count; ++i) {
    PhantomFactors f;
    out.push_back(phantom_item(spec, i, &f));
    if (factors) factors->push_back(f);
  }
  return out;
}

}  // namespace sv::io
