// Synthetic lesion phantoms: a (possibly lobulated) rotated ellipsoid on a
// noisy soft-tissue background, with an exact analytic label.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdust/preprocess.hpp"
#include "mdust/volume.hpp"

namespace mdust {

struct Blob {
  std::array<double, 3> center_mm{};  // relative to the grid centre
  double sigma_mm = 2.0;
  double amplitude_hu = 0.0;
};

struct PhantomSpec {
  std::array<std::size_t, 3> dims{56, 56, 28};
  std::array<double, 3> spacing{1.0, 1.0, 1.5};
  std::array<double, 3> radii_mm{8.0, 7.0, 6.0};
  std::array<double, 3> center_mm{0.0, 0.0, 0.0};  // offset from the grid centre
  double rotation = 0.0;                           // in-plane, radians
  double lobulation = 0.0;                         // relative radial amplitude
  int lobes = 0;
  double background_hu = -50.0;
  double contrast_hu = 80.0;  // lesion interior offset (may be negative)
  double noise_sigma_hu = 0.0;
  std::vector<Blob> distractors;
  std::uint64_t seed = 0;

  void validate() const {
    for (std::size_t i = 0; i < 3; ++i) {
      if (dims[i] == 0) throw std::invalid_argument("phantom: grid extents must be positive");
      if (!(spacing[i] > 0.0)) throw std::invalid_argument("phantom: spacing must be positive");
      if (!(radii_mm[i] > 0.0)) throw std::invalid_argument("phantom: degenerate lesion axis");
    }
    if (lobulation < 0.0 || lobulation >= 1.0) throw std::invalid_argument("phantom: lobulation must lie in [0, 1)");
    if (noise_sigma_hu < 0.0) throw std::invalid_argument("phantom: noise level must be non-negative");
  }

  // Millimetre offset of voxel (h, w, l) from the lesion centre.
  std::array<double, 3> offset_mm(std::size_t h, std::size_t w, std::size_t l) const {
    return {(static_cast<double>(h) - 0.5 * static_cast<double>(dims[0] - 1)) * spacing[0] - center_mm[0],
            (static_cast<double>(w) - 0.5 * static_cast<double>(dims[1] - 1)) * spacing[1] - center_mm[1],
            (static_cast<double>(l) - 0.5 * static_cast<double>(dims[2] - 1)) * spacing[2] - center_mm[2]};
  }

  bool inside(const std::array<double, 3>& p) const {
    const double c = std::cos(rotation), s = std::sin(rotation);
    const double u = (c * p[0] + s * p[1]) / radii_mm[0];
    const double v = (-s * p[0] + c * p[1]) / radii_mm[1];
    const double z = p[2] / radii_mm[2];
    const double r2 = u * u + v * v + z * z;
    double bound = 1.0;
    if (lobulation > 0.0 && lobes > 0) {
      const double phi = std::atan2(v, u);
      const double theta = std::atan2(z, std::hypot(u, v));
      bound += lobulation * std::sin(lobes * phi) * std::cos(theta);
    }
    return r2 <= bound * bound;
  }

  double ellipsoid_volume_mm3() const { return 4.0 / 3.0 * std::numbers::pi * radii_mm[0] * radii_mm[1] * radii_mm[2]; }

  // A randomised lesion that fits the default grid, on a background with
  // its own tissue level and a few broad air/fat/bone-like structures.
  // Lesion contrast magnitude is drawn from [50, 120] HU with a random sign.
  static PhantomSpec random(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    auto between = [&](double a, double b) { return a + (b - a) * U(rng); };
    PhantomSpec p;
    p.seed = seed;
    const double r = between(8.0, 12.0);
    p.radii_mm = {r, r * between(0.7, 1.0), std::min(r * between(0.6, 0.9), 10.0)};
    p.center_mm = {between(-3.0, 3.0), between(-3.0, 3.0), between(-2.0, 2.0)};
    p.rotation = between(0.0, std::numbers::pi);
    p.lobulation = between(0.0, 0.2);
    p.lobes = static_cast<int>(between(2.0, 6.0));
    p.background_hu = between(-120.0, 60.0);
    p.contrast_hu = (U(rng) < 0.5 ? -1.0 : 1.0) * between(50.0, 120.0);
    p.noise_sigma_hu = between(10.0, 25.0);
    const int blobs = 2 + static_cast<int>(between(0.0, 5.0));
    for (int i = 0; i < blobs; ++i) {
      Blob b;
      // Placed around the lesion rather than on it.
      const double angle = between(0.0, 2.0 * std::numbers::pi);
      const double dist = between(r + 6.0, 30.0);
      b.center_mm = {dist * std::cos(angle), dist * std::sin(angle), between(-15.0, 15.0)};
      b.sigma_mm = between(3.0, 8.0);
      const double kind = U(rng);
      b.amplitude_hu = kind < 0.35 ? -between(300.0, 900.0) : (kind < 0.7 ? -between(60.0, 150.0) : between(200.0, 700.0));
      p.distractors.push_back(b);
    }
    return p;
  }
};

// Voxel grid for `spec`; the RECIST diameter is measured on the generated
// label's largest axial slice.
inline LesionVolume gen_phantom(const PhantomSpec& spec) {
  spec.validate();
  LesionVolume v(spec.dims, spec.spacing, 1.0);
  BinaryMask label(spec.dims, spec.spacing);
  std::mt19937_64 rng(spec.seed ^ 0x5bd1e995u);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t h = 0; h < spec.dims[0]; ++h)
    for (std::size_t w = 0; w < spec.dims[1]; ++w)
      for (std::size_t l = 0; l < spec.dims[2]; ++l) {
        const auto p = spec.offset_mm(h, w, l);
        const bool in = spec.inside(p);
        double hu = spec.background_hu + (in ? spec.contrast_hu : 0.0);
        for (const auto& b : spec.distractors) {
          const double dx = p[0] + spec.center_mm[0] - b.center_mm[0];
          const double dy = p[1] + spec.center_mm[1] - b.center_mm[1];
          const double dz = p[2] + spec.center_mm[2] - b.center_mm[2];
          hu += b.amplitude_hu * std::exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * b.sigma_mm * b.sigma_mm));
        }
        if (spec.noise_sigma_hu > 0.0) hu += spec.noise_sigma_hu * noise(rng);
        v(h, w, l) = static_cast<float>(hu);
        label(h, w, l) = in ? 1 : 0;
      }
  if (label.empty()) throw std::invalid_argument("phantom: lesion does not cover any voxel centre");
  v.label = std::move(label);
  v.recist_diameter = extract_recist_slice(v).image.recist_diameter;
  return v;
}

}  // namespace mdust
