// Volume preprocessing: isotropic resampling, RECIST-centred cropping,
// pad/crop to the network grid, HU normalisation, x2 down-sampling, the
// masked-ROI pretext transform and output post-processing.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <utility>

#include "mdust/ops.hpp"
#include "mdust/volume.hpp"

namespace mdust {

namespace detail {

// Samples `v` on an output grid where out index o maps to source coordinate
// origin[a] + o * step[a]. Intensities are trilinear; labels nearest.
// Coordinates outside the source read as zero.
inline LesionVolume sample_grid(const LesionVolume& v, const std::array<std::size_t, 3>& out_dims, const std::array<double, 3>& origin,
                                const std::array<double, 3>& step, const std::array<double, 3>& out_spacing) {
  LesionVolume r(out_dims, out_spacing, v.recist_diameter);
  r.id = v.id;
  if (v.label) r.label = BinaryMask(out_dims, out_spacing);
  const auto& d = v.dims;
  auto tap = [](double pos, std::size_t n, std::size_t& i0, std::size_t& i1, double& w1) {
    if (n == 1) {
      i0 = i1 = 0;
      w1 = 0.0;
      return;
    }
    double fl = std::floor(pos);
    if (fl >= static_cast<double>(n - 1)) fl = static_cast<double>(n - 2);
    i0 = static_cast<std::size_t>(fl);
    i1 = i0 + 1;
    w1 = pos - fl;
  };
  for (std::size_t h = 0; h < out_dims[0]; ++h) {
    const double ph = origin[0] + static_cast<double>(h) * step[0];
    for (std::size_t w = 0; w < out_dims[1]; ++w) {
      const double pw = origin[1] + static_cast<double>(w) * step[1];
      for (std::size_t l = 0; l < out_dims[2]; ++l) {
        const double pl = origin[2] + static_cast<double>(l) * step[2];
        const double eps = 1e-9;
        const bool inside = ph > -eps && pw > -eps && pl > -eps && ph < static_cast<double>(d[0] - 1) + eps &&
                            pw < static_cast<double>(d[1] - 1) + eps && pl < static_cast<double>(d[2] - 1) + eps;
        if (!inside) continue;
        std::size_t h0, h1, w0, w1i, l0, l1;
        double fh, fw, flw;
        tap(std::clamp(ph, 0.0, static_cast<double>(d[0] - 1)), d[0], h0, h1, fh);
        tap(std::clamp(pw, 0.0, static_cast<double>(d[1] - 1)), d[1], w0, w1i, fw);
        tap(std::clamp(pl, 0.0, static_cast<double>(d[2] - 1)), d[2], l0, l1, flw);
        auto at = [&](std::size_t a, std::size_t b, std::size_t c) { return static_cast<double>(v(a, b, c)); };
        const double c00 = at(h0, w0, l0) * (1 - flw) + at(h0, w0, l1) * flw;
        const double c01 = at(h0, w1i, l0) * (1 - flw) + at(h0, w1i, l1) * flw;
        const double c10 = at(h1, w0, l0) * (1 - flw) + at(h1, w0, l1) * flw;
        const double c11 = at(h1, w1i, l0) * (1 - flw) + at(h1, w1i, l1) * flw;
        r(h, w, l) = static_cast<float>(((c00 * (1 - fw) + c01 * fw) * (1 - fh)) + ((c10 * (1 - fw) + c11 * fw) * fh));
        if (v.label) {
          const auto nh = static_cast<std::size_t>(std::lround(std::clamp(ph, 0.0, static_cast<double>(d[0] - 1))));
          const auto nw = static_cast<std::size_t>(std::lround(std::clamp(pw, 0.0, static_cast<double>(d[1] - 1))));
          const auto nl = static_cast<std::size_t>(std::lround(std::clamp(pl, 0.0, static_cast<double>(d[2] - 1))));
          (*r.label)(h, w, l) = (*v.label)(nh, nw, nl);
        }
      }
    }
  }
  return r;
}

// Integer-offset copy: out(o) = v(o + offset), zero outside the source.
inline LesionVolume shift_window(const LesionVolume& v, const std::array<std::size_t, 3>& out_dims, const std::array<std::ptrdiff_t, 3>& offset) {
  LesionVolume r(out_dims, v.spacing, v.recist_diameter);
  r.id = v.id;
  if (v.label) r.label = BinaryMask(out_dims, v.spacing);
  for (std::size_t h = 0; h < out_dims[0]; ++h) {
    const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h) + offset[0];
    if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(v.dims[0])) continue;
    for (std::size_t w = 0; w < out_dims[1]; ++w) {
      const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(w) + offset[1];
      if (sw < 0 || sw >= static_cast<std::ptrdiff_t>(v.dims[1])) continue;
      for (std::size_t l = 0; l < out_dims[2]; ++l) {
        const std::ptrdiff_t sl = static_cast<std::ptrdiff_t>(l) + offset[2];
        if (sl < 0 || sl >= static_cast<std::ptrdiff_t>(v.dims[2])) continue;
        const auto a = static_cast<std::size_t>(sh), b = static_cast<std::size_t>(sw), c = static_cast<std::size_t>(sl);
        r(h, w, l) = v(a, b, c);
        if (v.label) (*r.label)(h, w, l) = (*v.label)(a, b, c);
      }
    }
  }
  return r;
}

}  // namespace detail

// Resamples to `target` mm on every axis with extent > 1. Output voxel i sits
// at physical position i * target, so the grid keeps its origin.
inline LesionVolume resample_iso(const LesionVolume& v, double target = 0.75) {
  v.validate();
  std::array<std::size_t, 3> dims{};
  std::array<double, 3> step{}, spacing{};
  bool identity = true;
  for (int a = 0; a < 3; ++a) {
    if (v.dims[a] == 1) {
      dims[a] = 1;
      step[a] = 1.0;
      spacing[a] = v.spacing[a];
      continue;
    }
    step[a] = target / v.spacing[a];
    dims[a] = static_cast<std::size_t>(std::floor(static_cast<double>(v.dims[a] - 1) * v.spacing[a] / target + 1e-9)) + 1;
    spacing[a] = target;
    identity = identity && v.spacing[a] == target;
  }
  if (identity) return v;
  return detail::sample_grid(v, dims, {0.0, 0.0, 0.0}, step, spacing);
}

// Per-axis area of the label on each axial slice.
inline std::vector<std::size_t> axial_areas(const BinaryMask& m) {
  std::vector<std::size_t> area(m.dims[2], 0);
  for (std::size_t h = 0; h < m.dims[0]; ++h)
    for (std::size_t w = 0; w < m.dims[1]; ++w)
      for (std::size_t l = 0; l < m.dims[2]; ++l) area[l] += m(h, w, l);
  return area;
}

// In-slice centroid of the largest axial label slice, as (h, w, l) voxel
// coordinates. Without a label the grid centre is used.
inline std::array<double, 3> recist_center(const LesionVolume& v) {
  if (!v.label || v.label->empty()) {
    return {0.5 * static_cast<double>(v.dims[0] - 1), 0.5 * static_cast<double>(v.dims[1] - 1), 0.5 * static_cast<double>(v.dims[2] - 1)};
  }
  const auto area = axial_areas(*v.label);
  const auto best = static_cast<std::size_t>(std::max_element(area.begin(), area.end()) - area.begin());
  double sh = 0.0, sw = 0.0;
  for (std::size_t h = 0; h < v.dims[0]; ++h)
    for (std::size_t w = 0; w < v.dims[1]; ++w)
      if ((*v.label)(h, w, best)) {
        sh += static_cast<double>(h);
        sw += static_cast<double>(w);
      }
  const double n = static_cast<double>(area[best]);
  return {sh / n, sw / n, static_cast<double>(best)};
}

// Cube of edge 2d mm (rounded to an even voxel count) centred on the RECIST
// centre; regions outside the source are zero-filled. Axes of extent 1 are kept.
inline LesionVolume crop_recist(const LesionVolume& v) {
  if (!(v.recist_diameter > 0.0)) throw std::invalid_argument("crop_recist: RECIST diameter must be positive");
  v.validate();
  const auto c = recist_center(v);
  std::array<std::size_t, 3> dims{};
  std::array<std::ptrdiff_t, 3> offset{};
  for (int a = 0; a < 3; ++a) {
    if (v.dims[a] == 1) {
      dims[a] = 1;
      offset[a] = 0;
      continue;
    }
    const auto half = static_cast<std::size_t>(std::max<long>(1, std::lround(v.recist_diameter / v.spacing[a])));
    dims[a] = 2 * half;
    offset[a] = static_cast<std::ptrdiff_t>(std::lround(c[a])) - static_cast<std::ptrdiff_t>(half);
  }
  return detail::shift_window(v, dims, offset);
}

// Symmetric zero pad or centre crop to `target` (pad/crop leading side gets
// the floor of half the difference).
inline LesionVolume pad_crop(const LesionVolume& v, const std::array<std::size_t, 3>& target) {
  std::array<std::ptrdiff_t, 3> offset{};
  for (int a = 0; a < 3; ++a) {
    if (target[a] == 0) throw std::invalid_argument("pad_crop: target extents must be positive");
    const auto diff = static_cast<std::ptrdiff_t>(target[a]) - static_cast<std::ptrdiff_t>(v.dims[a]);
    offset[a] = diff >= 0 ? -(diff / 2) : (-diff) / 2;
  }
  return detail::shift_window(v, target, offset);
}

inline float normalize_hu(float hu) { return (hu + 1024.0f) / 3000.0f; }

inline LesionVolume normalize_hu(LesionVolume v) {
  for (float& x : v.voxels) x = normalize_hu(x);
  return v;
}

// Trilinear (corner-aligned) halving of every axis with extent > 1; labels
// nearest. Extents must be even.
inline LesionVolume downsample_2x(const LesionVolume& v) {
  std::array<std::size_t, 3> dims{};
  std::array<double, 3> step{}, spacing{};
  for (int a = 0; a < 3; ++a) {
    if (v.dims[a] == 1) {
      dims[a] = 1;
      step[a] = 0.0;
      spacing[a] = v.spacing[a];
      continue;
    }
    if (v.dims[a] % 2 != 0) throw std::invalid_argument("downsample_2x: extents must be even, got " + std::to_string(v.dims[a]));
    dims[a] = v.dims[a] / 2;
    step[a] = dims[a] > 1 ? static_cast<double>(v.dims[a] - 1) / static_cast<double>(dims[a] - 1) : 0.0;
    spacing[a] = 2.0 * v.spacing[a];
  }
  return detail::sample_grid(v, dims, {0.0, 0.0, 0.0}, step, spacing);
}

// Zeroes one random axis-aligned cuboid holding `ratio` (+-1%) of the grid.
inline std::pair<LesionVolume, BinaryMask> mask_roi(const LesionVolume& v, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("mask_roi: ratio must lie in (0, 1)");
  const auto& d = v.dims;
  const double total = static_cast<double>(v.size());
  const double want = ratio * total;
  const double tol = 0.01 * total;
  std::mt19937_64 rng(seed);
  std::array<std::size_t, 3> edge{0, 0, 0};
  bool found = false;
  // Random aspect first; fall back to the closest feasible box.
  for (int attempt = 0; attempt < 256 && !found; ++attempt) {
    std::array<std::size_t, 3> e{};
    for (int a = 0; a < 2; ++a) {
      const auto lo = static_cast<std::size_t>(std::max(1.0, std::floor(static_cast<double>(d[a]) * std::cbrt(ratio) * 0.6)));
      std::uniform_int_distribution<std::size_t> pick(std::min(lo, d[a]), d[a]);
      e[a] = pick(rng);
    }
    const double rest = want / static_cast<double>(e[0] * e[1]);
    e[2] = static_cast<std::size_t>(std::clamp<long>(std::lround(rest), 1, static_cast<long>(d[2])));
    const double vol = static_cast<double>(e[0] * e[1] * e[2]);
    if (std::abs(vol - want) <= tol) {
      edge = e;
      found = true;
    }
  }
  if (!found) {
    double best = 1e300;
    for (std::size_t a = 1; a <= d[0]; ++a)
      for (std::size_t b = 1; b <= d[1]; ++b)
        for (std::size_t c = 1; c <= d[2]; ++c) {
          const double err = std::abs(static_cast<double>(a * b * c) - want);
          if (err < best) {
            best = err;
            edge = {a, b, c};
          }
        }
  }
  std::array<std::size_t, 3> start{};
  for (int a = 0; a < 3; ++a) {
    std::uniform_int_distribution<std::size_t> pick(0, d[a] - edge[a]);
    start[a] = pick(rng);
  }
  LesionVolume masked = v;
  BinaryMask roi(d, v.spacing);
  for (std::size_t h = start[0]; h < start[0] + edge[0]; ++h)
    for (std::size_t w = start[1]; w < start[1] + edge[1]; ++w)
      for (std::size_t l = start[2]; l < start[2] + edge[2]; ++l) {
        masked(h, w, l) = 0.0f;
        roi(h, w, l) = 1;
      }
  return {std::move(masked), std::move(roi)};
}

// Largest-area axial slice; d is the longest in-slice chord (mm) between
// lesion pixel centres.
inline RecistSlice extract_recist_slice(const LesionVolume& v) {
  if (!v.label || v.label->empty()) throw std::invalid_argument("extract_recist_slice: volume has no lesion label");
  const auto area = axial_areas(*v.label);
  const auto best = static_cast<std::size_t>(std::max_element(area.begin(), area.end()) - area.begin());
  RecistSlice s;
  s.axial_index = best;
  LesionVolume& img = s.image;
  img.dims = {v.dims[0], v.dims[1], 1};
  img.spacing = v.spacing;
  img.id = v.id;
  img.voxels.resize(v.dims[0] * v.dims[1]);
  BinaryMask lab(img.dims, img.spacing);
  std::vector<std::array<double, 2>> boundary;
  for (std::size_t h = 0; h < v.dims[0]; ++h)
    for (std::size_t w = 0; w < v.dims[1]; ++w) {
      img(h, w, 0) = v(h, w, best);
      lab(h, w, 0) = (*v.label)(h, w, best);
    }
  for (std::size_t h = 0; h < v.dims[0]; ++h)
    for (std::size_t w = 0; w < v.dims[1]; ++w) {
      if (!lab(h, w, 0)) continue;
      const bool edge = h == 0 || w == 0 || h + 1 == v.dims[0] || w + 1 == v.dims[1] || !lab(h - 1, w, 0) || !lab(h + 1, w, 0) ||
                        !lab(h, w - 1, 0) || !lab(h, w + 1, 0);
      if (edge) boundary.push_back({static_cast<double>(h) * v.spacing[0], static_cast<double>(w) * v.spacing[1]});
    }
  double best_d2 = 0.0;
  for (std::size_t i = 0; i < boundary.size(); ++i)
    for (std::size_t j = i + 1; j < boundary.size(); ++j) {
      const double dh = boundary[i][0] - boundary[j][0], dw = boundary[i][1] - boundary[j][1];
      best_d2 = std::max(best_d2, dh * dh + dw * dw);
    }
  img.recist_diameter = std::max(std::sqrt(best_d2), std::min(v.spacing[0], v.spacing[1]));
  img.label = std::move(lab);
  return s;
}

// Network logits -> binary mask on the original grid: trilinear resampling of
// the logits, softmax over the two channels, argmax.
template <typename T>
BinaryMask postprocess(const Tensor<T>& logits, const std::array<std::size_t, 3>& original, const std::array<double, 3>& spacing) {
  detail::require((logits.rank() == 4 && logits.dim(0) == 2) || (logits.rank() == 5 && logits.dim(0) == 1 && logits.dim(1) == 2),
                  "postprocess: expected two-channel logits, got " + to_string(logits.shape()));
  const std::size_t r = logits.rank();
  Tensor<T> two = logits.reshaped({2, logits.dim(r - 3), logits.dim(r - 2), logits.dim(r - 1)});
  if (std::array<std::size_t, 3>{two.dim(1), two.dim(2), two.dim(3)} != original) two = trilinear_resample(two, original);
  BinaryMask m(original, spacing);
  const std::size_t n = m.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double a0 = static_cast<double>(two[i]), a1 = static_cast<double>(two[n + i]);
    const double mx = std::max(a0, a1);
    const double e0 = std::exp(a0 - mx), e1 = std::exp(a1 - mx);
    const double p1 = e1 / (e0 + e1);
    m.voxels[i] = p1 > 1.0 - p1 ? 1 : 0;
  }
  return m;
}

// ---------------------------------------------------------------- full chain

struct PreprocessOptions {
  double spacing_mm = 0.75;
  std::array<std::size_t, 3> padded{128, 128, 64};  // 3D grid before down-sampling
  bool downsample = true;

  static PreprocessOptions full() { return {}; }
  static PreprocessOptions desk() { return {0.75, {64, 64, 32}, true}; }

  std::array<std::size_t, 3> grid_for(const LesionVolume& v) const {
    return v.is_2d() ? std::array<std::size_t, 3>{padded[0], padded[1], 1} : padded;
  }
};

// A volume ready for the network: input and (down-sampled) target tensors
// shaped [1,1,H,W,L], plus the pre-down-sampling label used for evaluation.
struct PreparedSample {
  std::string id;
  Tensor<float> input;
  std::optional<Tensor<float>> target;
  std::optional<BinaryMask> full_label;
  std::array<std::size_t, 3> full_dims{};
  std::array<double, 3> full_spacing{};
};

inline Tensor<float> to_tensor(const LesionVolume& v) {
  return Tensor<float>({1, 1, v.dims[0], v.dims[1], v.dims[2]}, v.voxels);
}

inline Tensor<float> to_tensor(const BinaryMask& m) {
  Tensor<float> t({1, 1, m.dims[0], m.dims[1], m.dims[2]});
  for (std::size_t i = 0; i < m.size(); ++i) t[i] = m.voxels[i];
  return t;
}

// resample -> RECIST crop -> pad/crop -> HU normalisation -> x2 down-sampling.
inline PreparedSample prepare(const LesionVolume& raw, const PreprocessOptions& opt) {
  LesionVolume v = normalize_hu(pad_crop(crop_recist(resample_iso(raw, opt.spacing_mm)), opt.grid_for(raw)));
  PreparedSample s;
  s.id = raw.id;
  s.full_dims = v.dims;
  s.full_spacing = v.spacing;
  if (v.label) s.full_label = *v.label;
  const LesionVolume net = opt.downsample ? downsample_2x(v) : v;
  s.input = to_tensor(net);
  if (net.label) s.target = to_tensor(*net.label);
  return s;
}

}  // namespace mdust
