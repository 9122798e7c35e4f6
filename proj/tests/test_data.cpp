#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "common.hpp"
#include "mdust/corpus.hpp"
#include "mdust/phantom.hpp"
#include "mdust/preprocess.hpp"

using namespace mdust;

namespace {

LesionVolume random_volume(std::array<std::size_t, 3> dims, std::array<double, 3> spacing, std::mt19937_64& rng, bool label = true) {
  LesionVolume v(dims, spacing, 10.0);
  std::uniform_real_distribution<float> hu(-1000.0f, 1000.0f);
  for (auto& x : v.voxels) x = hu(rng);
  if (label) {
    v.label = mdust::testing::random_mask(dims, rng);
    v.label->spacing = spacing;
  }
  return v;
}

// Voxel ball of radius r (voxels) centred at c.
LesionVolume ball(std::array<std::size_t, 3> dims, std::array<double, 3> c, double r, double diameter) {
  LesionVolume v(dims, {0.75, 0.75, 0.75}, diameter, -50.0f);
  v.label = BinaryMask(dims, v.spacing);
  for (std::size_t h = 0; h < dims[0]; ++h)
    for (std::size_t w = 0; w < dims[1]; ++w)
      for (std::size_t l = 0; l < dims[2]; ++l) {
        const double dh = h - c[0], dw = w - c[1], dl = l - c[2];
        if (dh * dh + dw * dw + dl * dl <= r * r) {
          v(h, w, l) = 40.0f;
          (*v.label)(h, w, l) = 1;
        }
      }
  return v;
}

std::array<double, 3> centroid_of_largest_slice(const BinaryMask& m) {
  const auto area = axial_areas(m);
  const auto l = static_cast<std::size_t>(std::max_element(area.begin(), area.end()) - area.begin());
  double sh = 0, sw = 0;
  for (std::size_t h = 0; h < m.dims[0]; ++h)
    for (std::size_t w = 0; w < m.dims[1]; ++w)
      if (m(h, w, l)) sh += h, sw += w;
  return {sh / area[l], sw / area[l], static_cast<double>(l)};
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() / ("mdust_data_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST(ResampleIso, IdentityOnIsotropicGrid) {
  std::mt19937_64 rng(1);
  const auto v = random_volume({6, 5, 4}, {0.75, 0.75, 0.75}, rng);
  const auto r = resample_iso(v);
  EXPECT_EQ(r.dims, v.dims);
  EXPECT_EQ(r.voxels, v.voxels);
  EXPECT_EQ(*r.label, *v.label);
}

TEST(ResampleIso, ShapeRuleAndLinearReproduction) {
  LesionVolume v({9, 9, 5}, {1.5, 1.5, 1.5}, 10.0);
  for (std::size_t h = 0; h < 9; ++h)
    for (std::size_t w = 0; w < 9; ++w)
      for (std::size_t l = 0; l < 5; ++l) v(h, w, l) = static_cast<float>(1.5 * h + 3.0 * l);
  const auto r = resample_iso(v);
  EXPECT_EQ(r.dims, (std::array<std::size_t, 3>{17, 17, 9}));
  EXPECT_EQ(r.spacing, (std::array<double, 3>{0.75, 0.75, 0.75}));
  for (std::size_t h = 0; h < 17; ++h)
    for (std::size_t l = 0; l < 9; ++l) EXPECT_NEAR(r(h, 4, l), 0.75 * h + 1.5 * l, 1e-4);

  LesionVolume flat({4, 7, 1}, {0.5, 0.9, 5.0}, 10.0, 123.0f);
  const auto rf = resample_iso(flat);
  EXPECT_EQ(rf.dims[2], 1u);
  EXPECT_EQ(rf.spacing[2], 5.0);
  for (float x : rf.voxels) EXPECT_FLOAT_EQ(x, 123.0f);
}

TEST(ResampleIso, LabelsStayBinaryNearest) {
  std::mt19937_64 rng(2);
  const auto r = resample_iso(random_volume({7, 7, 7}, {1.2, 0.9, 1.5}, rng));
  EXPECT_NO_THROW(r.validate());
}

TEST(CropRecist, EdgeFromDiameter) {
  const auto v = ball({80, 80, 80}, {30, 45, 50}, 6, 24.0);
  const auto c = crop_recist(v);
  EXPECT_EQ(c.dims, (std::array<std::size_t, 3>{64, 64, 64}));
  const auto cen = centroid_of_largest_slice(*c.label);
  for (int a = 0; a < 3; ++a) EXPECT_NEAR(cen[a], 32.0, 1.0);
  // Contents are a pure translation of the source.
  EXPECT_EQ(c(32, 32, 32), v(30, 45, 50));
  EXPECT_EQ(c(2, 0, 0), v(0, 13, 18));
  EXPECT_EQ(c(0, 0, 0), 0.0f);
  EXPECT_THROW(crop_recist(LesionVolume({4, 4, 4}, {1, 1, 1}, 0.0)), std::invalid_argument);
}

TEST(CropRecist, BoundaryLesionIsZeroFilled) {
  const auto v = ball({40, 40, 40}, {3, 3, 3}, 3, 24.0);
  const auto c = crop_recist(v);
  ASSERT_EQ(c.dims, (std::array<std::size_t, 3>{64, 64, 64}));
  // Source voxel s lands at s + 29 on every axis.
  for (std::size_t h = 0; h < 64; ++h)
    for (std::size_t w = 0; w < 64; ++w)
      for (std::size_t l = 0; l < 64; ++l) {
        const bool outside = h < 29 || w < 29 || l < 29;
        if (outside) {
          ASSERT_EQ(c(h, w, l), 0.0f);
          ASSERT_EQ((*c.label)(h, w, l), 0);
        } else {
          ASSERT_EQ(c(h, w, l), v(h - 29, w - 29, l - 29));
          ASSERT_EQ((*c.label)(h, w, l), (*v.label)(h - 29, w - 29, l - 29));
        }
      }
  EXPECT_EQ(c.label->count(), v.label->count());
}

TEST(PadCrop, ArithmeticAndIdentity) {
  std::mt19937_64 rng(3);
  const auto v = random_volume({100, 100, 100}, {0.75, 0.75, 0.75}, rng);
  const auto r = pad_crop(v, {128, 128, 64});
  ASSERT_EQ(r.dims, (std::array<std::size_t, 3>{128, 128, 64}));
  for (std::size_t h = 0; h < 128; ++h)
    for (std::size_t w = 0; w < 128; ++w)
      for (std::size_t l = 0; l < 64; ++l) {
        const bool pad = h < 14 || h >= 114 || w < 14 || w >= 114;
        ASSERT_EQ(r(h, w, l), pad ? 0.0f : v(h - 14, w - 14, l + 18));
        ASSERT_EQ((*r.label)(h, w, l), pad ? 0 : (*v.label)(h - 14, w - 14, l + 18));
      }
  const auto same = pad_crop(v, v.dims);
  EXPECT_EQ(same.voxels, v.voxels);
  EXPECT_EQ(*same.label, *v.label);
}

TEST(PadCrop, PadThenCropLosesOnlyBoundary) {
  std::mt19937_64 rng(4);
  const auto v = random_volume({10, 9, 7}, {1, 1, 1}, rng);
  const auto small = pad_crop(pad_crop(v, {16, 15, 11}), {6, 5, 3});
  const auto direct = pad_crop(v, {6, 5, 3});
  EXPECT_EQ(small.voxels, direct.voxels);
  const auto back = pad_crop(pad_crop(v, {20, 20, 20}), v.dims);
  EXPECT_EQ(back.voxels, v.voxels);
}

TEST(NormalizeHu, ValuesAndAffinity) {
  EXPECT_EQ(normalize_hu(-1024.0f), 0.0f);
  EXPECT_EQ(normalize_hu(1976.0f), 1.0f);
  EXPECT_NEAR(normalize_hu(0.0f), 1024.0 / 3000.0, 1e-7);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> hu(-1000.0f, 1000.0f);
  for (int i = 0; i < 100; ++i) {
    const float a = hu(rng), b = hu(rng);
    EXPECT_NEAR(normalize_hu(a) + normalize_hu(b) - normalize_hu(0.0f), normalize_hu(a + b), 1e-6);
  }
}

TEST(Downsample2x, ShapeConstantRamp) {
  const auto big = downsample_2x(LesionVolume({128, 128, 64}, {0.75, 0.75, 0.75}, 10.0, 7.0f));
  EXPECT_EQ(big.dims, (std::array<std::size_t, 3>{64, 64, 32}));
  EXPECT_EQ(big.spacing, (std::array<double, 3>{1.5, 1.5, 1.5}));
  for (float x : big.voxels) ASSERT_EQ(x, 7.0f);

  LesionVolume ramp({8, 6, 4}, {1, 1, 1}, 10.0);
  for (std::size_t h = 0; h < 8; ++h)
    for (std::size_t w = 0; w < 6; ++w)
      for (std::size_t l = 0; l < 4; ++l) ramp(h, w, l) = static_cast<float>(h + 2.0 * w - l);
  const auto r = downsample_2x(ramp);
  ASSERT_EQ(r.dims, (std::array<std::size_t, 3>{4, 3, 2}));
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t w = 0; w < 3; ++w)
      for (std::size_t l = 0; l < 2; ++l) EXPECT_NEAR(r(h, w, l), h * 7.0 / 3.0 + 2.0 * w * 5.0 / 2.0 - l * 3.0, 1e-5);

  EXPECT_THROW(downsample_2x(LesionVolume({8, 7, 4}, {1, 1, 1}, 10.0)), std::invalid_argument);
  EXPECT_EQ(downsample_2x(LesionVolume({8, 8, 1}, {1, 1, 1}, 10.0)).dims, (std::array<std::size_t, 3>{4, 4, 1}));
}

TEST(MaskRoi, RatioLocalityDeterminism) {
  std::mt19937_64 rng(6);
  for (const auto dims : {std::array<std::size_t, 3>{32, 32, 16}, {64, 64, 32}, {17, 23, 9}, {32, 32, 1}}) {
    const auto v = random_volume(dims, {1, 1, 1}, rng, false);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto [masked, roi] = mask_roi(v, 0.15, seed);
      const double frac = static_cast<double>(roi.count()) / static_cast<double>(roi.size());
      EXPECT_GE(frac, 0.14);
      EXPECT_LE(frac, 0.16);
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (roi.voxels[i]) {
          ASSERT_EQ(masked.voxels[i], 0.0f);
        } else {
          ASSERT_EQ(std::bit_cast<std::uint32_t>(masked.voxels[i]), std::bit_cast<std::uint32_t>(v.voxels[i]));
        }
      }
      const auto again = mask_roi(v, 0.15, seed);
      EXPECT_EQ(again.second, roi);
      EXPECT_EQ(again.first.voxels, masked.voxels);
    }
  }
  EXPECT_THROW(mask_roi(LesionVolume({4, 4, 4}, {1, 1, 1}, 1.0), 1.0, 0), std::invalid_argument);
}

TEST(MaskRoi, RoiIsOneCuboid) {
  const LesionVolume v({20, 24, 12}, {1, 1, 1}, 5.0, 1.0f);
  const auto roi = mask_roi(v, 0.15, 99).second;
  std::array<std::size_t, 3> lo{99, 99, 99}, hi{0, 0, 0};
  for (std::size_t h = 0; h < 20; ++h)
    for (std::size_t w = 0; w < 24; ++w)
      for (std::size_t l = 0; l < 12; ++l)
        if (roi(h, w, l)) {
          lo = {std::min(lo[0], h), std::min(lo[1], w), std::min(lo[2], l)};
          hi = {std::max(hi[0], h), std::max(hi[1], w), std::max(hi[2], l)};
        }
  EXPECT_EQ(roi.count(), (hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1) * (hi[2] - lo[2] + 1));
}

TEST(GenPhantom, LabelVolumeMatchesEllipsoid) {
  PhantomSpec spec;
  spec.dims = {64, 64, 48};
  spec.spacing = {0.5, 0.5, 0.5};
  spec.rotation = 0.4;
  const auto v = gen_phantom(spec);
  const double vol = static_cast<double>(v.label->count()) * 0.125;
  EXPECT_NEAR(vol / spec.ellipsoid_volume_mm3(), 1.0, 0.05);
}

TEST(GenPhantom, ZeroNoiseIsTwoValued) {
  PhantomSpec spec;
  spec.noise_sigma_hu = 0.0;
  const auto v = gen_phantom(spec);
  const std::set<float> values(v.voxels.begin(), v.voxels.end());
  EXPECT_EQ(values, (std::set<float>{-50.0f, 30.0f}));
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.voxels[i], v.label->voxels[i] ? 30.0f : -50.0f);
}

TEST(GenPhantom, SeededAndValidated) {
  const auto a = gen_phantom(PhantomSpec::random(17)), b = gen_phantom(PhantomSpec::random(17));
  EXPECT_EQ(a.voxels, b.voxels);
  EXPECT_EQ(*a.label, *b.label);
  EXPECT_NE(a.voxels, gen_phantom(PhantomSpec::random(18)).voxels);
  PhantomSpec bad;
  bad.radii_mm[1] = 0.0;
  EXPECT_THROW(gen_phantom(bad), std::invalid_argument);
}

TEST(RecistSlice, SphereGivesEquatorAndChord) {
  PhantomSpec spec;
  spec.dims = {33, 33, 33};
  spec.spacing = {1, 1, 1};
  spec.radii_mm = {10, 10, 10};
  const auto v = gen_phantom(spec);
  const auto s = extract_recist_slice(v);
  EXPECT_EQ(s.axial_index, 16u);
  EXPECT_EQ(s.image.dims, (std::array<std::size_t, 3>{33, 33, 1}));
  EXPECT_NEAR(s.image.recist_diameter, 20.0, 1.0);
  EXPECT_EQ(v.recist_diameter, s.image.recist_diameter);
}

TEST(RecistSlice, MatchesExhaustiveOracles) {
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    const auto v = gen_phantom(PhantomSpec::random(seed));
    const auto s = extract_recist_slice(v);
    const auto& m = *v.label;
    std::size_t best = 0, best_area = 0;
    for (std::size_t l = 0; l < m.dims[2]; ++l) {
      std::size_t a = 0;
      for (std::size_t h = 0; h < m.dims[0]; ++h)
        for (std::size_t w = 0; w < m.dims[1]; ++w) a += m(h, w, l);
      if (a > best_area) best_area = a, best = l;
    }
    EXPECT_EQ(s.axial_index, best);
    EXPECT_EQ(s.image.label->count(), best_area);

    std::vector<std::array<double, 2>> pts;
    for (std::size_t h = 0; h < m.dims[0]; ++h)
      for (std::size_t w = 0; w < m.dims[1]; ++w)
        if (m(h, w, best)) pts.push_back({h * v.spacing[0], w * v.spacing[1]});
    double chord = 0.0;
    for (const auto& p : pts)
      for (const auto& q : pts) chord = std::max(chord, std::hypot(p[0] - q[0], p[1] - q[1]));
    EXPECT_NEAR(s.image.recist_diameter, chord, v.spacing[0]);
  }
  EXPECT_THROW(extract_recist_slice(LesionVolume({4, 4, 4}, {1, 1, 1}, 1.0)), std::invalid_argument);
}

TEST(SplitCorpus, ProportionsAndPartition) {
  EXPECT_EQ(split_sizes(593), (std::array<std::size_t, 3>{416, 60, 117}));
  EXPECT_EQ(split_sizes(10), (std::array<std::size_t, 3>{7, 1, 2}));
  EXPECT_EQ(split_sizes(3), (std::array<std::size_t, 3>{1, 1, 1}));
  EXPECT_THROW(split_sizes(2), std::invalid_argument);
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> pick(3, 300);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = pick(rng);
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    const auto s = split_corpus(ids, trial);
    std::vector<int> all;
    for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(all.end(), part->begin(), part->end());
    std::sort(all.begin(), all.end());
    ASSERT_EQ(all, ids);
    EXPECT_FALSE(s.val.empty());
    EXPECT_FALSE(s.test.empty());
    const auto again = split_corpus(ids, trial);
    EXPECT_EQ(again.train, s.train);
    EXPECT_EQ(again.test, s.test);
  }
}

TEST(Postprocess, ArgmaxAtTargetShape) {
  Tensor<float> logits({1, 2, 2, 2, 1}, {0, 1, 2, 3, 1, 0, 5, -1});
  const auto m = postprocess(logits, {2, 2, 1}, {1, 1, 1});
  EXPECT_EQ(m.voxels, (std::vector<std::uint8_t>{1, 0, 1, 0}));
  Tensor<float> fg({1, 2, 3, 3, 2});
  for (std::size_t i = 0; i < 18; ++i) fg[i] = -5.0f, fg[18 + i] = 5.0f;
  EXPECT_EQ(postprocess(fg, {9, 7, 5}, {1, 1, 1}).count(), 9u * 7u * 5u);
  EXPECT_THROW(postprocess(Tensor<float>({1, 3, 2, 2, 2}), {2, 2, 2}, {1, 1, 1}), ShapeError);
}

TEST(Postprocess, DownUpKeepsSmoothRegions) {
  // Foreground margin a1 - a0 = r - |x - c|; far from the sphere boundary the
  // argmax must survive down-sampling and the return trip.
  const std::size_t n = 32;
  Tensor<double> full({2, n, n, n});
  for (std::size_t h = 0; h < n; ++h)
    for (std::size_t w = 0; w < n; ++w)
      for (std::size_t l = 0; l < n; ++l) {
        const double d = std::sqrt((h - 15.5) * (h - 15.5) + (w - 15.5) * (w - 15.5) + (l - 15.5) * (l - 15.5));
        const std::size_t i = (h * n + w) * n + l;
        full[i] = 0.0;
        full[n * n * n + i] = 9.0 - d;
      }
  const auto coarse = trilinear_resample(full, {16, 16, 16});
  const auto m = postprocess(coarse, {n, n, n}, {1, 1, 1});
  std::size_t checked = 0;
  for (std::size_t h = 0; h < n; ++h)
    for (std::size_t w = 0; w < n; ++w)
      for (std::size_t l = 0; l < n; ++l) {
        const std::size_t i = (h * n + w) * n + l;
        const double margin = full[n * n * n + i];
        if (std::abs(margin) < 2.0) continue;
        ASSERT_EQ(m.voxels[i], margin > 0 ? 1 : 0);
        ++checked;
      }
  EXPECT_GT(checked, n * n * n / 2);
}

TEST(VolumeFile, RoundTripIsBitExact) {
  TempDir dir;
  std::mt19937_64 rng(8);
  auto v = random_volume({5, 4, 3}, {0.7, 1.0 / 3.0, 2.5}, rng);
  v.recist_diameter = 12.345678901234567;
  v.voxels[0] = -0.0f;
  v.voxels[1] = std::numeric_limits<float>::denorm_min();
  write_volume(dir.path / "abc.vol", v);
  const auto r = read_volume(dir.path / "abc.vol");
  EXPECT_EQ(r.id, "abc");
  EXPECT_EQ(r.dims, v.dims);
  EXPECT_EQ(r.spacing, v.spacing);
  EXPECT_EQ(r.recist_diameter, v.recist_diameter);
  for (std::size_t i = 0; i < v.size(); ++i) ASSERT_EQ(std::bit_cast<std::uint32_t>(r.voxels[i]), std::bit_cast<std::uint32_t>(v.voxels[i]));
  EXPECT_EQ(*r.label, *v.label);

  v.label.reset();
  write_volume(dir.path / "nolabel.vol", v);
  EXPECT_FALSE(read_volume(dir.path / "nolabel.vol").label.has_value());
}

TEST(VolumeFile, RejectsCorruptFiles) {
  std::mt19937_64 rng(9);
  const auto bytes = encode_volume(random_volume({3, 3, 3}, {1, 1, 1}, rng));
  EXPECT_THROW(decode_volume(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(decode_volume(bytes + "x"), FormatError);
  EXPECT_THROW(decode_volume("MDUST-VOLUME 2\n" + bytes.substr(bytes.find('\n') + 1)), FormatError);
  EXPECT_THROW(decode_volume("no header"), FormatError);
  auto bad_label = bytes;
  bad_label.back() = 7;
  EXPECT_THROW(decode_volume(bad_label), std::invalid_argument);
  EXPECT_THROW(read_volume("/nonexistent/volume.vol"), std::runtime_error);
}

TEST(Manifest, RoundTrip) {
  TempDir dir;
  const std::vector<ManifestEntry> entries{{"u0.vol", "unlabeled", "u0"}, {"sub/l3.vol", "test", "l3"}};
  write_manifest(dir.path / "manifest.txt", entries);
  const auto m = read_manifest(dir.path / "manifest.txt");
  EXPECT_EQ(m.entries, entries);
  EXPECT_EQ(m.resolve(m.entries[1]), dir.path / "sub/l3.vol");
  EXPECT_EQ(m.with_split("test").size(), 1u);
  EXPECT_THROW(encode_manifest({{"a b.vol", "train", "x"}}), std::invalid_argument);
  std::ofstream(dir.path / "bad.txt") << "only_two fields\n";
  EXPECT_THROW(read_manifest(dir.path / "bad.txt"), FormatError);
}

TEST(Prepare, DeterministicAndGeometricStepsIdempotent) {
  const auto raw = gen_phantom(PhantomSpec::random(5));
  const auto opt = PreprocessOptions::desk();
  const auto a = prepare(raw, opt), b = prepare(raw, opt);
  EXPECT_EQ(a.input.storage(), b.input.storage());
  EXPECT_EQ(a.target->storage(), b.target->storage());
  EXPECT_EQ(a.input.shape(), Shape({1, 1, 32, 32, 16}));
  EXPECT_EQ(a.full_dims, (std::array<std::size_t, 3>{64, 64, 32}));

  const auto iso = resample_iso(raw);
  const auto twice = resample_iso(iso);
  EXPECT_EQ(twice.voxels, iso.voxels);
  const auto padded = pad_crop(crop_recist(iso), opt.padded);
  EXPECT_EQ(pad_crop(padded, opt.padded).voxels, padded.voxels);

  const auto slice = extract_recist_slice(raw).image;
  const auto s2 = prepare(slice, opt);
  EXPECT_EQ(s2.input.shape(), Shape({1, 1, 32, 32, 1}));
}
