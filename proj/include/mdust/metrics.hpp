// Evaluation statistics: Dice similarity, surface Hausdorff distance and the
// two-sided paired t-test.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdust {

struct BinaryMask {
  std::array<std::size_t, 3> dims{1, 1, 1};  // H, W, L
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::vector<std::uint8_t> voxels;

  BinaryMask() = default;
  BinaryMask(std::array<std::size_t, 3> d, std::array<double, 3> s = {1.0, 1.0, 1.0})
      : dims(d), spacing(s), voxels(d[0] * d[1] * d[2], 0) {
    validate();
  }

  std::size_t size() const { return voxels.size(); }
  std::size_t index(std::size_t h, std::size_t w, std::size_t l) const { return (h * dims[1] + w) * dims[2] + l; }
  std::uint8_t& operator()(std::size_t h, std::size_t w, std::size_t l) { return voxels[index(h, w, l)]; }
  std::uint8_t operator()(std::size_t h, std::size_t w, std::size_t l) const { return voxels[index(h, w, l)]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : voxels) n += v;
    return n;
  }

  bool empty() const { return count() == 0; }

  void validate() const {
    for (double s : spacing)
      if (!(s > 0.0)) throw std::invalid_argument("mask spacing must be positive");
    if (voxels.size() != dims[0] * dims[1] * dims[2]) throw std::invalid_argument("mask payload does not match dims");
    for (auto v : voxels)
      if (v > 1) throw std::invalid_argument("mask values must be 0 or 1");
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

// 2|A n B| / (|A| + |B|); two empty masks score 1.
inline double dsc(const BinaryMask& a, const BinaryMask& b) {
  if (a.dims != b.dims) throw std::invalid_argument("dsc: masks are on different grids");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a.voxels[i] & b.voxels[i];
    na += a.voxels[i];
    nb += b.voxels[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

// Foreground voxels with at least one 6-connected background neighbour;
// voxels outside the grid count as background. Returned in mm.
inline std::vector<std::array<double, 3>> surface_points(const BinaryMask& m) {
  std::vector<std::array<double, 3>> pts;
  const auto& d = m.dims;
  for (std::size_t h = 0; h < d[0]; ++h)
    for (std::size_t w = 0; w < d[1]; ++w)
      for (std::size_t l = 0; l < d[2]; ++l) {
        if (!m(h, w, l)) continue;
        const bool border = h == 0 || w == 0 || l == 0 || h + 1 == d[0] || w + 1 == d[1] || l + 1 == d[2] || !m(h - 1, w, l) ||
                            !m(h + 1, w, l) || !m(h, w - 1, l) || !m(h, w + 1, l) || !m(h, w, l - 1) || !m(h, w, l + 1);
        if (border) {
          pts.push_back({static_cast<double>(h) * m.spacing[0], static_cast<double>(w) * m.spacing[1], static_cast<double>(l) * m.spacing[2]});
        }
      }
  return pts;
}

namespace detail {

// Directed Hausdorff (squared) with early break: once a point of `from` is
// closer than the running maximum to anything in `to`, it cannot raise it.
inline double directed_hausdorff_sq(const std::vector<std::array<double, 3>>& from, const std::vector<std::array<double, 3>>& to) {
  double cmax = 0.0;
  for (const auto& p : from) {
    double cmin = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
      const double d2 = dx * dx + dy * dy + dz * dz;
      if (d2 < cmin) {
        cmin = d2;
        if (cmin <= cmax) break;
      }
    }
    if (cmin > cmax) cmax = cmin;
  }
  return cmax;
}

}  // namespace detail

class UndefinedDistance : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Symmetric Hausdorff distance (mm) between the two masks' surfaces.
inline double hausdorff(const BinaryMask& a, const BinaryMask& b) {
  if (a.dims != b.dims) throw std::invalid_argument("hausdorff: masks are on different grids");
  if (a.empty() || b.empty()) throw UndefinedDistance("hausdorff: distance to an empty mask is undefined");
  const auto sa = surface_points(a);
  const auto sb = surface_points(b);
  return std::sqrt(std::max(detail::directed_hausdorff_sq(sa, sb), detail::directed_hausdorff_sq(sb, sa)));
}

// ---------------------------------------------------------------- paired t-test

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw std::runtime_error("incomplete beta: continued fraction did not converge");
}

}  // namespace detail

// Regularised incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x < 0.0 || x > 1.0) throw std::domain_error("incomplete_beta: x outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

// P(|T| >= |t|) for Student's t with `df` degrees of freedom.
inline double student_t_two_sided_p(double t, double df) { return incomplete_beta(0.5 * df, 0.5, df / (df + t * t)); }

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
  double mean_difference = 0.0;
  bool significant = false;  // p < alpha
};

inline TTestResult paired_t_test(const std::vector<double>& x, const std::vector<double>& y, double alpha = 0.05) {
  if (x.size() != y.size()) throw std::invalid_argument("paired_t_test: samples differ in length");
  if (x.size() < 2) throw std::invalid_argument("paired_t_test: need at least two pairs");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mean += x[i] - y[i];
  mean /= n;
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i] - mean;
    ss += d * d;
  }
  const double var = ss / (n - 1.0);
  if (!(var > 0.0)) throw std::domain_error("paired_t_test: differences have zero variance, t is undefined");
  TTestResult r;
  r.df = n - 1.0;
  r.mean_difference = mean;
  r.t = mean / std::sqrt(var / n);
  r.p = student_t_two_sided_p(r.t, r.df);
  r.significant = r.p < alpha;
  return r;
}

}  // namespace mdust
