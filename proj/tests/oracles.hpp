// Direct-summation and all-pairs reference implementations, written
// independently of the library code they check.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "mdust/metrics.hpp"
#include "mdust/tensor.hpp"

namespace mdust::testing {

inline double nt_xent_oracle(const Tensor<double>& z, double tau) {
  const std::size_t n = z.dim(0), d = z.dim(1), half = n / 2;
  auto cos = [&](std::size_t i, std::size_t k) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t c = 0; c < d; ++c) {
      ab += z[i * d + c] * z[k * d + c];
      aa += z[i * d + c] * z[i * d + c];
      bb += z[k * d + c] * z[k * d + c];
    }
    return ab / std::sqrt(aa * bb);
  };
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i < half ? i + half : i - half;
    double denom = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) denom += std::exp(cos(i, k) / tau);
    total += -std::log(std::exp(cos(i, j) / tau) / denom);
  }
  return total / static_cast<double>(n);
}

inline double hausdorff_oracle(const BinaryMask& a, const BinaryMask& b) {
  auto surface = [](const BinaryMask& m) {
    std::vector<std::array<double, 3>> s;
    const auto& d = m.dims;
    auto fg = [&](long h, long w, long l) {
      if (h < 0 || w < 0 || l < 0 || h >= static_cast<long>(d[0]) || w >= static_cast<long>(d[1]) || l >= static_cast<long>(d[2])) return false;
      return m(static_cast<std::size_t>(h), static_cast<std::size_t>(w), static_cast<std::size_t>(l)) == 1;
    };
    for (long h = 0; h < static_cast<long>(d[0]); ++h)
      for (long w = 0; w < static_cast<long>(d[1]); ++w)
        for (long l = 0; l < static_cast<long>(d[2]); ++l) {
          if (!fg(h, w, l)) continue;
          if (!fg(h - 1, w, l) || !fg(h + 1, w, l) || !fg(h, w - 1, l) || !fg(h, w + 1, l) || !fg(h, w, l - 1) || !fg(h, w, l + 1))
            s.push_back({h * m.spacing[0], w * m.spacing[1], l * m.spacing[2]});
        }
    return s;
  };
  const auto sa = surface(a), sb = surface(b);
  double worst = 0.0;
  for (const auto* pair : {&sa, &sb}) {
    const auto& from = *pair;
    const auto& to = pair == &sa ? sb : sa;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double d2 = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2]);
        best = std::min(best, d2);
      }
      worst = std::max(worst, best);
    }
  }
  return std::sqrt(worst);
}

}  // namespace mdust::testing
