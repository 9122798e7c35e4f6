// Small helpers shared by the test programs.
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mdust/metrics.hpp"
#include "mdust/tensor.hpp"

namespace mdust::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

inline BinaryMask random_mask(std::array<std::size_t, 3> dims, std::mt19937_64& rng, double p = 0.3) {
  BinaryMask m(dims);
  std::bernoulli_distribution b(p);
  for (auto& v : m.voxels) v = b(rng) ? 1 : 0;
  return m;
}

}  // namespace mdust::testing
