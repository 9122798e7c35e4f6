#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mdust/autograd.hpp"

namespace mdust {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter first/second moment buffers plus the shared step count.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update. Parameters without a gradient are treated
// as having a zero gradient.
template <typename T>
void adam_step(std::vector<Var<T>>& params, const AdamOptions& opt, AdamState<T>& state) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), T{0});
      state.v[i].assign(params[i].size(), T{0});
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(opt.beta1, t);
  const double bc2 = 1.0 - std::pow(opt.beta2, t);
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var<T>& p = params[i];
    if (!p.has_grad()) {
      // Zero gradient still decays the moments.
      for (std::size_t k = 0; k < p.size(); ++k) {
        state.m[i][k] *= b1;
        state.v[i][k] *= b2;
      }
    }
    const T* g = p.has_grad() ? p.grad().ptr() : nullptr;
    T* w = p.mutable_value().ptr();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (g) {
        m[k] = b1 * m[k] + (T{1} - b1) * g[k];
        v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
      }
      const double mhat = static_cast<double>(m[k]) / bc1;
      const double vhat = static_cast<double>(v[k]) / bc2;
      w[k] = static_cast<T>(static_cast<double>(w[k]) - opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
    }
  }
}

template <typename T>
void zero_grad(std::vector<Var<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace mdust
