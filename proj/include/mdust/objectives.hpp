// Training objectives: MAE reconstruction, NT-Xent contrastive and Dice-CE
// segmentation losses. Each returns a differentiable scalar.
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mdust/ops.hpp"

namespace mdust {

template <typename T>
Var<T> mae_loss(const Var<T>& pred, const Tensor<T>& target) {
  detail::require(pred.shape() == target.shape(),
                  "mae_loss: prediction " + to_string(pred.shape()) + " vs target " + to_string(target.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) acc += std::abs(static_cast<double>(pred.value()[i]) - static_cast<double>(target[i]));
  const double n = static_cast<double>(target.size());
  auto tgt = std::make_shared<Tensor<T>>(target);
  return Var<T>::make(Tensor<T>::scalar(static_cast<T>(acc / n)), "mae_loss", {pred}, [tgt, n](auto& self) {
    auto& p = *self.inputs[0];
    T* d = p.grad_buffer();
    const T g = static_cast<T>(self.grad[0] / n);
    for (std::size_t i = 0; i < tgt->size(); ++i) {
      const T diff = p.value[i] - (*tgt)[i];
      d[i] += diff > T{0} ? g : (diff < T{0} ? -g : T{0});
    }
  });
}

// NT-Xent over 2B embeddings: rows [0, B) are anchors, row i + B is the
// positive view of row i (and vice versa). Every other row in the batch is a
// negative. Similarities are cosine / tau; the loss is averaged over all 2B
// anchors.
template <typename T>
Var<T> nt_xent(const Var<T>& z, double tau = 0.5) {
  detail::require(z.rank() == 2 && z.dim(0) >= 2 && z.dim(0) % 2 == 0, "nt_xent: expected [2B, D] with B >= 1, got " + to_string(z.shape()));
  if (!(tau > 0.0)) throw std::invalid_argument("nt_xent: temperature must be positive");
  const std::size_t n = z.dim(0), dim = z.dim(1), half = n / 2;
  auto unit = std::make_shared<std::vector<double>>(n * dim);
  auto norms = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double v = static_cast<double>(z.value()[i * dim + k]);
      if (!std::isfinite(v)) throw std::invalid_argument("nt_xent: non-finite embedding");
      s += v * v;
    }
    if (s == 0.0) throw std::invalid_argument("nt_xent: zero embedding has no cosine similarity (row " + std::to_string(i) + ")");
    (*norms)[i] = std::sqrt(s);
    for (std::size_t k = 0; k < dim; ++k) (*unit)[i * dim + k] = static_cast<double>(z.value()[i * dim + k]) / (*norms)[i];
  }
  auto partner = [half](std::size_t i) { return i < half ? i + half : i - half; };
  // probs[i][k] = softmax over k != i of sim(i, k); dloss/dsim(i,k) = (probs - [k == partner]) / n.
  auto coeff = std::make_shared<std::vector<double>>(n * n, 0.0);
  double loss = 0.0;
  std::vector<double> sim(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      double dot = 0.0;
      for (std::size_t c = 0; c < dim; ++c) dot += (*unit)[i * dim + c] * (*unit)[k * dim + c];
      sim[k] = dot / tau;
      mx = std::max(mx, sim[k]);
    }
    double zsum = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) zsum += std::exp(sim[k] - mx);
    const double log_z = mx + std::log(zsum);
    loss += log_z - sim[partner(i)];
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      (*coeff)[i * n + k] = (std::exp(sim[k] - log_z) - (k == partner(i) ? 1.0 : 0.0)) / static_cast<double>(n);
    }
  }
  loss /= static_cast<double>(n);
  return Var<T>::make(Tensor<T>::scalar(static_cast<T>(loss)), "nt_xent", {z}, [unit, norms, coeff, n, dim, tau](auto& self) {
    const double g = static_cast<double>(self.grad[0]);
    std::vector<double> du(dim);
    T* d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      std::fill(du.begin(), du.end(), 0.0);
      for (std::size_t k = 0; k < n; ++k) {
        const double c = ((*coeff)[i * n + k] + (*coeff)[k * n + i]) / tau;
        if (c == 0.0) continue;
        for (std::size_t j = 0; j < dim; ++j) du[j] += c * (*unit)[k * dim + j];
      }
      double proj = 0.0;
      for (std::size_t j = 0; j < dim; ++j) proj += du[j] * (*unit)[i * dim + j];
      for (std::size_t j = 0; j < dim; ++j) {
        d[i * dim + j] += static_cast<T>(g * (du[j] - (*unit)[i * dim + j] * proj) / (*norms)[i]);
      }
    }
  });
}

// Soft Dice on the foreground channel plus voxelwise cross entropy, equally
// weighted. logits: [B, 2, ...]; labels: [B, 1, ...] with values in {0, 1}.
template <typename T>
Var<T> dice_ce_loss(const Var<T>& logits, const Tensor<T>& labels, double smooth = 1e-5) {
  detail::require(logits.rank() >= 3 && logits.dim(1) == 2, "dice_ce_loss: logits must be [B,2,...], got " + to_string(logits.shape()));
  Shape expected = logits.shape();
  expected[1] = 1;
  detail::require(labels.shape() == expected, "dice_ce_loss: labels " + to_string(labels.shape()) + " do not match logits " + to_string(logits.shape()));
  const std::size_t B = logits.dim(0);
  const std::size_t S = labels.size() / B;
  const std::size_t N = labels.size();
  auto fg = std::make_shared<std::vector<double>>(N);
  double inter = 0.0, psum = 0.0, gsum = 0.0, ce = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* a0 = logits.value().ptr() + b * 2 * S;
    const T* a1 = a0 + S;
    for (std::size_t v = 0; v < S; ++v) {
      const double g = static_cast<double>(labels[b * S + v]);
      if (g != 0.0 && g != 1.0) throw std::invalid_argument("dice_ce_loss: labels must be binary");
      const double diff = static_cast<double>(a1[v]) - static_cast<double>(a0[v]);
      const double p = 1.0 / (1.0 + std::exp(-diff));
      (*fg)[b * S + v] = p;
      inter += p * g;
      psum += p;
      gsum += g;
      // -log softmax of the true class, computed stably.
      const double margin = g == 1.0 ? diff : -diff;
      ce += margin > 0 ? std::log1p(std::exp(-margin)) : -margin + std::log1p(std::exp(margin));
    }
  }
  const double denom = psum + gsum + smooth;
  const double dice = 1.0 - 2.0 * inter / denom;
  const double loss = dice + ce / static_cast<double>(N);
  auto lab = std::make_shared<Tensor<T>>(labels);
  return Var<T>::make(Tensor<T>::scalar(static_cast<T>(loss)), "dice_ce_loss", {logits}, [fg, lab, inter, denom, B, S, N](auto& self) {
    const double gout = static_cast<double>(self.grad[0]);
    T* d = self.inputs[0]->grad_buffer();
    for (std::size_t b = 0; b < B; ++b) {
      T* d0 = d + b * 2 * S;
      T* d1 = d0 + S;
      for (std::size_t v = 0; v < S; ++v) {
        const double p = (*fg)[b * S + v];
        const double g = static_cast<double>((*lab)[b * S + v]);
        const double ddice_dp = -2.0 * (g * denom - inter) / (denom * denom);
        const double dda = ddice_dp * p * (1.0 - p) + (p - g) / static_cast<double>(N);
        d1[v] += static_cast<T>(gout * dda);
        d0[v] -= static_cast<T>(gout * dda);
      }
    }
  });
}

}  // namespace mdust
