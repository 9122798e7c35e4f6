// Window partitioning, cyclic shifting and windowed multi-head self-attention.
//
// All functions here work on channel-last feature maps [B, H, W, L, C].
// Windows are N x N x N_L voxel boxes; 2D data runs with N_L = 1 on a
// depth-1 volume, so one code path serves both dimensionalities.
#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mdust/ops.hpp"

namespace mdust {

enum class DimMode { TwoD, ThreeD };

inline const char* to_string(DimMode m) { return m == DimMode::TwoD ? "2d" : "3d"; }

struct WindowSpec {
  std::array<std::size_t, 3> window{1, 1, 1};  // (H, W, L) edges
  std::array<std::size_t, 3> shift{0, 0, 0};   // cyclic offsets toward higher index

  // W-SA windows: N x N x N_L, where N_L is N for 3D data and 1 for 2D data.
  static WindowSpec regular(std::size_t n, DimMode mode) {
    WindowSpec s;
    s.window = {n, n, mode == DimMode::ThreeD ? n : 1};
    s.validate();
    return s;
  }

  // SW-SA windows: same boxes, shifted by half an edge (floor) on every axis.
  static WindowSpec shifted(std::size_t n, DimMode mode) {
    WindowSpec s = regular(n, mode);
    for (int a = 0; a < 3; ++a) s.shift[a] = s.window[a] / 2;
    return s;
  }

  bool is_shifted() const { return shift != std::array<std::size_t, 3>{0, 0, 0}; }

  // Clamps each edge to the feature extent. An axis covered by a single
  // window gets no shift.
  WindowSpec fitted(const std::array<std::size_t, 3>& extent) const {
    WindowSpec s = *this;
    for (int a = 0; a < 3; ++a) {
      if (s.window[a] >= extent[a]) {
        s.window[a] = extent[a];
        s.shift[a] = 0;
      }
    }
    return s;
  }

  std::size_t tokens() const { return window[0] * window[1] * window[2]; }

  std::array<std::size_t, 3> windows_per_axis(const std::array<std::size_t, 3>& extent) const {
    return {(extent[0] + window[0] - 1) / window[0], (extent[1] + window[1] - 1) / window[1],
            (extent[2] + window[2] - 1) / window[2]};
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (window[a] < 1) throw ShapeError("window edges must be >= 1");
      if (shift[a] != 0 && shift[a] != window[a] / 2) throw ShapeError("window shift must be 0 or half the window edge");
    }
  }

  friend bool operator==(const WindowSpec&, const WindowSpec&) = default;
};

// Tokens of every window: [B * num_windows, N*N*N_L, C], windows ordered
// (batch, h, w, l), tokens inside a window row-major (h, w, l).
template <typename T>
struct WindowBatch {
  Var<T> tokens;
  Shape source;  // [B, H, W, L, C] before padding
  WindowSpec spec;

  std::size_t num_windows_per_sample() const {
    const auto n = spec.windows_per_axis({source[1], source[2], source[3]});
    return n[0] * n[1] * n[2];
  }
};

namespace detail {

inline std::array<std::size_t, 3> spatial_of(const Shape& s) { return {s[1], s[2], s[3]}; }

// Index map from the [B*nW, T, C] window layout into the [B,H,W,L,C] source;
// -1 marks padding voxels.
inline std::vector<std::int64_t> window_index(const Shape& src, const WindowSpec& spec) {
  const std::size_t B = src[0], H = src[1], W = src[2], L = src[3], C = src[4];
  const auto nw = spec.windows_per_axis({H, W, L});
  const auto& e = spec.window;
  std::vector<std::int64_t> index(B * nw[0] * nw[1] * nw[2] * spec.tokens() * C);
  std::size_t i = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t wh = 0; wh < nw[0]; ++wh)
      for (std::size_t ww = 0; ww < nw[1]; ++ww)
        for (std::size_t wl = 0; wl < nw[2]; ++wl)
          for (std::size_t th = 0; th < e[0]; ++th)
            for (std::size_t tw = 0; tw < e[1]; ++tw)
              for (std::size_t tl = 0; tl < e[2]; ++tl) {
                const std::size_t h = wh * e[0] + th, w = ww * e[1] + tw, l = wl * e[2] + tl;
                const bool inside = h < H && w < W && l < L;
                const std::size_t base = (((b * H + h) * W + w) * L + l) * C;
                for (std::size_t c = 0; c < C; ++c, ++i) index[i] = inside ? static_cast<std::int64_t>(base + c) : -1;
              }
  return index;
}

}  // namespace detail

template <typename T>
WindowBatch<T> window_partition(const Var<T>& x, const WindowSpec& spec) {
  detail::require(x.rank() == 5, "window_partition: expected [B,H,W,L,C], got " + to_string(x.shape()));
  spec.validate();
  const auto nw = spec.windows_per_axis(detail::spatial_of(x.shape()));
  const std::size_t count = x.dim(0) * nw[0] * nw[1] * nw[2];
  auto index = std::make_shared<const std::vector<std::int64_t>>(detail::window_index(x.shape(), spec));
  return {gather(x, std::move(index), Shape{count, spec.tokens(), x.dim(4)}), x.shape(), spec};
}

// Inverse of window_partition: scatters tokens back and crops the padding.
template <typename T>
Var<T> window_reverse(const WindowBatch<T>& wb) {
  detail::require(wb.source.size() == 5, "window_reverse: source shape must be [B,H,W,L,C]");
  wb.spec.validate();
  const Shape& src = wb.source;
  const Shape expected{src[0] * wb.num_windows_per_sample(), wb.spec.tokens(), src[4]};
  detail::require(wb.tokens.shape() == expected, "window_reverse: tokens " + to_string(wb.tokens.shape()) +
                                                     " inconsistent with source " + to_string(src) + " (expected " +
                                                     to_string(expected) + ")");
  const auto forward = detail::window_index(src, wb.spec);
  auto inverse = std::make_shared<std::vector<std::int64_t>>(numel(src), -1);
  for (std::size_t i = 0; i < forward.size(); ++i) {
    if (forward[i] >= 0) (*inverse)[static_cast<std::size_t>(forward[i])] = static_cast<std::int64_t>(i);
  }
  return gather(wb.tokens, std::shared_ptr<const std::vector<std::int64_t>>(std::move(inverse)), src);
}

// Elementwise roll of the spatial axes: out[i] = in[(i - offset) mod extent].
template <typename T>
Var<T> cyclic_shift(const Var<T>& x, const std::array<std::ptrdiff_t, 3>& offsets) {
  detail::require(x.rank() == 5, "cyclic_shift: expected [B,H,W,L,C], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), L = x.dim(3), C = x.dim(4);
  auto wrap = [](std::ptrdiff_t i, std::ptrdiff_t off, std::size_t n) {
    const auto m = static_cast<std::ptrdiff_t>(n);
    return static_cast<std::size_t>((((i - off) % m) + m) % m);
  };
  auto index = std::make_shared<std::vector<std::int64_t>>(x.size());
  std::size_t i = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w)
        for (std::size_t l = 0; l < L; ++l) {
          const std::size_t sh = wrap(static_cast<std::ptrdiff_t>(h), offsets[0], H);
          const std::size_t sw = wrap(static_cast<std::ptrdiff_t>(w), offsets[1], W);
          const std::size_t sl = wrap(static_cast<std::ptrdiff_t>(l), offsets[2], L);
          const std::size_t base = (((b * H + sh) * W + sw) * L + sl) * C;
          for (std::size_t c = 0; c < C; ++c) (*index)[i++] = static_cast<std::int64_t>(base + c);
        }
  return gather(x, std::shared_ptr<const std::vector<std::int64_t>>(std::move(index)), x.shape());
}

// Per-head Q_i, K_i, V_i (C x d_k) stored side by side as C x (I*d_k)
// matrices, plus the output projection W_out (I*d_k x C).
template <typename T>
struct AttentionParams {
  Var<T> query;
  Var<T> key;
  Var<T> value;
  Var<T> out;
  std::size_t heads = 1;

  std::size_t channels() const { return query.dim(0); }
  std::size_t key_dim() const { return query.dim(1) / heads; }

  void validate() const {
    const std::size_t c = channels();
    detail::require(heads >= 1 && query.dim(1) % heads == 0, "attention: heads must divide the projection width");
    detail::require(query.dim(1) == c, "attention: heads * d_k must equal the channel width");
    for (const Var<T>* m : {&query, &key, &value, &out}) {
      detail::require(m->shape() == Shape({c, c}), "attention: projection matrices must be C x C");
    }
  }

  std::vector<Var<T>> parameters() const { return {query, key, value, out}; }
};

namespace detail {

// [n, T, I*dk] <-> [n*I, T, dk]
inline std::vector<std::int64_t> split_heads_index(std::size_t n, std::size_t tokens, std::size_t heads, std::size_t dk) {
  std::vector<std::int64_t> index(n * tokens * heads * dk);
  std::size_t i = 0;
  for (std::size_t w = 0; w < n; ++w)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t j = 0; j < dk; ++j) index[i++] = static_cast<std::int64_t>((w * tokens + t) * heads * dk + h * dk + j);
  return index;
}

inline std::vector<std::int64_t> merge_heads_index(std::size_t n, std::size_t tokens, std::size_t heads, std::size_t dk) {
  std::vector<std::int64_t> index(n * tokens * heads * dk);
  std::size_t i = 0;
  for (std::size_t w = 0; w < n; ++w)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < dk; ++j) index[i++] = static_cast<std::int64_t>(((w * heads + h) * tokens + t) * dk + j);
  return index;
}

}  // namespace detail

// head_i = softmax(M Q_i (M K_i)^T / sqrt(d_k)) (M V_i) for every window M;
// A = Concat(head_1..head_I) W_out. When `weights` is non-null it receives the
// attention matrices, shaped [num_windows * I, T, T].
template <typename T>
Var<T> attention_tokens(const Var<T>& tokens, const AttentionParams<T>& p, Tensor<T>* weights = nullptr) {
  p.validate();
  detail::require(tokens.rank() == 3 && tokens.dim(2) == p.channels(),
                  "mhsa: token channels " + to_string(tokens.shape()) + " do not match attention width " + std::to_string(p.channels()));
  const std::size_t n = tokens.dim(0), t = tokens.dim(1), heads = p.heads, dk = p.key_dim();
  auto split = std::make_shared<const std::vector<std::int64_t>>(detail::split_heads_index(n, t, heads, dk));
  const Shape head_shape{n * heads, t, dk};
  Var<T> q = gather(linear(tokens, p.query), split, head_shape);
  Var<T> k = gather(linear(tokens, p.key), split, head_shape);
  Var<T> v = gather(linear(tokens, p.value), split, head_shape);
  Var<T> scores = scale(bmm(q, k, /*transpose_b=*/true), T{1} / std::sqrt(static_cast<T>(dk)));
  Var<T> attn = softmax(scores, 2);
  if (weights) *weights = attn.value();
  Var<T> ctx = bmm(attn, v);
  auto merge = std::make_shared<const std::vector<std::int64_t>>(detail::merge_heads_index(n, t, heads, dk));
  return linear(gather(ctx, merge, Shape{n, t, heads * dk}), p.out);
}

template <typename T>
WindowBatch<T> mhsa(const WindowBatch<T>& wb, const AttentionParams<T>& p, Tensor<T>* weights = nullptr) {
  return {attention_tokens(wb.tokens, p, weights), wb.source, wb.spec};
}

// MHSA followed by the window-embedding linear layer.
template <typename T>
struct WindowAttention {
  AttentionParams<T> attention;
  Var<T> embed_weight;
  Var<T> embed_bias;

  std::vector<Var<T>> parameters() const {
    auto ps = attention.parameters();
    ps.push_back(embed_weight);
    ps.push_back(embed_bias);
    return ps;
  }
};

// Windowed self-attention on [B,H,W,L,C]; spec must carry zero shift.
template <typename T>
Var<T> w_sa(const Var<T>& x, const WindowSpec& spec, const WindowAttention<T>& p) {
  WindowBatch<T> wb = window_partition(x, spec);
  WindowBatch<T> attended = mhsa(wb, p.attention);
  attended.tokens = linear(attended.tokens, p.embed_weight, p.embed_bias);
  return window_reverse(attended);
}

// Shifted-window self-attention: roll by spec.shift, attend, roll back.
// No attention mask is applied to wrapped-around neighbours.
template <typename T>
Var<T> sw_sa(const Var<T>& x, const WindowSpec& spec, const WindowAttention<T>& p) {
  const std::array<std::ptrdiff_t, 3> fwd{static_cast<std::ptrdiff_t>(spec.shift[0]), static_cast<std::ptrdiff_t>(spec.shift[1]),
                                          static_cast<std::ptrdiff_t>(spec.shift[2])};
  WindowSpec plain = spec;
  plain.shift = {0, 0, 0};
  if (!spec.is_shifted()) return w_sa(x, plain, p);
  Var<T> rolled = cyclic_shift(x, fwd);
  Var<T> attended = w_sa(rolled, plain, p);
  return cyclic_shift(attended, {-fwd[0], -fwd[1], -fwd[2]});
}

template <typename T>
struct SwinLayerParams {
  WindowAttention<T> wsa;
  WindowAttention<T> swsa;
  Var<T> proj1_weight, proj1_bias, norm1_gain, norm1_shift;
  Var<T> proj2_weight, proj2_bias, norm2_gain, norm2_shift;
  std::size_t window_edge = 4;

  std::vector<Var<T>> parameters() const {
    auto ps = wsa.parameters();
    for (const auto& v : swsa.parameters()) ps.push_back(v);
    for (const auto& v : {proj1_weight, proj1_bias, norm1_gain, norm1_shift, proj2_weight, proj2_bias, norm2_gain, norm2_shift}) ps.push_back(v);
    return ps;
  }
};

// X_e^out = X_e + LN(linear(W-SA(X_e)));  Y = X_e^out + LN(linear(SW-SA(X_e^out))).
// Input and output are [B,H,W,L,C]. Window edges are clamped to the feature
// extent before partitioning.
template <typename T>
Var<T> swin_layer(const Var<T>& x, const SwinLayerParams<T>& p, DimMode mode) {
  detail::require(x.rank() == 5, "swin_layer: expected [B,H,W,L,C], got " + to_string(x.shape()));
  const auto extent = detail::spatial_of(x.shape());
  const WindowSpec regular = WindowSpec::regular(p.window_edge, mode).fitted(extent);
  const WindowSpec shifted = WindowSpec::shifted(p.window_edge, mode).fitted(extent);
  Var<T> h = w_sa(x, regular, p.wsa);
  h = add(x, layer_norm(linear(h, p.proj1_weight, p.proj1_bias), p.norm1_gain, p.norm1_shift));
  Var<T> y = sw_sa(h, shifted, p.swsa);
  return add(h, layer_norm(linear(y, p.proj2_weight, p.proj2_bias), p.norm2_gain, p.norm2_shift));
}

// ---------------------------------------------------------------- initialisation

// He-uniform: U(-sqrt(6 / fan_in), +sqrt(6 / fan_in)).
template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
AttentionParams<T> make_attention_params(std::size_t channels, std::size_t heads, std::mt19937_64& rng) {
  AttentionParams<T> p;
  p.heads = heads;
  p.query = parameter(he_uniform<T>({channels, channels}, channels, rng));
  p.key = parameter(he_uniform<T>({channels, channels}, channels, rng));
  p.value = parameter(he_uniform<T>({channels, channels}, channels, rng));
  p.out = parameter(he_uniform<T>({channels, channels}, channels, rng));
  p.validate();
  return p;
}

template <typename T>
WindowAttention<T> make_window_attention(std::size_t channels, std::size_t heads, std::mt19937_64& rng) {
  return {make_attention_params<T>(channels, heads, rng), parameter(he_uniform<T>({channels, channels}, channels, rng)),
          parameter(Tensor<T>::zeros({channels}))};
}

template <typename T>
SwinLayerParams<T> make_swin_layer(std::size_t channels, std::size_t heads, std::size_t window_edge, std::mt19937_64& rng) {
  SwinLayerParams<T> p;
  p.window_edge = window_edge;
  p.wsa = make_window_attention<T>(channels, heads, rng);
  p.swsa = make_window_attention<T>(channels, heads, rng);
  p.proj1_weight = parameter(he_uniform<T>({channels, channels}, channels, rng));
  p.proj1_bias = parameter(Tensor<T>::zeros({channels}));
  p.norm1_gain = parameter(Tensor<T>::ones({channels}));
  p.norm1_shift = parameter(Tensor<T>::zeros({channels}));
  p.proj2_weight = parameter(he_uniform<T>({channels, channels}, channels, rng));
  p.proj2_bias = parameter(Tensor<T>::zeros({channels}));
  p.norm2_gain = parameter(Tensor<T>::ones({channels}));
  p.norm2_shift = parameter(Tensor<T>::zeros({channels}));
  return p;
}

}  // namespace mdust
