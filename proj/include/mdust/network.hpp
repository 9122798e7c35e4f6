// MDU-ST assembly: a Swin encoder shared by every training stage, plus the
// reconstruction decoder and contrastive head (stage 1), and the 2D / 3D
// segmentation decoders (stages 2 and 3).
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mdust/ops.hpp"
#include "mdust/swin.hpp"

namespace mdust {

struct ModelConfig {
  std::size_t base_channels = 32;  // patch-embedding width at scale 1
  std::size_t scale = 1;           // desk runs divide every width by this
  std::array<std::size_t, 4> window_edges{4, 4, 8, 4};
  std::array<std::size_t, 4> heads{4, 4, 4, 4};
  std::array<std::size_t, 3> input_shape{64, 64, 32};
  DimMode dim_mode = DimMode::ThreeD;

  std::size_t c0() const { return base_channels / scale; }
  // Width of encoder level k (0 = patch embedding, 1..4 = Swin blocks).
  std::size_t channels(std::size_t level) const { return c0() << level; }

  static ModelConfig full() { return {}; }

  static ModelConfig desk() {
    ModelConfig c;
    c.scale = 4;
    c.input_shape = {32, 32, 16};
    return c;
  }

  static ModelConfig miniature() {
    ModelConfig c;
    c.scale = 8;
    c.input_shape = {16, 16, 4};
    return c;
  }

  ModelConfig with_mode(DimMode m) const {
    ModelConfig c = *this;
    c.dim_mode = m;
    if (m == DimMode::TwoD) c.input_shape[2] = 1;
    return c;
  }

  void validate() const {
    detail::require(scale >= 1 && base_channels % scale == 0 && c0() >= 1, "model config: scale must divide base_channels");
    for (std::size_t k = 0; k < 4; ++k) {
      detail::require(window_edges[k] >= 1, "model config: window edges must be positive");
      detail::require(heads[k] >= 1 && channels(k + 1) % heads[k] == 0,
                      "model config: block " + std::to_string(k + 1) + " width " + std::to_string(channels(k + 1)) +
                          " not divisible by head count " + std::to_string(heads[k]));
    }
    for (std::size_t e : input_shape) detail::require(e >= 1, "model config: input extents must be positive");
    if (dim_mode == DimMode::TwoD) detail::require(input_shape[2] == 1, "model config: 2D mode needs L = 1");
  }

  // Describes the encoder architecture only; decoders and input size may
  // differ between stages that share an encoder.
  std::string encoder_signature() const {
    std::ostringstream os;
    os << "c0=" << c0() << ";windows=";
    for (auto w : window_edges) os << w << ',';
    os << ";heads=";
    for (auto h : heads) os << h << ',';
    return os.str();
  }

  std::uint64_t encoder_fingerprint() const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char ch : encoder_signature()) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    return h;
  }
};

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Var<T>>>;

// ---------------------------------------------------------------- building blocks

template <typename T>
struct Conv {
  Var<T> weight;
  Var<T> bias;
  Stride3 stride{1, 1, 1};

  static Conv make(std::size_t cin, std::size_t cout, std::array<std::size_t, 3> k, Stride3 stride, std::mt19937_64& rng) {
    const std::size_t fan_in = cin * k[0] * k[1] * k[2];
    return {parameter(he_uniform<T>({cout, cin, k[0], k[1], k[2]}, fan_in, rng)), parameter(Tensor<T>::zeros({cout})), stride};
  }

  Var<T> operator()(const Var<T>& x) const { return conv3d(x, weight, bias, stride); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

// Convolution followed by instance norm and leaky ReLU.
template <typename T>
struct ConvNormAct {
  Conv<T> conv;

  static ConvNormAct make(std::size_t cin, std::size_t cout, std::array<std::size_t, 3> k, Stride3 stride, std::mt19937_64& rng) {
    return {Conv<T>::make(cin, cout, k, stride, rng)};
  }

  Var<T> operator()(const Var<T>& x) const { return leaky_relu(instance_norm(conv(x)), T(0.01)); }

  void collect(const std::string& prefix, NamedParams<T>& out) const { conv.collect(prefix, out); }
};

// Two pathways added: [conv k1 (stride s) -> conv k2] + [1x1x1 conv (stride s)].
template <typename T>
struct ResidualBlock {
  ConvNormAct<T> first;
  ConvNormAct<T> second;
  ConvNormAct<T> shortcut;

  static ResidualBlock make(std::size_t cin, std::size_t cout, std::array<std::size_t, 3> k1, std::array<std::size_t, 3> k2,
                            Stride3 stride, std::mt19937_64& rng) {
    ResidualBlock b;
    b.first = ConvNormAct<T>::make(cin, cout, k1, stride, rng);
    b.second = ConvNormAct<T>::make(cout, cout, k2, {1, 1, 1}, rng);
    b.shortcut = ConvNormAct<T>::make(cin, cout, {1, 1, 1}, stride, rng);
    return b;
  }

  static ResidualBlock make(std::size_t cin, std::size_t cout, std::array<std::size_t, 3> k, std::mt19937_64& rng) {
    return make(cin, cout, k, k, {1, 1, 1}, rng);
  }

  Var<T> operator()(const Var<T>& x) const { return add(second(first(x)), shortcut(x)); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    first.collect(prefix + ".first", out);
    second.collect(prefix + ".second", out);
    shortcut.collect(prefix + ".shortcut", out);
  }
};

template <typename T>
void collect_swin(const SwinLayerParams<T>& p, const std::string& prefix, NamedParams<T>& out) {
  auto attn = [&](const WindowAttention<T>& a, const std::string& name) {
    out.emplace_back(prefix + "." + name + ".query", a.attention.query);
    out.emplace_back(prefix + "." + name + ".key", a.attention.key);
    out.emplace_back(prefix + "." + name + ".value", a.attention.value);
    out.emplace_back(prefix + "." + name + ".out", a.attention.out);
    out.emplace_back(prefix + "." + name + ".embed.weight", a.embed_weight);
    out.emplace_back(prefix + "." + name + ".embed.bias", a.embed_bias);
  };
  attn(p.wsa, "wsa");
  attn(p.swsa, "swsa");
  out.emplace_back(prefix + ".proj1.weight", p.proj1_weight);
  out.emplace_back(prefix + ".proj1.bias", p.proj1_bias);
  out.emplace_back(prefix + ".norm1.gain", p.norm1_gain);
  out.emplace_back(prefix + ".norm1.shift", p.norm1_shift);
  out.emplace_back(prefix + ".proj2.weight", p.proj2_weight);
  out.emplace_back(prefix + ".proj2.bias", p.proj2_bias);
  out.emplace_back(prefix + ".norm2.gain", p.norm2_gain);
  out.emplace_back(prefix + ".norm2.shift", p.norm2_shift);
}

// Down-sampling entry convolution (3x3x1, stride 2x2x1, doubles channels)
// with per-token layer norm, followed by the W-SA / SW-SA layer.
template <typename T>
struct SwinBlock {
  Conv<T> entry;
  Var<T> entry_gain, entry_shift;
  SwinLayerParams<T> layer;

  static SwinBlock make(std::size_t cin, std::size_t cout, std::size_t heads, std::size_t window_edge, std::mt19937_64& rng) {
    SwinBlock b;
    b.entry = Conv<T>::make(cin, cout, {3, 3, 1}, {2, 2, 1}, rng);
    b.entry_gain = parameter(Tensor<T>::ones({cout}));
    b.entry_shift = parameter(Tensor<T>::zeros({cout}));
    b.layer = make_swin_layer<T>(cout, heads, window_edge, rng);
    return b;
  }

  Var<T> operator()(const Var<T>& x, DimMode mode) const {
    Var<T> tokens = layer_norm(permute(entry(x), {0, 2, 3, 4, 1}), entry_gain, entry_shift);
    return permute(swin_layer(tokens, layer, mode), {0, 4, 1, 2, 3});
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    entry.collect(prefix + ".entry", out);
    out.emplace_back(prefix + ".entry_norm.gain", entry_gain);
    out.emplace_back(prefix + ".entry_norm.shift", entry_shift);
    collect_swin(layer, prefix + ".swin", out);
  }
};

// Keeps the leading [H, W, L] corner of a [B,C,H,W,L] tensor.
template <typename T>
Var<T> crop_spatial(const Var<T>& x, const std::array<std::size_t, 3>& extent) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), L = x.dim(4);
  if (H == extent[0] && W == extent[1] && L == extent[2]) return x;
  detail::require(extent[0] <= H && extent[1] <= W && extent[2] <= L, "crop_spatial: target larger than input");
  auto index = std::make_shared<std::vector<std::int64_t>>();
  index->reserve(B * C * extent[0] * extent[1] * extent[2]);
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t h = 0; h < extent[0]; ++h)
      for (std::size_t w = 0; w < extent[1]; ++w)
        for (std::size_t l = 0; l < extent[2]; ++l) index->push_back(static_cast<std::int64_t>(((bc * H + h) * W + w) * L + l));
  return gather(x, std::shared_ptr<const std::vector<std::int64_t>>(std::move(index)), Shape{B, C, extent[0], extent[1], extent[2]});
}

template <typename T>
std::array<std::size_t, 3> spatial_extent(const Var<T>& x) {
  return {x.dim(2), x.dim(3), x.dim(4)};
}

// ---------------------------------------------------------------- encoder

template <typename T>
struct EncoderFeatures {
  Var<T> input;                 // [B,1,H,W,L]
  std::array<Var<T>, 5> levels;  // patch embedding, then the four Swin blocks
  DimMode mode = DimMode::ThreeD;

  const Var<T>& deepest() const { return levels[4]; }
};

template <typename T>
struct Encoder {
  ResidualBlock<T> patch_embed;
  std::array<SwinBlock<T>, 4> blocks;

  static Encoder make(const ModelConfig& cfg, std::mt19937_64& rng) {
    Encoder e;
    const std::size_t c0 = cfg.c0();
    e.patch_embed = ResidualBlock<T>::make(1, c0, {3, 3, 1}, {3, 3, 3}, {2, 2, 1}, rng);
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t cin = cfg.channels(k), cout = cfg.channels(k + 1);
      e.blocks[k] = SwinBlock<T>::make(cin, cout, cfg.heads[k], cfg.window_edges[k], rng);
    }
    return e;
  }

  Var<T> embed(const Var<T>& x) const {
    detail::require(x.rank() == 5 && x.dim(1) == 1, "patch_embed: expected single-channel [B,1,H,W,L], got " + to_string(x.shape()));
    return patch_embed(x);
  }

  EncoderFeatures<T> operator()(const Var<T>& x, DimMode mode) const {
    if (mode == DimMode::TwoD) detail::require(x.rank() == 5 && x.dim(4) == 1, "encoder: 2D mode needs L = 1, got " + to_string(x.shape()));
    EncoderFeatures<T> f;
    f.input = x;
    f.mode = mode;
    f.levels[0] = embed(x);
    for (std::size_t k = 0; k < 4; ++k) f.levels[k + 1] = blocks[k](f.levels[k], mode);
    return f;
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    patch_embed.collect(prefix + ".patch_embed", out);
    for (std::size_t k = 0; k < 4; ++k) blocks[k].collect(prefix + ".block" + std::to_string(k + 1), out);
  }
};

// ---------------------------------------------------------------- decoders

// Nearest x2 in-plane up-sampling, crop to the skip extent, optional
// channel concatenation with the skip, then a residual block.
template <typename T>
struct UpBlock {
  ResidualBlock<T> block;

  Var<T> operator()(const Var<T>& x, const std::array<std::size_t, 3>& extent, const Var<T>& skip = Var<T>()) const {
    Var<T> up = crop_spatial(upsample_x2(x, UpsampleAxes::InPlane), extent);
    if (skip.defined()) up = concat<T>({up, skip}, 1);
    return block(up);
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const { block.collect(prefix, out); }
};

// Four up-sampling residual blocks from the deepest features, then a x2
// up-sample and a 1x1x1 convolution to one channel.
template <typename T>
struct ReconstructionDecoder {
  std::array<UpBlock<T>, 4> ups;
  Conv<T> head;

  static ReconstructionDecoder make(const ModelConfig& cfg, std::mt19937_64& rng) {
    ReconstructionDecoder d;
    for (std::size_t k = 4; k-- > 0;) {
      d.ups[k].block = ResidualBlock<T>::make(cfg.channels(k + 1), cfg.channels(k), {3, 3, 3}, rng);
    }
    d.head = Conv<T>::make(cfg.channels(0), 1, {1, 1, 1}, {1, 1, 1}, rng);
    return d;
  }

  Var<T> operator()(const EncoderFeatures<T>& f) const {
    detail::require(f.mode == DimMode::ThreeD, "reconstruction decoder: 3D features required");
    Var<T> d = f.deepest();
    for (std::size_t k = 4; k-- > 0;) d = ups[k](d, spatial_extent(f.levels[k]));
    return head(crop_spatial(upsample_x2(d, UpsampleAxes::InPlane), spatial_extent(f.input)));
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    for (std::size_t k = 0; k < 4; ++k) ups[k].collect(prefix + ".up" + std::to_string(k), out);
    head.collect(prefix + ".head", out);
  }
};

// Global average pool, two linear layers, instance norm and leaky ReLU -> 128.
template <typename T>
struct ContrastiveHead {
  static constexpr std::size_t kEmbedding = 128;
  Var<T> w1, b1, w2, b2;

  static ContrastiveHead make(const ModelConfig& cfg, std::mt19937_64& rng) {
    const std::size_t c = cfg.channels(4);
    return {parameter(he_uniform<T>({c, kEmbedding}, c, rng)), parameter(Tensor<T>::zeros({kEmbedding})),
            parameter(he_uniform<T>({kEmbedding, kEmbedding}, kEmbedding, rng)), parameter(Tensor<T>::zeros({kEmbedding}))};
  }

  Var<T> operator()(const EncoderFeatures<T>& f) const {
    Var<T> pooled = global_avg_pool(f.deepest());
    Var<T> h = leaky_relu(linear(pooled, w1, b1), T(0.01));
    Var<T> z = linear(h, w2, b2);
    const std::size_t B = z.dim(0);
    return reshape(leaky_relu(instance_norm(reshape(z, {B, 1, kEmbedding})), T(0.01)), {B, kEmbedding});
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".linear1.weight", w1);
    out.emplace_back(prefix + ".linear1.bias", b1);
    out.emplace_back(prefix + ".linear2.weight", w2);
    out.emplace_back(prefix + ".linear2.bias", b2);
  }
};

// U-shaped segmentation decoder. Every encoder level passes through a
// residual block before being concatenated into the matching up-sampling
// block. The output head up-samples to input resolution, concatenates a
// full-resolution residual block of the raw input and maps to two logits.
// 2D decoders use 3x3x1 kernels, 3D decoders 3x3x3.
template <typename T>
struct SegmentationDecoder {
  DimMode mode = DimMode::ThreeD;
  std::array<ResidualBlock<T>, 5> skips;
  std::array<UpBlock<T>, 4> ups;
  ResidualBlock<T> input_skip;
  Conv<T> head;

  static SegmentationDecoder make(const ModelConfig& cfg, DimMode mode, std::mt19937_64& rng) {
    SegmentationDecoder d;
    d.mode = mode;
    const std::array<std::size_t, 3> k = mode == DimMode::ThreeD ? std::array<std::size_t, 3>{3, 3, 3} : std::array<std::size_t, 3>{3, 3, 1};
    for (std::size_t lvl = 0; lvl < 5; ++lvl) d.skips[lvl] = ResidualBlock<T>::make(cfg.channels(lvl), cfg.channels(lvl), k, rng);
    for (std::size_t lvl = 4; lvl-- > 0;) {
      d.ups[lvl].block = ResidualBlock<T>::make(cfg.channels(lvl + 1) + cfg.channels(lvl), cfg.channels(lvl), k, rng);
    }
    const std::size_t fine = std::max<std::size_t>(1, cfg.c0() / 2);
    d.input_skip = ResidualBlock<T>::make(1, fine, k, rng);
    d.head = Conv<T>::make(cfg.c0() + fine, 2, {1, 1, 1}, {1, 1, 1}, rng);
    return d;
  }

  Var<T> operator()(const EncoderFeatures<T>& f) const {
    detail::require(f.mode == mode, std::string("segmentation decoder: built for ") + to_string(mode) + " but features are " + to_string(f.mode));
    std::array<Var<T>, 5> e;
    for (std::size_t lvl = 0; lvl < 5; ++lvl) e[lvl] = skips[lvl](f.levels[lvl]);
    Var<T> d = e[4];
    for (std::size_t lvl = 4; lvl-- > 0;) d = ups[lvl](d, spatial_extent(e[lvl]), e[lvl]);
    Var<T> up = crop_spatial(upsample_x2(d, UpsampleAxes::InPlane), spatial_extent(f.input));
    return head(concat<T>({up, input_skip(f.input)}, 1));
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    for (std::size_t lvl = 0; lvl < 5; ++lvl) skips[lvl].collect(prefix + ".skip" + std::to_string(lvl), out);
    for (std::size_t lvl = 0; lvl < 4; ++lvl) ups[lvl].collect(prefix + ".up" + std::to_string(lvl), out);
    input_skip.collect(prefix + ".input_skip", out);
    head.collect(prefix + ".head", out);
  }
};

// ---------------------------------------------------------------- stage assemblies

enum class Assembly { Pretrain, Segment2D, Segment3D };

inline const char* to_string(Assembly a) {
  switch (a) {
    case Assembly::Pretrain: return "pretrain";
    case Assembly::Segment2D: return "seg2d";
    case Assembly::Segment3D: return "seg3d";
  }
  return "?";
}

inline DimMode mode_of(Assembly a) { return a == Assembly::Segment2D ? DimMode::TwoD : DimMode::ThreeD; }

// Encoder weights depend only on (config, seed); decoders draw from a
// separate stream so every assembly starts from the same encoder.
template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, Assembly assembly, std::uint64_t seed) : cfg_(cfg.with_mode(mode_of(assembly))), assembly_(assembly) {
    cfg_.validate();
    std::mt19937_64 enc_rng(seed);
    encoder_ = Encoder<T>::make(cfg_, enc_rng);
    std::mt19937_64 dec_rng(seed ^ 0x9e3779b97f4a7c15ull);
    switch (assembly) {
      case Assembly::Pretrain:
        reconstruction_ = ReconstructionDecoder<T>::make(cfg_, dec_rng);
        contrastive_ = ContrastiveHead<T>::make(cfg_, dec_rng);
        break;
      case Assembly::Segment2D:
        segmentation_ = SegmentationDecoder<T>::make(cfg_, DimMode::TwoD, dec_rng);
        break;
      case Assembly::Segment3D:
        segmentation_ = SegmentationDecoder<T>::make(cfg_, DimMode::ThreeD, dec_rng);
        break;
    }
  }

  const ModelConfig& config() const { return cfg_; }
  Assembly assembly() const { return assembly_; }
  DimMode mode() const { return cfg_.dim_mode; }
  const Encoder<T>& encoder() const { return encoder_; }
  Encoder<T>& encoder() { return encoder_; }

  EncoderFeatures<T> encode(const Var<T>& x) const { return encoder_(x, cfg_.dim_mode); }

  Var<T> reconstruct(const EncoderFeatures<T>& f) const {
    detail::require(reconstruction_.has_value(), "model has no reconstruction decoder");
    return (*reconstruction_)(f);
  }

  Var<T> embed(const EncoderFeatures<T>& f) const {
    detail::require(contrastive_.has_value(), "model has no contrastive head");
    return (*contrastive_)(f);
  }

  Var<T> segment(const EncoderFeatures<T>& f) const {
    detail::require(segmentation_.has_value(), "model has no segmentation decoder");
    return (*segmentation_)(f);
  }

  // Two-channel logits for a [B,1,H,W,L] input.
  Var<T> segment(const Var<T>& x) const { return segment(encode(x)); }

  NamedParams<T> named_parameters() const {
    NamedParams<T> out;
    encoder_.collect("encoder", out);
    if (reconstruction_) reconstruction_->collect("recon", out);
    if (contrastive_) contrastive_->collect("contrastive", out);
    if (segmentation_) segmentation_->collect(segmentation_->mode == DimMode::TwoD ? "seg2d" : "seg3d", out);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
  }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> ps;
    for (auto& [name, v] : named_parameters()) ps.push_back(v);
    return ps;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, v] : named_parameters()) n += v.size();
    return n;
  }

  std::size_t encoder_parameter_count() const {
    NamedParams<T> enc;
    encoder_.collect("encoder", enc);
    std::size_t n = 0;
    for (auto& [name, v] : enc) n += v.size();
    return n;
  }

 private:
  ModelConfig cfg_;
  Assembly assembly_;
  Encoder<T> encoder_;
  std::optional<ReconstructionDecoder<T>> reconstruction_;
  std::optional<ContrastiveHead<T>> contrastive_;
  std::optional<SegmentationDecoder<T>> segmentation_;
};

inline bool is_encoder_parameter(const std::string& name) { return name.rfind("encoder.", 0) == 0; }

}  // namespace mdust
