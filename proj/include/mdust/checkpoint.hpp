// Named-tensor checkpoints.
//
// Binary layout (all integers little-endian):
//   "MDUSTCKP"            8-byte magic
//   u32 version           currently 1
//   u64 fingerprint       ModelConfig::encoder_fingerprint()
//   u32 n, n bytes        stage tag
//   u32 count             number of tensors, sorted by name
//   per tensor: u32 n, name bytes, u32 rank, rank x u64 dims, f32 payload
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mdust/network.hpp"
#include "mdust/volume.hpp"

namespace mdust {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointBundle {
  std::uint64_t fingerprint = 0;
  std::string stage;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;  // sorted by name

  const Tensor<float>* find(const std::string& name) const {
    auto it = std::lower_bound(tensors.begin(), tensors.end(), name, [](const auto& e, const std::string& n) { return e.first < n; });
    return it != tensors.end() && it->first == name ? &it->second : nullptr;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, t] : tensors) out.push_back(n);
    return out;
  }
};

enum class CheckpointScope { EncoderOnly, Everything };

template <typename T>
CheckpointBundle make_checkpoint(const Model<T>& model, std::string stage, CheckpointScope scope) {
  CheckpointBundle b;
  b.fingerprint = model.config().encoder_fingerprint();
  b.stage = std::move(stage);
  for (const auto& [name, var] : model.named_parameters()) {
    if (scope == CheckpointScope::EncoderOnly && !is_encoder_parameter(name)) continue;
    b.tensors.emplace_back(name, var.value().template cast<float>());
  }
  return b;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  const unsigned char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated file");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += n;
    return p;
  }

  std::uint32_t u32() {
    const auto* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    const auto* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }

  std::string str() {
    const std::uint32_t n = u32();
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "MDUSTCKP";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const CheckpointBundle& b) {
  std::string out(kCheckpointMagic, 8);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, b.fingerprint);
  detail::put_u32(out, static_cast<std::uint32_t>(b.stage.size()));
  out += b.stage;
  detail::put_u32(out, static_cast<std::uint32_t>(b.tensors.size()));
  for (std::size_t i = 0; i < b.tensors.size(); ++i) {
    const auto& [name, t] = b.tensors[i];
    if (i > 0 && !(b.tensors[i - 1].first < name)) throw CheckpointError("checkpoint: tensor names must be unique and sorted");
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u64(out, d);
    for (float f : t.data()) detail::put_f32_le(out, f);
  }
  return out;
}

inline CheckpointBundle decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  if (std::string(reinterpret_cast<const char*>(r.take(8)), 8) != std::string(kCheckpointMagic, 8))
    throw CheckpointError("checkpoint: bad magic (not a checkpoint file)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
  CheckpointBundle b;
  b.fingerprint = r.u64();
  b.stage = r.str();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError("checkpoint: implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    const std::size_t n = numel(shape);
    if (n > (1ull << 32)) throw CheckpointError("checkpoint: implausible size for '" + name + "'");
    const auto* p = r.take(4 * n);
    Tensor<float> t(shape);
    for (std::size_t k = 0; k < n; ++k) t[k] = detail::get_f32_le(p + 4 * k);
    if (!b.tensors.empty() && !(b.tensors.back().first < name)) throw CheckpointError("checkpoint: tensor table is not sorted");
    b.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes after tensor table");
  return b;
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointBundle& b) {
  detail::write_atomically(path, encode_checkpoint(b));
}

inline CheckpointBundle load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  return decode_checkpoint(detail::read_file(path));
}

namespace detail {

template <typename T>
void load_matching(const CheckpointBundle& b, const Model<T>& model, bool encoder_only) {
  if (b.fingerprint != model.config().encoder_fingerprint()) {
    throw CheckpointError("checkpoint fingerprint mismatch: file has " + std::to_string(b.fingerprint) + ", model expects " +
                          std::to_string(model.config().encoder_fingerprint()) + " (" + model.config().encoder_signature() + ")");
  }
  auto params = model.named_parameters();
  // Validate everything before touching the model.
  for (const auto& [name, var] : params) {
    if (encoder_only && !is_encoder_parameter(name)) continue;
    const Tensor<float>* t = b.find(name);
    if (!t) throw CheckpointError("checkpoint is missing parameter '" + name + "'");
    if (t->shape() != var.shape())
      throw CheckpointError("checkpoint parameter '" + name + "' has shape " + to_string(t->shape()) + ", model expects " + to_string(var.shape()));
  }
  for (auto& [name, var] : params) {
    if (encoder_only && !is_encoder_parameter(name)) continue;
    var.mutable_value() = b.find(name)->template cast<T>();
  }
}

}  // namespace detail

// Copies encoder weights only; decoder parameters keep their initialisation.
template <typename T>
void load_encoder(const CheckpointBundle& b, Model<T>& model) {
  detail::load_matching(b, model, true);
}

// Every model parameter must be present in the bundle.
template <typename T>
void load_all(const CheckpointBundle& b, Model<T>& model) {
  detail::load_matching(b, model, false);
}

}  // namespace mdust
