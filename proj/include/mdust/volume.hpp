// Lesion volumes and their on-disk container.
//
// File layout: a line-oriented text header
//
//   MDUST-VOLUME 1
//   dims <H> <W> <L>
//   spacing <mm> <mm> <mm>
//   diameter_mm <d>
//   has_label <0|1>
//   <blank line>
//
// followed by H*W*L little-endian float32 voxels (row-major H, W, L) and, when
// has_label is 1, one byte per label voxel.
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdust/metrics.hpp"

namespace mdust {

struct LesionVolume {
  std::array<std::size_t, 3> dims{1, 1, 1};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm
  double recist_diameter = 1.0;                  // mm
  std::vector<float> voxels;                     // HU, or normalised intensity after preprocessing
  std::optional<BinaryMask> label;
  std::string id;

  LesionVolume() = default;
  LesionVolume(std::array<std::size_t, 3> d, std::array<double, 3> s, double diameter, float fill = 0.0f)
      : dims(d), spacing(s), recist_diameter(diameter), voxels(d[0] * d[1] * d[2], fill) {}

  std::size_t size() const { return voxels.size(); }
  std::size_t index(std::size_t h, std::size_t w, std::size_t l) const { return (h * dims[1] + w) * dims[2] + l; }
  float& operator()(std::size_t h, std::size_t w, std::size_t l) { return voxels[index(h, w, l)]; }
  float operator()(std::size_t h, std::size_t w, std::size_t l) const { return voxels[index(h, w, l)]; }
  bool is_2d() const { return dims[2] == 1; }

  void validate() const {
    for (std::size_t e : dims)
      if (e == 0) throw std::invalid_argument("volume extents must be positive");
    for (double s : spacing)
      if (!(s > 0.0)) throw std::invalid_argument("volume spacing must be positive");
    if (!(recist_diameter > 0.0)) throw std::invalid_argument("RECIST diameter must be positive");
    if (voxels.size() != dims[0] * dims[1] * dims[2]) throw std::invalid_argument("voxel payload does not match dims");
    if (label) {
      if (label->dims != dims) throw std::invalid_argument("label grid does not match voxel grid");
      label->validate();
    }
  }
};

// The axial slice of largest lesion area with its in-slice longest diameter.
struct RecistSlice {
  LesionVolume image;  // L == 1, label present
  std::size_t axial_index = 0;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void put_f32_le(std::string& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

// Writes to a sibling temporary and renames it over the target.
inline void write_atomically(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline std::string encode_volume(const LesionVolume& v) {
  v.validate();
  std::string out;
  out += "MDUST-VOLUME 1\n";
  out += "dims " + std::to_string(v.dims[0]) + " " + std::to_string(v.dims[1]) + " " + std::to_string(v.dims[2]) + "\n";
  out += "spacing " + detail::exact(v.spacing[0]) + " " + detail::exact(v.spacing[1]) + " " + detail::exact(v.spacing[2]) + "\n";
  out += "diameter_mm " + detail::exact(v.recist_diameter) + "\n";
  out += std::string("has_label ") + (v.label ? "1" : "0") + "\n\n";
  out.reserve(out.size() + v.size() * 5);
  for (float f : v.voxels) detail::put_f32_le(out, f);
  if (v.label) {
    for (auto b : v.label->voxels) out.push_back(static_cast<char>(b));
  }
  return out;
}

inline LesionVolume decode_volume(const std::string& bytes) {
  const auto header_end = bytes.find("\n\n");
  if (header_end == std::string::npos) throw FormatError("volume: header is not terminated by a blank line");
  std::istringstream hs(bytes.substr(0, header_end + 1));
  std::string line, key;
  LesionVolume v;
  bool has_label = false;
  int seen = 0;
  if (!std::getline(hs, line) || line != "MDUST-VOLUME 1") throw FormatError("volume: bad format tag '" + line + "'");
  while (std::getline(hs, line)) {
    std::istringstream ls(line);
    ls >> key;
    if (key == "dims") {
      ls >> v.dims[0] >> v.dims[1] >> v.dims[2];
      seen |= 1;
    } else if (key == "spacing") {
      ls >> v.spacing[0] >> v.spacing[1] >> v.spacing[2];
      seen |= 2;
    } else if (key == "diameter_mm") {
      ls >> v.recist_diameter;
      seen |= 4;
    } else if (key == "has_label") {
      int flag = 0;
      ls >> flag;
      if (flag != 0 && flag != 1) throw FormatError("volume: has_label must be 0 or 1");
      has_label = flag == 1;
      seen |= 8;
    } else {
      throw FormatError("volume: unknown header key '" + key + "'");
    }
    if (ls.fail()) throw FormatError("volume: malformed header line '" + line + "'");
  }
  if (seen != 15) throw FormatError("volume: header is missing required keys");
  const std::size_t n = v.dims[0] * v.dims[1] * v.dims[2];
  const std::size_t payload = header_end + 2;
  const std::size_t need = n * 4 + (has_label ? n : 0);
  if (n == 0 || bytes.size() - payload != need) throw FormatError("volume: payload size does not match header");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + payload);
  v.voxels.resize(n);
  for (std::size_t i = 0; i < n; ++i) v.voxels[i] = detail::get_f32_le(p + 4 * i);
  if (has_label) {
    BinaryMask m(v.dims, v.spacing);
    std::memcpy(m.voxels.data(), p + 4 * n, n);
    v.label = std::move(m);
  }
  v.validate();
  return v;
}

inline void write_volume(const std::filesystem::path& path, const LesionVolume& v) { detail::write_atomically(path, encode_volume(v)); }

inline LesionVolume read_volume(const std::filesystem::path& path) {
  LesionVolume v = decode_volume(detail::read_file(path));
  v.id = path.stem().string();
  return v;
}

}  // namespace mdust
