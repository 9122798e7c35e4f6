// Train/validation/test splitting and the corpus manifest
// ("<relative path> <split tag> <id>" per line).
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdust/volume.hpp"

namespace mdust {

template <typename Item>
struct Split {
  std::vector<Item> train, val, test;
};

// Proportional to 416 : 60 : 117, validation and test each get at least one
// item; training takes the remainder.
inline std::array<std::size_t, 3> split_sizes(std::size_t n) {
  if (n < 3) throw std::invalid_argument("split_corpus: need at least 3 items, got " + std::to_string(n));
  const double total = 593.0;
  auto val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n) * 60.0 / total)));
  auto test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n) * 117.0 / total)));
  while (val + test >= n) (test > 1 ? test : val) -= 1;
  return {n - val - test, val, test};
}

template <typename Item>
Split<Item> split_corpus(std::vector<Item> items, std::uint64_t seed) {
  const auto sizes = split_sizes(items.size());
  std::mt19937_64 rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
  Split<Item> s;
  auto it = items.begin();
  s.train.assign(it, it + static_cast<std::ptrdiff_t>(sizes[0]));
  it += static_cast<std::ptrdiff_t>(sizes[0]);
  s.val.assign(it, it + static_cast<std::ptrdiff_t>(sizes[1]));
  it += static_cast<std::ptrdiff_t>(sizes[1]);
  s.test.assign(it, items.end());
  return s;
}

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  std::string split;
  std::string id;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> with_split(const std::string& tag) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == tag) out.push_back(e);
    return out;
  }

  std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.path; }
};

inline std::string encode_manifest(const std::vector<ManifestEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    for (const auto* field : {&e.path, &e.split, &e.id})
      if (field->empty() || field->find_first_of(" \t\n") != std::string::npos)
        throw std::invalid_argument("manifest fields must be non-empty and free of whitespace");
    out += e.path + " " + e.split + " " + e.id + "\n";
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& file, const std::vector<ManifestEntry>& entries) {
  detail::write_atomically(file, encode_manifest(entries));
}

inline Manifest read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open manifest " + file.string());
  Manifest m;
  m.root = file.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string extra;
    if (!(ls >> e.path >> e.split >> e.id) || (ls >> extra))
      throw FormatError("manifest " + file.string() + ":" + std::to_string(lineno) + ": expected '<path> <split> <id>'");
    m.entries.push_back(std::move(e));
  }
  return m;
}

}  // namespace mdust
