#pragma once

// PGCKPT1 parameter container. Layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "PGCKPT1\0"
//   offset 8   u64       manifest length L in bytes
//   offset 16  L bytes   manifest, UTF-8 JSON:
//                          {"tensors": [{"name", "shape", "dtype": "f64",
//                                        "offset", "nbytes"}, ...],
//                           "meta": {string: string}}
//   16 + L     payload   raw f64 tensor data; "offset" is relative to here
//
// Tensors appear in the payload in manifest order with no padding.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchguard/nd/array.hpp"

namespace patchguard::nd {

inline constexpr std::array<char, 8> kCheckpointMagic = {'P', 'G', 'C', 'K', 'P', 'T', '1', '\0'};

struct Checkpoint {
  std::vector<std::pair<std::string, Array>> tensors;
  std::map<std::string, std::string> meta;

  const Array* find(const std::string& name) const {
    for (const auto& [n, a] : tensors)
      if (n == name) return &a;
    return nullptr;
  }
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json manifest;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, a] : ck.tensors) {
    const std::uint64_t nbytes = a.size() * sizeof(double);
    manifest["tensors"].push_back(
        {{"name", name}, {"shape", a.shape}, {"dtype", "f64"}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  manifest["meta"] = ck.meta;
  const std::string text = manifest.dump();

  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [name, a] : ck.tensors)
    for (double d : a.data) detail::put_f64(out, d);
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
    throw CheckpointError("not a PGCKPT1 container");
  const std::uint64_t len = detail::get_u64(bytes.data() + 8);
  if (len > bytes.size() - 16) throw CheckpointError("truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad manifest: ") + e.what());
  }
  const std::size_t base = 16 + len;
  Checkpoint ck;
  for (const auto& t : manifest.at("tensors")) {
    if (t.at("dtype") != "f64") throw CheckpointError("unsupported dtype " + t.at("dtype").dump());
    Shape shape = t.at("shape").get<Shape>();
    const std::uint64_t off = t.at("offset").get<std::uint64_t>();
    const std::uint64_t nbytes = t.at("nbytes").get<std::uint64_t>();
    const std::string name = t.at("name").get<std::string>();
    if (nbytes != numel(shape) * sizeof(double))
      throw CheckpointError("tensor '" + name + "': byte count does not match shape");
    if (base + off + nbytes > bytes.size()) throw CheckpointError("tensor '" + name + "' truncated");
    Array a(shape);
    const char* p = bytes.data() + base + off;
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::bit_cast<double>(detail::get_u64(p + 8 * i));
    ck.tensors.emplace_back(name, std::move(a));
  }
  if (manifest.contains("meta")) ck.meta = manifest["meta"].get<std::map<std::string, std::string>>();
  return ck;
}

/// Writes through a temporary file and renames it into place.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open " + tmp.string());
    const std::string bytes = encode_checkpoint(ck);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace patchguard::nd
