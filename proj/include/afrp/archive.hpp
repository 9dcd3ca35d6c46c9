#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "afrp/error.hpp"
#include "afrp/tensor.hpp"
#include "json.hpp"

namespace afrp {

/// Single-file container: magic, format version, a JSON header and raw
/// little-endian float32 blobs keyed by name.
///
///   "AFRPARCH" | u32 version | u64 header bytes | header JSON | blobs
///
/// The header's "tensors" array lists {name, shape, offset, count} with
/// offsets in floats from the start of the blob section, and "crc32" covers
/// the blob bytes.
struct Archive {
  static constexpr std::uint32_t kFormatVersion = 1;
  static constexpr char kMagic[8] = {'A', 'F', 'R', 'P', 'A', 'R', 'C', 'H'};

  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw LoadError("archive has no tensor '" + name + "'");
  }
  bool has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }
};

namespace detail {
static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

template <class V>
void put(std::ofstream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <class V>
V get(std::ifstream& in, const std::string& path) {
  V v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw LoadError(path + ": truncated archive");
  return v;
}
}  // namespace detail

inline void write_archive(const std::filesystem::path& path, const Archive& ar) {
  nlohmann::json header = ar.header;
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& [name, t] : ar.tensors) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
    offset += t.numel();
    crc = crc32(crc, reinterpret_cast<const Bytef*>(t.data()), static_cast<uInt>(t.numel() * sizeof(float)));
  }
  header["tensors"] = index;
  header["crc32"] = static_cast<std::uint64_t>(crc);
  header["format_version"] = Archive::kFormatVersion;
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(Archive::kMagic, 8);
    detail::put<std::uint32_t>(out, Archive::kFormatVersion);
    detail::put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [_, t] : ar.tensors)
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Archive read_archive(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + p);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, Archive::kMagic, 8) != 0) throw LoadError(p + ": not an archive");
  const auto version = detail::get<std::uint32_t>(in, p);
  if (version != Archive::kFormatVersion)
    throw LoadError(p + ": archive format version " + std::to_string(version) + ", expected " +
                    std::to_string(Archive::kFormatVersion));
  const auto hlen = detail::get<std::uint64_t>(in, p);
  if (hlen > (std::uint64_t{1} << 30)) throw LoadError(p + ": corrupt header length");
  std::string text(hlen, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(hlen))) throw LoadError(p + ": truncated header");
  Archive ar;
  try {
    ar.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(p + ": corrupt header: " + e.what());
  }
  uLong crc = crc32(0L, Z_NULL, 0);
  try {
    for (const auto& entry : ar.header.at("tensors")) {
      Shape shape = entry.at("shape").get<Shape>();
      Tensor<float> t(shape);
      if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float))))
        throw LoadError(p + ": truncated tensor " + entry.at("name").get<std::string>());
      crc = crc32(crc, reinterpret_cast<const Bytef*>(t.data()), static_cast<uInt>(t.numel() * sizeof(float)));
      ar.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
    if (crc != ar.header.at("crc32").get<std::uint64_t>()) throw LoadError(p + ": checksum mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(p + ": corrupt tensor index: " + e.what());
  }
  return ar;
}

}  // namespace afrp
