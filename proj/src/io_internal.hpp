#pragma once

#include <zlib.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "mfssd/errors.hpp"

namespace mfssd::io {

inline std::uint32_t crc_of(const void* data, std::size_t len) {
  uLong c = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(
      crc32(c, static_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

inline void append_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(char((v >> (8 * b)) & 0xff));
}

inline std::uint32_t get_u32(std::istream& f, const std::string& file) {
  std::array<unsigned char, 4> b;
  if (!f.read(reinterpret_cast<char*>(b.data()), 4))
    throw DataError(file + ": truncated header");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

/// Writes to <target>.tmp and renames, so readers never observe a torn file.
inline void atomic_write(const std::filesystem::path& target, const std::string& bytes) {
  const std::filesystem::path tmp =
      target.parent_path() / (target.filename().string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, target);
}

}  // namespace mfssd::io
