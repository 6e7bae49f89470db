#pragma once

#include "lorp/common.hpp"

#include <filesystem>

namespace lorp {

// Flat archive of named matrices. Layout:
//   magic "LORPCKPT1\n", u32 entry count, then per entry:
//   u32 name length, name bytes, u32 rows, u32 cols,
//   rows*cols float32 values (little-endian, row-major).
// A text manifest of names and shapes is written next to the archive
// as "<path>.manifest".
inline constexpr const char* kCheckpointMagic = "LORPCKPT1\n";

void save_matrix_archive(const std::filesystem::path& path, const NamedMatrices& entries);
NamedMatrices load_matrix_archive(const std::filesystem::path& path);

std::string encode_matrix_archive(const NamedMatrices& entries);
NamedMatrices decode_matrix_archive(const std::string& bytes);

}  // namespace lorp
