#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace saldist {

/// Writes to a sibling temp file and renames it over `path`, so readers
/// never observe a partial file. Creates parent directories.
void atomic_write(const std::filesystem::path& path, std::string_view bytes);

/// Throws DataError naming the path when it cannot be read.
std::string read_file(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string file_digest(const std::filesystem::path& path);

}  // namespace saldist
