#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace soapapo {

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

/// Writes through a sibling temp file and renames, so readers never observe a
/// half-written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace soapapo
