#pragma once

// SHA-256 digests of byte strings and files, lowercase hex.

#include <filesystem>
#include <string>
#include <string_view>

namespace ibmea {

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Digest over every regular file below `dir`, visited in sorted relative-path order; each
/// file contributes its relative path and its bytes.
std::string sha256_tree(const std::filesystem::path& dir);

std::string read_file(const std::filesystem::path& path);

/// Writes via a temporary sibling and renames into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace ibmea
