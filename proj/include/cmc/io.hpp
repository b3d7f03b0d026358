#ifndef CMC_IO_HPP
#define CMC_IO_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cmc::io {

std::vector<char> read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

/// Writes to a sibling temporary and renames it over the destination.
void write_file_atomic(const std::filesystem::path& path, std::span<const char> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

std::vector<char> floats_to_le_bytes(std::span<const float> values);
std::vector<float> le_bytes_to_floats(std::span<const char> bytes);

/// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(std::span<const char> bytes);
/// Digest over every regular file below `root`: relative path and contents, in
/// sorted path order. Files whose name is in `skip` are ignored.
std::string directory_digest(const std::filesystem::path& root, const std::vector<std::string>& skip = {});

}  // namespace cmc::io

#endif
