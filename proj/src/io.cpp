#include "cmc/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "cmc/tensor.hpp"

namespace cmc::io {

namespace fs = std::filesystem;

std::vector<char> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("missing file: " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& path) {
    const auto bytes = read_file(path);
    return {bytes.begin(), bytes.end()};
}

void write_file_atomic(const fs::path& path, std::span<const char> bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    write_file_atomic(path, std::span<const char>(text.data(), text.size()));
}

namespace {

std::uint32_t swap32(std::uint32_t v) {
    return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
}

}  // namespace

std::vector<char> floats_to_le_bytes(std::span<const float> values) {
    std::vector<char> out(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(values[i]);
        if constexpr (std::endian::native == std::endian::big) bits = swap32(bits);
        std::memcpy(out.data() + i * 4, &bits, 4);
    }
    return out;
}

std::vector<float> le_bytes_to_floats(std::span<const char> bytes) {
    if (bytes.size() % 4 != 0) throw ValidationError("float payload length is not a multiple of 4");
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, bytes.data() + i * 4, 4);
        if constexpr (std::endian::native == std::endian::big) bits = swap32(bits);
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_update(std::uint64_t& h, std::span<const char> bytes) {
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= kFnvPrime;
    }
}

std::string hex(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

}  // namespace

std::string fnv1a_hex(std::span<const char> bytes) {
    std::uint64_t h = kFnvOffset;
    fnv_update(h, bytes);
    return hex(h);
}

std::string directory_digest(const fs::path& root, const std::vector<std::string>& skip) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        if (std::find(skip.begin(), skip.end(), e.path().filename().string()) != skip.end()) continue;
        files.push_back(fs::relative(e.path(), root));
    }
    std::sort(files.begin(), files.end());
    std::uint64_t h = kFnvOffset;
    for (const auto& rel : files) {
        const std::string name = rel.generic_string();
        fnv_update(h, std::span<const char>(name.data(), name.size() + 1));
        const auto bytes = read_file(root / rel);
        fnv_update(h, bytes);
    }
    return hex(h);
}

}  // namespace cmc::io
