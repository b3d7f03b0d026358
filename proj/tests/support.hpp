#ifndef CMC_TESTS_SUPPORT_HPP
#define CMC_TESTS_SUPPORT_HPP

#include <filesystem>
#include <random>
#include <string>

#include "cmc/tensor.hpp"

namespace testing_support {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "cmc") {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / (tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline cmc::Tensor random_tensor(const cmc::Shape& s, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    cmc::Tensor t(s);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(lo, hi);
    for (auto& v : t.storage()) v = u(rng);
    return t;
}

}  // namespace testing_support

#endif
