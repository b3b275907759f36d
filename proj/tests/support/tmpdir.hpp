#pragma once

#include <filesystem>
#include <random>
#include <string>

namespace testsupport {

// Fresh directory under the system temp root, removed on destruction.
class TempDir {
public:
    TempDir() {
        std::random_device rd;
        std::uniform_int_distribution<std::uint64_t> dist;
        path_ = std::filesystem::temp_directory_path() /
                ("refrank_test_" + std::to_string(dist(rd)));
        std::filesystem::create_directories(path_);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace testsupport
