#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include "idmkit/image.hpp"
#include "idmkit/rng.hpp"

namespace idm::testing {

inline Image random_image(int w, int h, Rng& rng) {
  Image img(w, h);
  for (auto& b : img.bytes()) b = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("idmkit_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace idm::testing
