#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace idm {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Row-major H x W x 3 8-bit image.
class Image {
 public:
  Image() = default;
  Image(int width, int height, Rgb fill = {});

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return pixels_.empty(); }

  Rgb at(int x, int y) const {
    const std::uint8_t* p = &pixels_[index(x, y)];
    return {p[0], p[1], p[2]};
  }
  void set(int x, int y, Rgb c) {
    std::uint8_t* p = &pixels_[index(x, y)];
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  }
  /// Fills [x0, x1) x [y0, y1) clipped to the image.
  void fill_rect(int x0, int y0, int x1, int y1, Rgb c);

  std::span<const std::uint8_t> bytes() const { return pixels_; }
  std::span<std::uint8_t> bytes() { return pixels_; }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int x, int y) const {
    return (static_cast<std::size_t>(y) * width_ + x) * 3;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

/// A rendered screen. Pixel storage is shared between transitions that reference
/// the same frame.
struct Observation {
  std::shared_ptr<const Image> pixels;
  int frame_index = 0;
  std::string source_id;

  const Image& image() const { return *pixels; }
};

/// Observations compare by content, not by storage identity.
bool same_content(const Observation& a, const Observation& b);

/// Fraction of pixels whose RGB triple differs. Images must share dimensions.
double diff_fraction(const Image& a, const Image& b);

/// Separable Gaussian blur with a kernel radius of ceil(3 sigma); edges clamp.
Image gaussian_blur(const Image& image, double sigma);

}  // namespace idm
