#include "idmkit/image.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "idmkit/errors.hpp"

namespace idm {

Image::Image(int width, int height, Rgb fill) : width_(width), height_(height) {
  if (width <= 0 || height <= 0) throw ValidationError("image dimensions must be positive");
  pixels_.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t i = 0; i < pixels_.size(); i += 3) {
    pixels_[i] = fill.r;
    pixels_[i + 1] = fill.g;
    pixels_[i + 2] = fill.b;
  }
}

void Image::fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, width_);
  y1 = std::min(y1, height_);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) set(x, y, c);
  }
}

bool same_content(const Observation& a, const Observation& b) {
  if (a.pixels == b.pixels) return true;
  if (!a.pixels || !b.pixels) return false;
  return *a.pixels == *b.pixels;
}

double diff_fraction(const Image& a, const Image& b) {
  if (a.width() != b.width() || a.height() != b.height()) {
    throw ValidationError("diff_fraction: image dimensions differ");
  }
  const auto pa = a.bytes();
  const auto pb = b.bytes();
  std::size_t differing = 0;
  for (std::size_t i = 0; i < pa.size(); i += 3) {
    if (pa[i] != pb[i] || pa[i + 1] != pb[i + 1] || pa[i + 2] != pb[i + 2]) ++differing;
  }
  return static_cast<double>(differing) / (static_cast<double>(pa.size()) / 3.0);
}

Image gaussian_blur(const Image& image, double sigma) {
  if (!(sigma > 0.0)) throw ValidationError("gaussian_blur: sigma must be > 0");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : kernel) v /= sum;

  const int w = image.width(), h = image.height();
  std::vector<double> tmp(static_cast<std::size_t>(w) * h * 3);
  const auto src = image.bytes();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const int xx = std::clamp(x + k, 0, w - 1);
          acc += kernel[static_cast<std::size_t>(k + radius)] *
                 src[(static_cast<std::size_t>(y) * w + xx) * 3 + c];
        }
        tmp[(static_cast<std::size_t>(y) * w + x) * 3 + c] = acc;
      }
    }
  }
  Image out(w, h);
  auto dst = out.bytes();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const int yy = std::clamp(y + k, 0, h - 1);
          acc += kernel[static_cast<std::size_t>(k + radius)] *
                 tmp[(static_cast<std::size_t>(yy) * w + x) * 3 + c];
        }
        dst[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            static_cast<std::uint8_t>(std::clamp(std::lround(acc), 0L, 255L));
      }
    }
  }
  return out;
}

}  // namespace idm
