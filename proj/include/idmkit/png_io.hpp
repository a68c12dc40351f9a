#pragma once

#include <filesystem>
#include <string>

#include "idmkit/image.hpp"

namespace idm {

/// PNG file bytes for `image`; a pure function of the pixels.
std::string encode_png(const Image& image);

/// Lossless RGB8 PNG. Output bytes are a pure function of the pixels (no
/// timestamps or text chunks).
void write_png(const std::filesystem::path& path, const Image& image);

/// Throws IoError if the file is missing and IntegrityError if it is not a
/// decodable PNG (bad signature, CRC or zlib stream).
Image read_png(const std::filesystem::path& path);

}  // namespace idm
