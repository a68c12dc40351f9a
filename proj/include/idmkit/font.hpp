#pragma once

#include <string_view>

#include "idmkit/image.hpp"

namespace idm {

inline constexpr int kGlyphWidth = 5;
inline constexpr int kGlyphHeight = 7;
inline constexpr int kGlyphAdvance = 6;

/// True when pixel (col, row) of the 5x7 glyph for `c` is set. Characters
/// outside printable ASCII render as a filled box.
bool glyph_bit(char c, int col, int row);

/// Draws `text` with its top-left corner at (x, y), clipped to the rectangle
/// [clip_x0, clip_x1) x [clip_y0, clip_y1).
void draw_text(Image& image, int x, int y, std::string_view text, Rgb color, int clip_x0,
               int clip_y0, int clip_x1, int clip_y1);

}  // namespace idm
