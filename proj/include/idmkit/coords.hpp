#pragma once

namespace idm {

/// bin = round(1000 * pixel / extent) clamped to [0, 1000]. Throws
/// ValidationError for extent <= 0 or a pixel outside [0, extent].
int discretize_coord(double pixel, double extent);

/// pixel = bin * extent / 1000. Throws ValidationError for bins outside [0, 1000].
double undiscretize_coord(int bin, double extent);

}  // namespace idm
