#include "idmkit/coords.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "idmkit/action.hpp"
#include "idmkit/errors.hpp"

namespace idm {

int discretize_coord(double pixel, double extent) {
  if (!(extent > 0.0)) throw ValidationError("discretize_coord: extent must be positive");
  if (!(pixel >= 0.0 && pixel <= extent)) {
    throw ValidationError("discretize_coord: pixel " + std::to_string(pixel) +
                          " outside [0, " + std::to_string(extent) + "]");
  }
  const long bin = std::lround(static_cast<double>(kMaxBin) * pixel / extent);
  return static_cast<int>(std::clamp<long>(bin, 0, kMaxBin));
}

double undiscretize_coord(int bin, double extent) {
  if (bin < 0 || bin > kMaxBin) {
    throw ValidationError("undiscretize_coord: bin " + std::to_string(bin) + " outside [0, 1000]");
  }
  if (!(extent > 0.0)) throw ValidationError("undiscretize_coord: extent must be positive");
  return static_cast<double>(bin) * extent / static_cast<double>(kMaxBin);
}

}  // namespace idm
