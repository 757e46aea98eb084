#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "geometry.hpp"

namespace vmap {

/// Channel-major occupancy grid. Row r covers y in [origin.y + r*cell,
/// origin.y + (r+1)*cell); column c likewise along x.
struct BevRaster {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  BevRaster() = default;
  BevRaster(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c * h * w), 0.0f) {}

  std::size_t index(int c, int r, int col) const {
    return (static_cast<std::size_t>(c) * static_cast<std::size_t>(height) + static_cast<std::size_t>(r)) *
               static_cast<std::size_t>(width) +
           static_cast<std::size_t>(col);
  }
  float at(int c, int r, int col) const { return data[index(c, r, col)]; }
  float& at(int c, int r, int col) { return data[index(c, r, col)]; }

  friend bool operator==(const BevRaster&, const BevRaster&) = default;
};

}  // namespace vmap
