#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <vector>

#include "satstereo/geometry.hpp"

namespace satstereo {

template <typename T>
class Raster {
 public:
  Raster() = default;
  Raster(int width, int height, T fill = T{})
      : width_(width), height_(height),
        data_(static_cast<size_t>(width) * height, fill) {}

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return data_.empty(); }
  size_t size() const { return data_.size(); }

  bool in_bounds(int x, int y) const {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }

  T& at(int x, int y) {
    assert(in_bounds(x, y));
    return data_[static_cast<size_t>(y) * width_ + x];
  }
  const T& at(int x, int y) const {
    assert(in_bounds(x, y));
    return data_[static_cast<size_t>(y) * width_ + x];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* row(int y) { return data_.data() + static_cast<size_t>(y) * width_; }
  const T* row(int y) const { return data_.data() + static_cast<size_t>(y) * width_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Raster&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using FloatRaster = Raster<float>;
using MaskRaster = Raster<uint8_t>;

inline constexpr float kInvalid = std::numeric_limits<float>::quiet_NaN();

inline FloatRaster make_invalid_raster(int w, int h) {
  return FloatRaster(w, h, kInvalid);
}

// Bilinear sample; NaN if out of bounds or any contributing texel is NaN.
inline double sample_bilinear(const FloatRaster& r, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  if (x0 < 0 || y0 < 0 || x0 + 1 >= r.width() || y0 + 1 >= r.height()) {
    // Degenerate exact-edge case: fall back to the nearest texel.
    const int xn = static_cast<int>(std::lround(x));
    const int yn = static_cast<int>(std::lround(y));
    if (r.in_bounds(xn, yn) && std::abs(x - xn) < 1e-9 && std::abs(y - yn) < 1e-9)
      return r.at(xn, yn);
    return std::numeric_limits<double>::quiet_NaN();
  }
  const double fx = x - x0;
  const double fy = y - y0;
  const double v00 = r.at(x0, y0);
  const double v10 = r.at(x0 + 1, y0);
  const double v01 = r.at(x0, y0 + 1);
  const double v11 = r.at(x0 + 1, y0 + 1);
  return (v00 * (1 - fx) + v10 * fx) * (1 - fy) +
         (v01 * (1 - fx) + v11 * fx) * fy;
}

// FloatRaster container file: fixed 8-byte magic, little-endian u32
// width/height/channel-count, then channel planes of row-major f32.
// NaN encodes invalid samples. See docs/formats.md.
void write_float_raster(const std::filesystem::path& path,
                        const std::vector<const FloatRaster*>& channels);
void write_float_raster(const std::filesystem::path& path, const FloatRaster& r);
std::vector<FloatRaster> read_float_raster(const std::filesystem::path& path);
FloatRaster read_float_raster_single(const std::filesystem::path& path);

// Gridded height raster: the one container used for DSMs and for the
// LiDAR stand-in height field.
struct HeightGrid {
  GridSpec grid;
  FloatRaster heights;  // NaN = invalid
};

using Dsm = HeightGrid;
using HeightField = HeightGrid;

// Sidecar text header carrying the GridSpec next to a .fr raster.
void write_grid_header(const std::filesystem::path& path, const GridSpec& g);
GridSpec read_grid_header(const std::filesystem::path& path);

void write_height_grid(const std::filesystem::path& raster_path, const HeightGrid& hg);
HeightGrid read_height_grid(const std::filesystem::path& raster_path);

}  // namespace satstereo
