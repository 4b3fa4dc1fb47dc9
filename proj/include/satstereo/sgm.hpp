#pragma once

#include <cstdint>

#include "satstereo/raster.hpp"

namespace satstereo {

// Census-based semi-global matching on rectified pairs.
//
// Disparity convention used across the whole pipeline: the value stored at a
// pixel is always x_secondary - x_reference for the corresponding pair, no
// matter which frame the map is indexed in. A left map at p predicts the
// secondary column p.x + d(p); a right map at q predicts the reference column
// q.x - d(q). The consistency check below compares the two values directly.

struct SgmParams {
  int census_window = 5;  // odd, 3..7
  int p1 = 10;            // small-jump smoothness penalty, census-Hamming units
  int p2 = 120;           // large-jump penalty, >= p1
  int paths = 8;          // 4 or 8 aggregation directions
  int d_min = -16;
  int d_max = 16;
  double lr_tolerance = 1.0;  // px
  bool subpixel = true;
};

struct DisparityMap {
  FloatRaster disp;   // NaN where invalid
  MaskRaster valid;   // 1 = valid

  int width() const { return disp.width(); }
  int height() const { return disp.height(); }
  bool is_valid(int x, int y) const { return valid.at(x, y) != 0; }
};

struct CensusRaster {
  Raster<uint64_t> code;
  MaskRaster valid;  // border and NaN-touching pixels are invalid
};

CensusRaster census_transform(const FloatRaster& img, int window);

// Full matcher: cost volume, path aggregation, winner-take-all with
// smallest-disparity tie break, optional subpixel, then the left-right check.
DisparityMap sgm_match(const FloatRaster& rect_ref, const FloatRaster& rect_sec,
                       const SgmParams& params);

// Matches with the two images swapped and returns the map in the convention
// above (indexed in the secondary frame, values = x_sec - x_ref).
DisparityMap sgm_match_right(const FloatRaster& rect_ref,
                             const FloatRaster& rect_sec, const SgmParams& params);

// Keeps d_left(p) iff |d_left(p) - d_right(p.x + d_left(p), p.y)| <= tol,
// sampling d_right at the nearest integer column. direction = -1 applies the
// mirrored test used to validate a right-frame map against a left-frame one.
DisparityMap lr_consistency(const DisparityMap& d_left, const DisparityMap& d_right,
                            double tol, int direction = +1);

}  // namespace satstereo
