#pragma once

#include <vector>

#include "satstereo/raster.hpp"
#include "satstereo/rectification.hpp"
#include "satstereo/sgm.hpp"

namespace satstereo {

struct CloudPoint {
  GeoPoint p;
  double residual_px = 0.0;  // reprojection residual of the triangulation
};

struct PointCloud {
  std::vector<CloudPoint> points;
};

struct TriangulateOptions {
  double max_residual_px = 1.0;        // points above this are dropped
  double min_intersection_deg = 1.0;   // pair conditioning floor
};

// Geometry of one tile-level rectified pair: the disparity raster lives on a
// rectified window whose origin is (rect_x0, rect_y0) in the frame H/H' map to.
struct TilePairGeometry {
  AffineCamera cam_ref;
  AffineCamera cam_sec;
  Homography h_ref;
  Homography h_sec;
  double rect_x0 = 0;
  double rect_y0 = 0;
};

// For each valid disparity pixel, composes the inverse rectifications and
// solves the two affine cameras for (lat, lon, h) by linear least squares.
PointCloud triangulate(const DisparityMap& disparity, const TilePairGeometry& geom,
                       const TriangulateOptions& opts = {});

// Surface-model gridding: per-cell maximum of contributing point heights.
Dsm rasterize_dsm(const PointCloud& cloud, const GridSpec& grid);

// Per-cell median across DSMs on an identical grid; lower median for even
// counts so the result is deterministic and permutation-invariant.
Dsm fuse_median(const std::vector<Dsm>& dsms);

Dsm apply_water_mask(const Dsm& dsm, const MaskRaster& mask);

struct AlignmentOffset {
  double dx_m = 0;  // east
  double dy_m = 0;  // north
  double dz_m = 0;  // up
};

struct AlignSearch {
  double bound_m = 8.0;       // +/- horizontal search extent
  double coarse_step_m = 2.0;
  int refine_levels = 2;      // each level divides the step by refine_factor
  int refine_factor = 4;
  double min_overlap = 0.25;  // fraction of lidar-valid cells
};

inline double fine_step_m(const AlignSearch& s) {
  double st = s.coarse_step_m;
  for (int i = 0; i < s.refine_levels; ++i) st /= s.refine_factor;
  return st;
}

// Coarse-to-fine exhaustive translation search minimizing the median absolute
// height difference after the per-offset optimal vertical shift. The returned
// offset is the displacement of the LiDAR relative to the DSM, i.e.
// lidar(x) ~ fused(x - offset_xy) + offset_z; subtract it to align.
AlignmentOffset align_lidar(const Dsm& lidar, const Dsm& fused,
                            const AlignSearch& search = {});

// Applies the inverse of an offset estimated by align_lidar.
Dsm shift_height_grid(const Dsm& src, const AlignmentOffset& offset);

}  // namespace satstereo
