#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "satstereo/raster.hpp"
#include "satstereo/rpc_model.hpp"
#include "satstereo/stats.hpp"
#include "satstereo/tie_points.hpp"

namespace satstereo {

using Homography = Eigen::Matrix3d;

inline PixelPoint apply_h(const Homography& h, const PixelPoint& p) {
  const Eigen::Vector3d q = h * Eigen::Vector3d(p.x, p.y, 1.0);
  return {q.x() / q.z(), q.y() / q.z()};
}

struct PixelWindow {
  int x0 = 0, y0 = 0;
  int width = 0, height = 0;
  double cx() const { return x0 + 0.5 * (width - 1); }
  double cy() const { return y0 + 0.5 * (height - 1); }
  bool contains(double x, double y, double margin = 0.0) const {
    return x >= x0 - margin && y >= y0 - margin &&
           x <= x0 + width - 1 + margin && y <= y0 + height - 1 + margin;
  }
};

struct TileLayout {
  int tile_size = 500;
  int overlap = 50;

  // Tile windows covering a chip, row-major; edge tiles are clamped.
  std::vector<PixelWindow> tiles(int chip_w, int chip_h) const;
};

// Per-pixel coordinate maps between rectified and unrectified chip spaces.
// x/y hold source coordinates for each grid pixel; NaN marks invalid.
struct RectMap {
  FloatRaster x;
  FloatRaster y;
  int width() const { return x.width(); }
  int height() const { return x.height(); }
};

struct TileRect {
  PixelWindow window;       // in reference chip coordinates
  PixelWindow window_sec;   // matching footprint in the secondary chip
  Homography h_ref;         // unrectified -> rectified, reference view
  Homography h_sec;         // unrectified -> rectified, secondary view
  AffineCamera cam_ref;     // affine approximations used for this tile
  AffineCamera cam_sec;
  std::vector<Correspondence> corrs;
};

struct RectifiedPair {
  int rect_width = 0;
  int rect_height = 0;
  RectMap fwd_ref;   // rectified grid -> unrectified reference coords
  RectMap fwd_sec;   // rectified grid -> unrectified secondary coords
  RectMap inv_ref;   // unrectified reference grid -> rectified coords
  RectMap inv_sec;   // unrectified secondary grid -> rectified coords
  std::vector<TileRect> tiles;
};

// Resampling homographies (H, H') from a rank-2 fundamental matrix, chosen so
// that F factors exactly (up to scale) as H'^T [skew(1,0,0)] H and inlier rows
// align. Throws EpipoleInsideImage when either epipole falls inside its image.
std::pair<Homography, Homography> rectifying_homographies(
    const Eigen::Matrix3d& f, const std::vector<Correspondence>& corrs,
    const PixelWindow& window_ref, const PixelWindow& window_sec);

// Residual of F ~ H'^T [skew(1,0,0)] H after unit-norm scale and sign
// alignment; near zero for a valid homography pair.
double factorization_residual(const Eigen::Matrix3d& f, const Homography& h_ref,
                              const Homography& h_sec);

struct TileRectifyOptions {
  double h_halfrange = 50.0;  // world grid spans h0 +/- this, meters
  int grid_xy = 5;            // synthesized correspondence grid
  int grid_h = 3;
  // Clipped edge tiles sample their grid over at least this extent (centered
  // on the tile) so the eight-point stays well conditioned; the RPC validity
  // volume, not the chip border, bounds what is usable.
  int min_grid_extent_px = 220;
  double ransac_tol_px = 1.0;     // used only with detected correspondences
  int ransac_iters = 500;
  uint64_t ransac_seed = 1;
};

// Affine approximation at the tile center, correspondences (detected if given,
// otherwise an RPC-synthesized world grid), fundamental matrix, then the
// homography pair. H/H' are returned before any origin-shifting translation.
TileRect rectify_tile_pair(const RpcModel& rpc_ref, const RpcModel& rpc_sec,
                           const PixelWindow& tile, double h0,
                           const TileRectifyOptions& opts = {},
                           const std::vector<Correspondence>* detected = nullptr);

struct StitchOptions {
  double inconsistency_tol_px = 5.0;  // overlap disagreement above this aborts
  int fill_passes = 2;                // inverse-map hole filling sweeps
};

// Anchors each tile's rectified frame to a shared global frame with per-tile
// translations, averages map values in overlaps, and builds inverse maps by
// forward splatting. Single-threaded deterministic reduction. Secondary chip
// dimensions default to the reference ones.
RectifiedPair stitch_chip_maps(const std::vector<TileRect>& tiles,
                               int chip_w, int chip_h,
                               const StitchOptions& opts = {},
                               int sec_chip_w = -1, int sec_chip_h = -1);

// Bilinear warp of image through a coordinate map; NaN outside.
FloatRaster warp(const FloatRaster& image, const RectMap& map);

struct RectEvalOptions {
  int n_points = 4000;
  double h_min = 0.0;
  double h_max = 100.0;
  uint64_t seed = 1;
};

// Rectification-error protocol: world points from a jittered 3-D grid are
// projected into both unrectified views and pushed through the inverse maps;
// reports |y_ref - y_sec| statistics in the rectified frame.
ErrorStats eval_rectification_error(const RpcModel& rpc_ref, const RpcModel& rpc_sec,
                                    const RectifiedPair& pair,
                                    const RectEvalOptions& opts);

}  // namespace satstereo
