#pragma once

#include <functional>
#include <string>

#include "satstereo/raster.hpp"
#include "satstereo/rectification.hpp"
#include "satstereo/rpc_model.hpp"
#include "satstereo/sgm.hpp"
#include "satstereo/stats.hpp"

namespace satstereo {

// Height field with gaps pre-filled for sampling: each invalid cell takes the
// inverse-distance blend of the nearest valid cell found along the four grid
// axes, out to max_gap cells. Wider holes stay invalid.
class PreparedField {
 public:
  explicit PreparedField(const HeightField& hf, int max_gap = 10);

  const GridSpec& grid() const { return grid_; }
  const FloatRaster& filled() const { return filled_; }
  double h_min() const { return h_min_; }
  double h_max() const { return h_max_; }

  // Bilinear sample of the filled raster at a geographic position.
  double sample(double lat, double lon) const {
    return sample_bilinear(filled_, grid_.cell_x(lon), grid_.cell_y(lat));
  }
  bool covers(double lat, double lon) const {
    const double x = grid_.cell_x(lon), y = grid_.cell_y(lat);
    return x >= 0 && y >= 0 && x <= grid_.width - 1 && y <= grid_.height - 1;
  }

 private:
  GridSpec grid_;
  FloatRaster filled_;
  double h_min_ = 0, h_max_ = 0;
};

struct SurfaceHit {
  GeoPoint point;
  bool hit = false;  // false: no crossing, point is the terrain-floor fallback
};

struct MarchOptions {
  double step_m = 0.25;        // defaults to half the field cell when <= 0
  double refine_tol_m = 0.01;  // bisection refinement target
};

// Walks a view ray from above the field downward and returns the first
// (highest) crossing with the surface, refined by bisection. ray(h) must give
// the geographic position of the ray at height h. Throws RayMissesField when
// the ray never enters the field's coverage.
SurfaceHit intersect_surface(const std::function<GeoPoint(double)>& ray,
                             const PreparedField& field,
                             const MarchOptions& opts = {});

// RPC wrapper around intersect_surface (visibility rule: greatest height).
SurfaceHit backproject_to_surface(const RpcModel& rpc, const PixelPoint& px,
                                  const PreparedField& field,
                                  const MarchOptions& opts = {});

struct GtPairMeta {
  std::string pair_id;
  double tau_days = 0;
  double theta_deg = 0;
};

struct GtDisparityPair {
  DisparityMap d_ref;  // indexed in the rectified reference frame
  DisparityMap d_sec;  // indexed in the rectified secondary frame
  GtPairMeta meta;
};

struct GtOptions {
  MarchOptions march;
  double lrrl_tol = 1.0;
  bool lrrl_subpixel = false;  // sample the opposite map bilinearly in x
};

// Four-step groundtruth procedure per rectified pixel: rectified -> unrectified
// (forward map), backproject to the surface, project into the other view,
// unrectified -> rectified (inverse map); disparity = q.x - p.x. Run in both
// directions, then cross-validated with the LRRL check.
GtDisparityPair generate_gt_disparity(const RectifiedPair& rect,
                                      const RpcModel& rpc_ref, const RpcModel& rpc_sec,
                                      const PreparedField& field,
                                      const GtOptions& opts = {}, int jobs = 1);

// Eq-style consistency check; keeps d(p) iff |d(p) - other(s)| <= tol with
// s = (p.x + direction * d(p), p.y), boundary inclusive.
DisparityMap lrrl_check(const DisparityMap& d, const DisparityMap& other,
                        double tol = 1.0, int direction = +1,
                        bool subpixel = false);

// Projects geo-referenced mask cells (heights taken from the field) into the
// unrectified image and through the inverse rectification map; closes
// single-pixel rasterization holes.
MaskRaster project_building_mask(const MaskRaster& mask_geo, const GridSpec& mask_grid,
                                 const RpcModel& rpc, const RectMap& inverse_map,
                                 int rect_w, int rect_h, const PreparedField& field);

struct AnnotatedTiePoint {
  PixelPoint ref;  // rectified reference pixel
  PixelPoint sec;  // rectified secondary pixel
};

// Per annotation: |D(p_ref) - (p_sec.x - p_ref.x)|. Annotations falling on
// invalid groundtruth pixels are skipped and counted.
ErrorStats eval_disparity_error(const GtDisparityPair& gt,
                                const std::vector<AnnotatedTiePoint>& annotations);

}  // namespace satstereo
