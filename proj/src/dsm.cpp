#include "satstereo/dsm.hpp"

#include <algorithm>
#include <cmath>

#include "satstereo/errors.hpp"

namespace satstereo {

namespace {

// Viewing direction of an affine camera in local metric coordinates. The
// linear block maps (lat, lon, h); its null direction is the ray.
Eigen::Vector3d metric_view_dir(const AffineCamera& cam, double lat) {
  const Eigen::Matrix<double, 2, 3> a = cam.linear();
  Eigen::Vector3d n = a.row(0).transpose().cross(a.row(1).transpose());
  Eigen::Vector3d m(n.y() * meters_per_deg_lon(lat), n.x() * kMetersPerDegLat,
                    n.z());
  const double len = m.norm();
  if (len < 1e-30) throw IllConditionedPair("affine camera has no view ray");
  return m / len;
}

}  // namespace

PointCloud triangulate(const DisparityMap& disparity, const TilePairGeometry& geom,
                       const TriangulateOptions& opts) {
  PointCloud cloud;
  const Homography inv_ref = geom.h_ref.inverse();
  const Homography inv_sec = geom.h_sec.inverse();

  Eigen::Matrix<double, 4, 3> a;
  a.block<2, 3>(0, 0) = geom.cam_ref.linear();
  a.block<2, 3>(2, 0) = geom.cam_sec.linear();
  const Eigen::ColPivHouseholderQR<Eigen::Matrix<double, 4, 3>> qr(a);
  if (qr.rank() < 3)
    throw IllConditionedPair("triangulation design matrix is rank deficient");

  bool angle_checked = false;
  for (int y = 0; y < disparity.height(); ++y)
    for (int x = 0; x < disparity.width(); ++x) {
      if (!disparity.is_valid(x, y)) continue;
      const double d = disparity.disp.at(x, y);
      const PixelPoint p_rect{geom.rect_x0 + x, geom.rect_y0 + y};
      const PixelPoint q_rect{p_rect.x + d, p_rect.y};
      const PixelPoint u = apply_h(inv_ref, p_rect);
      const PixelPoint v = apply_h(inv_sec, q_rect);

      Eigen::Vector4d b;
      b.segment<2>(0) = Eigen::Vector2d(u.x, u.y) - geom.cam_ref.offset();
      b.segment<2>(2) = Eigen::Vector2d(v.x, v.y) - geom.cam_sec.offset();
      const Eigen::Vector3d w = qr.solve(b);
      const GeoPoint g{w(0), w(1), w(2)};

      if (!angle_checked) {
        const double ang =
            std::acos(std::clamp(metric_view_dir(geom.cam_ref, g.lat)
                                     .dot(metric_view_dir(geom.cam_sec, g.lat)),
                                 -1.0, 1.0)) *
            180.0 / M_PI;
        if (std::min(ang, 180.0 - ang) < opts.min_intersection_deg)
          throw IllConditionedPair("intersection angle below floor");
        angle_checked = true;
      }

      const PixelPoint pr = geom.cam_ref.project(g);
      const PixelPoint ps = geom.cam_sec.project(g);
      const double res = std::max(std::hypot(pr.x - u.x, pr.y - u.y),
                                  std::hypot(ps.x - v.x, ps.y - v.y));
      if (res > opts.max_residual_px) continue;
      cloud.points.push_back({g, res});
    }
  return cloud;
}

Dsm rasterize_dsm(const PointCloud& cloud, const GridSpec& grid) {
  if (cloud.points.empty())
    throw std::invalid_argument("rasterize_dsm: empty point cloud");
  Dsm dsm{grid, make_invalid_raster(grid.width, grid.height)};
  for (const auto& cp : cloud.points) {
    const int ix = static_cast<int>(std::lround(grid.cell_x(cp.p.lon)));
    const int iy = static_cast<int>(std::lround(grid.cell_y(cp.p.lat)));
    if (!dsm.heights.in_bounds(ix, iy)) continue;
    float& cell = dsm.heights.at(ix, iy);
    const float h = static_cast<float>(cp.p.h);
    if (!std::isfinite(cell) || h > cell) cell = h;  // surface semantics
  }
  return dsm;
}

Dsm fuse_median(const std::vector<Dsm>& dsms) {
  if (dsms.empty()) throw std::invalid_argument("fuse_median: no inputs");
  const GridSpec& grid = dsms.front().grid;
  for (const auto& d : dsms)
    if (!d.grid.same_grid(grid)) throw GridMismatch("fuse_median: grid specs differ");

  Dsm out{grid, make_invalid_raster(grid.width, grid.height)};
  std::vector<float> vals;
  vals.reserve(dsms.size());
  for (int y = 0; y < grid.height; ++y)
    for (int x = 0; x < grid.width; ++x) {
      vals.clear();
      for (const auto& d : dsms) {
        const float v = d.heights.at(x, y);
        if (std::isfinite(v)) vals.push_back(v);
      }
      if (vals.empty()) continue;
      // Lower median: deterministic and permutation-invariant.
      std::sort(vals.begin(), vals.end());
      out.heights.at(x, y) = vals[(vals.size() - 1) / 2];
    }
  return out;
}

Dsm apply_water_mask(const Dsm& dsm, const MaskRaster& mask) {
  if (mask.width() != dsm.grid.width || mask.height() != dsm.grid.height)
    throw GridMismatch("water mask does not match the dsm grid");
  Dsm out = dsm;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask.at(x, y)) out.heights.at(x, y) = kInvalid;
  return out;
}

namespace {

double lower_median(std::vector<double>& v) {
  const size_t k = (v.size() - 1) / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

struct Candidate {
  double cost = 1e300;
  double dx = 0, dy = 0, dz = 0;
  bool better_than(const Candidate& o) const {
    if (cost != o.cost) return cost < o.cost;
    if (dx != o.dx) return dx < o.dx;
    if (dy != o.dy) return dy < o.dy;
    return dz < o.dz;
  }
};

}  // namespace

AlignmentOffset align_lidar(const Dsm& lidar, const Dsm& fused,
                            const AlignSearch& search) {
  if (lidar.grid.cell_m != fused.grid.cell_m || !lidar.grid.same_grid(fused.grid))
    throw GridMismatch("align_lidar expects a shared grid");
  const double cell = lidar.grid.cell_m;

  // Overlap precheck at zero offset.
  size_t lidar_valid = 0, both_valid = 0;
  for (int y = 0; y < lidar.grid.height; ++y)
    for (int x = 0; x < lidar.grid.width; ++x) {
      if (!std::isfinite(lidar.heights.at(x, y))) continue;
      ++lidar_valid;
      if (std::isfinite(fused.heights.at(x, y))) ++both_valid;
    }
  if (lidar_valid == 0 ||
      static_cast<double>(both_valid) < search.min_overlap * lidar_valid)
    throw InsufficientOverlap("lidar/fused overlap below threshold");

  std::vector<double> residuals, absdev;
  auto evaluate = [&](double dx_m, double dy_m) {
    residuals.clear();
    const double sx = dx_m / cell, sy = dy_m / cell;
    for (int y = 0; y < lidar.grid.height; ++y)
      for (int x = 0; x < lidar.grid.width; ++x) {
        const float lv = lidar.heights.at(x, y);
        if (!std::isfinite(lv)) continue;
        const double fv = sample_bilinear(fused.heights, x - sx, y - sy);
        if (!std::isfinite(fv)) continue;
        residuals.push_back(static_cast<double>(lv) - fv);
      }
    Candidate c;
    c.dx = dx_m;
    c.dy = dy_m;
    if (residuals.size() < 16) return c;  // cost stays +inf
    c.dz = lower_median(residuals);
    absdev.clear();
    absdev.reserve(residuals.size());
    for (double r : residuals) absdev.push_back(std::abs(r - c.dz));
    c.cost = lower_median(absdev);
    return c;
  };

  Candidate best;
  double step = search.coarse_step_m;
  double cx = 0, cy = 0, half = search.bound_m;
  for (int level = 0; level <= search.refine_levels; ++level) {
    const int ns = static_cast<int>(std::floor(half / step + 1e-9));
    Candidate level_best;
    for (int iy = -ns; iy <= ns; ++iy)
      for (int ix = -ns; ix <= ns; ++ix) {
        const Candidate c = evaluate(cx + ix * step, cy + iy * step);
        if (c.better_than(level_best)) level_best = c;
      }
    if (level_best.cost >= 1e300)
      throw InsufficientOverlap("no offset kept enough overlap");
    best = level_best;
    cx = best.dx;
    cy = best.dy;
    half = step;  // refine around the winner
    step /= search.refine_factor;
  }
  return {best.dx, best.dy, best.dz};
}

Dsm shift_height_grid(const Dsm& src, const AlignmentOffset& offset) {
  const double cell = src.grid.cell_m;
  Dsm out{src.grid, make_invalid_raster(src.grid.width, src.grid.height)};
  const double sx = offset.dx_m / cell, sy = offset.dy_m / cell;
  for (int y = 0; y < src.grid.height; ++y)
    for (int x = 0; x < src.grid.width; ++x) {
      const double v = sample_bilinear(src.heights, x + sx, y + sy);
      if (std::isfinite(v))
        out.heights.at(x, y) = static_cast<float>(v - offset.dz_m);
    }
  return out;
}

}  // namespace satstereo
