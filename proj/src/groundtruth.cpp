#include "satstereo/groundtruth.hpp"

#include <algorithm>
#include <cmath>

#include "satstereo/errors.hpp"
#include "satstereo/parallel.hpp"

namespace satstereo {

namespace {

// Inverse-distance blend of the nearest valid sample along each grid axis,
// out to max_gap cells; wider holes (large water bodies, no-data margins)
// stay invalid.
FloatRaster fill_holes(const FloatRaster& src, int max_gap) {
  const int w = src.width(), h = src.height();
  FloatRaster out = src;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (std::isfinite(src.at(x, y))) continue;
      double wsum = 0, vsum = 0;
      const int dx[4] = {1, -1, 0, 0};
      const int dy[4] = {0, 0, 1, -1};
      for (int k = 0; k < 4; ++k) {
        for (int step = 1; step <= max_gap; ++step) {
          const int qx = x + dx[k] * step, qy = y + dy[k] * step;
          if (qx < 0 || qy < 0 || qx >= w || qy >= h) break;
          const float v = src.at(qx, qy);
          if (std::isfinite(v)) {
            const double wt = 1.0 / step;
            wsum += wt;
            vsum += wt * v;
            break;
          }
        }
      }
      if (wsum > 0) out.at(x, y) = static_cast<float>(vsum / wsum);
    }
  return out;
}

}  // namespace

PreparedField::PreparedField(const HeightField& hf, int max_gap)
    : grid_(hf.grid), filled_(fill_holes(hf.heights, max_gap)) {
  h_min_ = 1e300;
  h_max_ = -1e300;
  for (int y = 0; y < filled_.height(); ++y)
    for (int x = 0; x < filled_.width(); ++x) {
      const float v = filled_.at(x, y);
      if (!std::isfinite(v)) continue;
      h_min_ = std::min(h_min_, static_cast<double>(v));
      h_max_ = std::max(h_max_, static_cast<double>(v));
    }
  if (h_min_ > h_max_) throw RayMissesField("height field has no valid cells");
}

SurfaceHit intersect_surface(const std::function<GeoPoint(double)>& ray,
                             const PreparedField& field, const MarchOptions& opts) {
  const double step = opts.step_m > 0 ? opts.step_m : 0.5 * field.grid().cell_m;
  const double h_top = field.h_max() + step;
  const double h_bot = field.h_min();

  bool entered = false;
  bool have_above = false;
  double h_above = h_top;

  for (double h = h_top; h > h_bot - 1e-9; h -= step) {
    const GeoPoint g = ray(h);
    if (!field.covers(g.lat, g.lon)) {
      have_above = false;
      continue;
    }
    entered = true;
    const double s = field.sample(g.lat, g.lon);
    if (!std::isfinite(s)) {
      have_above = false;
      continue;
    }
    if (h <= s) {
      // Crossed; refine within the bracket (or accept when unbracketed).
      if (!have_above) return {g, true};
      double lo = h, hi = h_above;
      GeoPoint best = g;
      while (hi - lo > opts.refine_tol_m) {
        const double mid = 0.5 * (lo + hi);
        const GeoPoint gm = ray(mid);
        const double sm = field.covers(gm.lat, gm.lon)
                              ? field.sample(gm.lat, gm.lon)
                              : std::numeric_limits<double>::quiet_NaN();
        if (std::isfinite(sm) && mid <= sm) {
          lo = mid;
          best = gm;
        } else {
          hi = mid;
        }
      }
      return {best, true};
    }
    have_above = true;
    h_above = h;
  }
  if (!entered) throw RayMissesField("view ray never enters the field coverage");
  return {ray(h_bot), false};  // no crossing; terrain-floor point, flagged
}

SurfaceHit backproject_to_surface(const RpcModel& rpc, const PixelPoint& px,
                                  const PreparedField& field,
                                  const MarchOptions& opts) {
  GeoPoint guess{rpc.lat_offset, rpc.lon_offset, 0};
  auto ray = [&rpc, &px, guess](double h) mutable {
    const GeoPoint g = rpc.inverse_project(px, h, guess);
    guess = g;
    return g;
  };
  return intersect_surface(ray, field, opts);
}

namespace {

// One direction of the four-step procedure. For every rectified pixel of
// `fwd_from`: forward map, backprojection to the surface, projection through
// the other model, inverse map of the other view; value = to.x - from.x.
DisparityMap gt_direction(const RectMap& fwd_from, const RectMap& inv_to,
                          const RpcModel& rpc_from, const RpcModel& rpc_to,
                          const PreparedField& field, const MarchOptions& march,
                          int sign, int jobs) {
  const int w = fwd_from.width(), h = fwd_from.height();
  DisparityMap out{make_invalid_raster(w, h), MaskRaster(w, h, 0)};
  parallel_for(0, h, jobs, [&](int y) {
    for (int x = 0; x < w; ++x) {
      const float ux = fwd_from.x.at(x, y);
      if (!std::isfinite(ux)) continue;
      const float uy = fwd_from.y.at(x, y);
      SurfaceHit hit;
      try {
        hit = backproject_to_surface(rpc_from, {ux, uy}, field, march);
      } catch (const Error&) {
        continue;
      }
      if (!hit.hit) continue;
      PixelPoint v;
      try {
        v = rpc_to.project(hit.point);
      } catch (const Error&) {
        continue;
      }
      const double qx = sample_bilinear(inv_to.x, v.x, v.y);
      if (!std::isfinite(qx)) continue;
      out.disp.at(x, y) = static_cast<float>(sign * (qx - x));
      out.valid.at(x, y) = 1;
    }
  });
  return out;
}

}  // namespace

DisparityMap lrrl_check(const DisparityMap& d, const DisparityMap& other,
                        double tol, int direction, bool subpixel) {
  DisparityMap out{make_invalid_raster(d.width(), d.height()),
                   MaskRaster(d.width(), d.height(), 0)};
  for (int y = 0; y < d.height(); ++y)
    for (int x = 0; x < d.width(); ++x) {
      if (!d.is_valid(x, y)) continue;
      const double v = d.disp.at(x, y);
      const double sx = x + direction * v;
      double ov;
      if (subpixel) {
        const int x0 = static_cast<int>(std::floor(sx));
        if (x0 < 0 || x0 + 1 >= other.width() || y >= other.height()) continue;
        if (!other.is_valid(x0, y) || !other.is_valid(x0 + 1, y)) continue;
        const double f = sx - x0;
        ov = other.disp.at(x0, y) * (1 - f) + other.disp.at(x0 + 1, y) * f;
      } else {
        const int xi = static_cast<int>(std::lround(sx));
        if (xi < 0 || xi >= other.width() || y >= other.height()) continue;
        if (!other.is_valid(xi, y)) continue;
        ov = other.disp.at(xi, y);
      }
      if (std::abs(v - ov) <= tol) {  // inclusive boundary
        out.disp.at(x, y) = static_cast<float>(v);
        out.valid.at(x, y) = 1;
      }
    }
  return out;
}

GtDisparityPair generate_gt_disparity(const RectifiedPair& rect,
                                      const RpcModel& rpc_ref, const RpcModel& rpc_sec,
                                      const PreparedField& field,
                                      const GtOptions& opts, int jobs) {
  GtDisparityPair out;
  const DisparityMap raw_ref = gt_direction(rect.fwd_ref, rect.inv_sec, rpc_ref,
                                            rpc_sec, field, opts.march, +1, jobs);
  const DisparityMap raw_sec = gt_direction(rect.fwd_sec, rect.inv_ref, rpc_sec,
                                            rpc_ref, field, opts.march, -1, jobs);
  out.d_ref = lrrl_check(raw_ref, raw_sec, opts.lrrl_tol, +1, opts.lrrl_subpixel);
  out.d_sec = lrrl_check(raw_sec, raw_ref, opts.lrrl_tol, -1, opts.lrrl_subpixel);
  return out;
}

MaskRaster project_building_mask(const MaskRaster& mask_geo, const GridSpec& mask_grid,
                                 const RpcModel& rpc, const RectMap& inverse_map,
                                 int rect_w, int rect_h, const PreparedField& field) {
  MaskRaster rect_mask(rect_w, rect_h, 0);
  for (int iy = 0; iy < mask_geo.height(); ++iy)
    for (int ix = 0; ix < mask_geo.width(); ++ix) {
      if (!mask_geo.at(ix, iy)) continue;
      const double lat = mask_grid.lat_at(iy);
      const double lon = mask_grid.lon_at(ix);
      const double hgt = field.sample(lat, lon);
      if (!std::isfinite(hgt)) continue;
      PixelPoint u;
      try {
        u = rpc.project({lat, lon, hgt});
      } catch (const Error&) {
        continue;
      }
      const double rx = sample_bilinear(inverse_map.x, u.x, u.y);
      const double ry = sample_bilinear(inverse_map.y, u.x, u.y);
      if (!std::isfinite(rx) || !std::isfinite(ry)) continue;
      const int qx = static_cast<int>(std::lround(rx));
      const int qy = static_cast<int>(std::lround(ry));
      if (rect_mask.in_bounds(qx, qy)) rect_mask.at(qx, qy) = 1;
    }

  // Morphological closing (radius 1) to seal rasterization pinholes.
  auto morph = [&](const MaskRaster& src, bool dilate) {
    MaskRaster dst(src.width(), src.height(), 0);
    for (int y = 0; y < src.height(); ++y)
      for (int x = 0; x < src.width(); ++x) {
        bool acc = !dilate;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int qx = x + dx, qy = y + dy;
            const bool v = src.in_bounds(qx, qy) ? src.at(qx, qy) != 0 : false;
            if (dilate)
              acc = acc || v;
            else
              acc = acc && v;
          }
        dst.at(x, y) = acc ? 1 : 0;
      }
    return dst;
  };
  return morph(morph(rect_mask, true), false);
}

ErrorStats eval_disparity_error(const GtDisparityPair& gt,
                                const std::vector<AnnotatedTiePoint>& annotations) {
  std::vector<double> errs;
  size_t skipped = 0;
  for (const auto& a : annotations) {
    const int x = static_cast<int>(std::lround(a.ref.x));
    const int y = static_cast<int>(std::lround(a.ref.y));
    if (!gt.d_ref.disp.in_bounds(x, y) || !gt.d_ref.is_valid(x, y)) {
      ++skipped;
      continue;
    }
    const double annotated = a.sec.x - a.ref.x;
    errs.push_back(std::abs(gt.d_ref.disp.at(x, y) - annotated));
  }
  return ErrorStats::from_samples(std::move(errs), skipped);
}

}  // namespace satstereo
