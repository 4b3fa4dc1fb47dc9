#include "satstereo/synth.hpp"

#include <algorithm>
#include <cmath>

#include "satstereo/errors.hpp"
#include "satstereo/parallel.hpp"
#include "satstereo/rng.hpp"

namespace satstereo {

// --- scene surface ----------------------------------------------------------

double terrain_height(const SceneSpec& s, double lat, double lon) {
  const double lat_c = 0.5 * (s.lat_min + s.lat_max);
  const double lon_c = 0.5 * (s.lon_min + s.lon_max);
  const double e = (lon - lon_c) * meters_per_deg_lon(lat_c);
  const double n = (lat - lat_c) * kMetersPerDegLat;
  const auto& t = s.terrain;
  if (t.kind == "flat") return t.base_h;
  if (t.kind == "slope") return t.base_h + t.slope_e * e + t.slope_n * n;
  if (t.kind == "rolling") {
    const double k = 2.0 * M_PI / t.wavelength_m;
    return t.base_h + t.amp * std::sin(k * e) * std::sin(k * n);
  }
  throw ConfigInvalid("unknown terrain kind: " + t.kind);
}

namespace {

bool in_box(const BoxSpec& b, double lat, double lon) {
  return lat >= b.lat_min && lat <= b.lat_max && lon >= b.lon_min &&
         lon <= b.lon_max;
}

}  // namespace

double surface_height(const SceneSpec& s, double lat, double lon) {
  const double t = terrain_height(s, lat, lon);
  double h = t;
  for (const auto& b : s.boxes)
    if (in_box(b, lat, lon)) h = std::max(h, t + b.height);
  return h;
}

HeightField build_height_field(const SceneSpec& s) {
  HeightField hf;
  hf.grid = GridSpec::make(s.lat_min, s.lat_max, s.lon_min, s.lon_max, s.cell_m);
  hf.heights = FloatRaster(hf.grid.width, hf.grid.height);
  for (int iy = 0; iy < hf.grid.height; ++iy)
    for (int ix = 0; ix < hf.grid.width; ++ix)
      hf.heights.at(ix, iy) = static_cast<float>(
          surface_height(s, hf.grid.lat_at(iy), hf.grid.lon_at(ix)));
  return hf;
}

MaskRaster building_footprint_mask(const SceneSpec& s, const GridSpec& grid) {
  MaskRaster m(grid.width, grid.height, 0);
  for (int iy = 0; iy < grid.height; ++iy)
    for (int ix = 0; ix < grid.width; ++ix) {
      const double lat = grid.lat_at(iy), lon = grid.lon_at(ix);
      for (const auto& b : s.boxes)
        if (in_box(b, lat, lon)) {
          m.at(ix, iy) = 1;
          break;
        }
    }
  return m;
}

GeoBox scene_volume(const SceneSpec& s, double pad_m) {
  GeoBox v;
  const double dlat = pad_m / kMetersPerDegLat;
  const double dlon = pad_m / meters_per_deg_lon(0.5 * (s.lat_min + s.lat_max));
  v.lat_min = s.lat_min - dlat;
  v.lat_max = s.lat_max + dlat;
  v.lon_min = s.lon_min - dlon;
  v.lon_max = s.lon_max + dlon;
  double h_lo = 1e300, h_hi = -1e300;
  for (double lat : {s.lat_min, 0.5 * (s.lat_min + s.lat_max), s.lat_max})
    for (double lon : {s.lon_min, 0.5 * (s.lon_min + s.lon_max), s.lon_max}) {
      const double t = terrain_height(s, lat, lon);
      h_lo = std::min(h_lo, t);
      h_hi = std::max(h_hi, t);
    }
  double box_max = 0;
  for (const auto& b : s.boxes) box_max = std::max(box_max, b.height);
  v.h_min = h_lo - pad_m;
  v.h_max = h_hi + box_max + pad_m;
  return v;
}

// --- true camera ------------------------------------------------------------

PixelPoint PushbroomCamera::project(const GeoPoint& g) const {
  const Eigen::Vector3d x = metric(g);
  const double a = x.dot(axis_col) / gsd;
  const double b = x.dot(axis_row) / gsd;
  const Eigen::Vector3d xn =
      (x - norm_center).cwiseQuotient(norm_scale);
  const auto t = RpcModel::monomials(xn.x(), xn.y(), xn.z());
  double dx = 0, dy = 0;
  for (int i = 4; i < 20; ++i) {
    dx += cubic_x[static_cast<size_t>(i)] * t[static_cast<size_t>(i)];
    dy += cubic_y[static_cast<size_t>(i)] * t[static_cast<size_t>(i)];
  }
  return {a + dx + pixel_offset.x(), b + dy + pixel_offset.y()};
}

GeoPoint PushbroomCamera::inverse(const PixelPoint& px, double h) const {
  // Affine closed form first: with orthonormal (u, v, d), any point with
  // given (a, b) image coordinates is a*u + b*v + t*d; t fixes the height.
  const double a0 = (px.x - pixel_offset.x()) * gsd;
  const double b0 = (px.y - pixel_offset.y()) * gsd;
  auto point_at = [&](double a, double b) {
    const double t =
        (h - a * axis_col.z() - b * axis_row.z()) / view_dir.z();
    return Eigen::Vector3d(a * axis_col + b * axis_row + t * view_dir);
  };
  double a = a0, b = b0;
  for (int iter = 0; iter < 8; ++iter) {
    const Eigen::Vector3d x = point_at(a, b);
    const PixelPoint p = project(geo(x));
    const double rx = p.x - px.x, ry = p.y - px.y;
    if (std::abs(rx) < 1e-10 && std::abs(ry) < 1e-10) break;
    // The perturbation is small; the affine part dominates the jacobian.
    a -= rx * gsd;
    b -= ry * gsd;
  }
  return geo(point_at(a, b));
}

PushbroomCamera make_pushbroom_camera(const SceneSpec& scene, const ViewSpec& view,
                                      uint64_t seed) {
  PushbroomCamera cam;
  cam.lat_c = 0.5 * (scene.lat_min + scene.lat_max);
  cam.lon_c = 0.5 * (scene.lon_min + scene.lon_max);
  cam.m_lat = kMetersPerDegLat;
  cam.m_lon = meters_per_deg_lon(cam.lat_c);
  cam.gsd = view.gsd_m;
  cam.geom.azimuth_deg = view.azimuth_deg;
  cam.geom.elevation_deg = view.elevation_deg;
  cam.geom.acquisition_time = view.time;

  const double d2r = M_PI / 180.0;
  const double az = view.azimuth_deg * d2r, el = view.elevation_deg * d2r;
  cam.view_dir = Eigen::Vector3d(std::sin(az) * std::cos(el),
                                 std::cos(az) * std::cos(el), std::sin(el));
  // Keep chips north-up like real products: columns along east, rows along
  // south, both projected into the sensor plane. Axes tied to the azimuth
  // would rotate chips against each other and no patch matcher would cope.
  Eigen::Vector3d east = Eigen::Vector3d::UnitX();
  east -= east.dot(cam.view_dir) * cam.view_dir;
  if (east.norm() < 1e-9) east = Eigen::Vector3d::UnitY();
  cam.axis_col = east.normalized();
  Eigen::Vector3d south = -Eigen::Vector3d::UnitY();
  south -= south.dot(cam.view_dir) * cam.view_dir;
  south -= south.dot(cam.axis_col) * cam.axis_col;
  if (south.norm() < 1e-9) south = cam.view_dir.cross(cam.axis_col);
  cam.axis_row = south.normalized();

  const GeoBox vol = scene_volume(scene);
  const double he = 0.5 * (vol.lon_max - vol.lon_min) * cam.m_lon;
  const double hn = 0.5 * (vol.lat_max - vol.lat_min) * cam.m_lat;
  const double hh = 0.5 * (vol.h_max - vol.h_min);
  cam.norm_center = Eigen::Vector3d(0, 0, 0.5 * (vol.h_min + vol.h_max));
  cam.norm_scale = Eigen::Vector3d(std::max(he, 1.0), std::max(hn, 1.0),
                                   std::max(hh, 1.0));

  Rng rng(seed);
  for (int i = 4; i < 20; ++i) {
    cam.cubic_x[static_cast<size_t>(i)] = rng.uniform(-1.0, 1.0);
    cam.cubic_y[static_cast<size_t>(i)] = rng.uniform(-1.0, 1.0);
  }

  // Calibrate the perturbation so the mid-chord deviation of an image span of
  // ~500 px matches the requested curvature. The perturbation is linear in
  // the coefficients, so one measurement fixes the scale.
  auto deviation = [&cam](const Eigen::Vector3d& p0, const Eigen::Vector3d& dir,
                          double half_len) {
    const PixelPoint pa = cam.project(cam.geo(p0 - half_len * dir));
    const PixelPoint pb = cam.project(cam.geo(p0 + half_len * dir));
    const PixelPoint pm = cam.project(cam.geo(p0));
    const double mx = 0.5 * (pa.x + pb.x), my = 0.5 * (pa.y + pb.y);
    return std::hypot(pm.x - mx, pm.y - my);
  };
  const Eigen::Vector3d center = cam.norm_center;
  const double span_m = 250.0 * cam.gsd;
  const Eigen::Vector3d dir_e = Eigen::Vector3d::UnitX();
  Eigen::Vector3d dir_slant(1.0, 0.4, std::min(hh, 0.3 * span_m) / span_m);
  dir_slant.normalize();
  double dev = std::max(deviation(center, dir_e, span_m),
                        deviation(center, dir_slant, span_m));
  if (view.curvature_px > 0 && dev > 1e-12) {
    const double scale = view.curvature_px / dev;
    for (int i = 4; i < 20; ++i) {
      cam.cubic_x[static_cast<size_t>(i)] *= scale;
      cam.cubic_y[static_cast<size_t>(i)] *= scale;
    }
  } else {
    cam.cubic_x.fill(0);
    cam.cubic_y.fill(0);
  }

  // Chip window: bounding box of the projected AOI volume, small margin.
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (double lat : {vol.lat_min, vol.lat_max})
    for (double lon : {vol.lon_min, vol.lon_max})
      for (double h : {vol.h_min, vol.h_max}) {
        const PixelPoint p = cam.project({lat, lon, h});
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
      }
  cam.pixel_offset = Eigen::Vector2d(-x0 + 2.0, -y0 + 2.0);
  cam.width = static_cast<int>(std::ceil(x1 - x0)) + 4;
  cam.height = static_cast<int>(std::ceil(y1 - y0)) + 4;
  return cam;
}

// --- rpc fit ----------------------------------------------------------------

RpcModel fit_rpc(const std::function<PixelPoint(const GeoPoint&)>& camera,
                 const GeoBox& volume, const RpcFitOptions& opts) {
  RpcModel r;
  r.lat_offset = 0.5 * (volume.lat_min + volume.lat_max);
  r.lat_scale = std::max(0.5 * (volume.lat_max - volume.lat_min), 1e-9);
  r.lon_offset = 0.5 * (volume.lon_min + volume.lon_max);
  r.lon_scale = std::max(0.5 * (volume.lon_max - volume.lon_min), 1e-9);
  r.height_offset = 0.5 * (volume.h_min + volume.h_max);
  r.height_scale = std::max(0.5 * (volume.h_max - volume.h_min), 1e-9);

  const int nla = std::max(2, opts.grid_lat);
  const int nlo = std::max(2, opts.grid_lon);
  const int nh = std::max(2, opts.grid_h);

  std::vector<GeoPoint> pts;
  std::vector<PixelPoint> px;
  pts.reserve(static_cast<size_t>(nla) * nlo * nh);
  for (int i = 0; i < nla; ++i)
    for (int j = 0; j < nlo; ++j)
      for (int k = 0; k < nh; ++k) {
        GeoPoint g;
        g.lat = volume.lat_min +
                (volume.lat_max - volume.lat_min) * i / (nla - 1.0);
        g.lon = volume.lon_min +
                (volume.lon_max - volume.lon_min) * j / (nlo - 1.0);
        g.h = volume.h_min + (volume.h_max - volume.h_min) * k / (nh - 1.0);
        pts.push_back(g);
        px.push_back(camera(g));
      }

  double sx0 = 1e300, sx1 = -1e300, sy0 = 1e300, sy1 = -1e300;
  for (const auto& p : px) {
    sx0 = std::min(sx0, p.x);
    sx1 = std::max(sx1, p.x);
    sy0 = std::min(sy0, p.y);
    sy1 = std::max(sy1, p.y);
  }
  if (sx1 - sx0 < 1.0 || sy1 - sy0 < 1.0)
    throw FitResidualTooLarge("camera footprint is degenerate");
  r.samp_offset = 0.5 * (sx0 + sx1);
  r.samp_scale = 0.5 * (sx1 - sx0);
  r.line_offset = 0.5 * (sy0 + sy1);
  r.line_scale = 0.5 * (sy1 - sy0);

  // Linear system per pixel coordinate: num . t - target * den_rest . t_rest
  // = target, with den constant term pinned to 1. Min-norm SVD solve keeps
  // spurious denominator terms out when the data is exactly polynomial.
  const Eigen::Index n = static_cast<Eigen::Index>(pts.size());
  Eigen::MatrixXd a(n, 39);
  Eigen::VectorXd bx(n), by(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& g = pts[static_cast<size_t>(i)];
    const double xn = (g.lon - r.lon_offset) / r.lon_scale;
    const double yn = (g.lat - r.lat_offset) / r.lat_scale;
    const double zn = (g.h - r.height_offset) / r.height_scale;
    const auto t = RpcModel::monomials(xn, yn, zn);
    const double ux = (px[static_cast<size_t>(i)].x - r.samp_offset) / r.samp_scale;
    const double uy = (px[static_cast<size_t>(i)].y - r.line_offset) / r.line_scale;
    for (int k = 0; k < 20; ++k) a(i, k) = t[static_cast<size_t>(k)];
    for (int k = 1; k < 20; ++k) {
      a(i, 19 + k) = -ux * t[static_cast<size_t>(k)];
    }
    bx(i) = ux;
    by(i) = uy;
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd cx = svd.solve(bx);
  // Same monomial block for the y system; only the cross terms differ.
  Eigen::MatrixXd ay = a;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& g = pts[static_cast<size_t>(i)];
    const double xn = (g.lon - r.lon_offset) / r.lon_scale;
    const double yn = (g.lat - r.lat_offset) / r.lat_scale;
    const double zn = (g.h - r.height_offset) / r.height_scale;
    const auto t = RpcModel::monomials(xn, yn, zn);
    for (int k = 1; k < 20; ++k)
      ay(i, 19 + k) = -by(i) * t[static_cast<size_t>(k)];
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svdy(ay, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd cy = svdy.solve(by);

  r.samp_den[0] = 1.0;
  r.line_den[0] = 1.0;
  for (int k = 0; k < 20; ++k) {
    r.samp_num[static_cast<size_t>(k)] = cx(k);
    r.line_num[static_cast<size_t>(k)] = cy(k);
  }
  for (int k = 1; k < 20; ++k) {
    r.samp_den[static_cast<size_t>(k)] = cx(19 + k);
    r.line_den[static_cast<size_t>(k)] = cy(19 + k);
  }

  // Validate on an independent grid (offset to sit between fit nodes).
  double worst = 0;
  const int vla = nla - 1, vlo = nlo - 1, vh = std::max(2, nh - 1);
  for (int i = 0; i < vla; ++i)
    for (int j = 0; j < vlo; ++j)
      for (int k = 0; k < vh; ++k) {
        GeoPoint g;
        g.lat = volume.lat_min +
                (volume.lat_max - volume.lat_min) * (i + 0.5) / vla;
        g.lon = volume.lon_min +
                (volume.lon_max - volume.lon_min) * (j + 0.5) / vlo;
        g.h = volume.h_min + (volume.h_max - volume.h_min) * (k + 0.5) / vh;
        PixelPoint truth = camera(g);
        PixelPoint fit;
        try {
          fit = r.project(g);
        } catch (const Error&) {
          throw FitResidualTooLarge("fitted rpc fails inside the volume");
        }
        worst = std::max(worst, std::hypot(fit.x - truth.x, fit.y - truth.y));
      }
  if (worst > opts.max_residual_px)
    throw FitResidualTooLarge("rpc fit residual " + std::to_string(worst) +
                              " px exceeds bound");
  return r;
}

RpcModel fit_rpc(const PushbroomCamera& camera, const GeoBox& volume,
                 const RpcFitOptions& opts) {
  return fit_rpc([&camera](const GeoPoint& g) { return camera.project(g); },
                 volume, opts);
}

// --- texture and rendering ---------------------------------------------------

SceneTexture::SceneTexture(const SceneSpec& s) : spec_(&s) {
  lat_c_ = 0.5 * (s.lat_min + s.lat_max);
  lon_c_ = 0.5 * (s.lon_min + s.lon_max);
  m_lat_ = kMetersPerDegLat;
  m_lon_ = meters_per_deg_lon(lat_c_);
  Rng rng(s.seed * 0x9e3779b97f4a7c15ULL + 17);
  const int kWaves = 24;
  for (int i = 0; i < kWaves; ++i) {
    const double theta = rng.uniform(0, 2 * M_PI);
    const double wavelength = 4.0 * std::pow(6.0, rng.next_double());  // 4..24 m
    const double f = 2.0 * M_PI / wavelength;
    waves_.push_back({f * std::cos(theta), f * std::sin(theta),
                      rng.uniform(0, 2 * M_PI), 1.0 / std::sqrt(kWaves)});
  }
  Rng prng(s.seed * 0x2545f4914f6cdd1dULL + 99);
  for (int i = 0; i < kWaves; ++i) {
    const double theta = prng.uniform(0, 2 * M_PI);
    const double wavelength = 3.0 * std::pow(8.0, prng.next_double());
    const double f = 2.0 * M_PI / wavelength;
    perturb_waves_.push_back({f * std::cos(theta), f * std::sin(theta),
                              prng.uniform(0, 2 * M_PI), 1.0 / std::sqrt(kWaves)});
  }
}

double SceneTexture::sample(double lat, double lon, int view_index,
                            double view_perturb) const {
  const double e = (lon - lon_c_) * m_lon_;
  const double n = (lat - lat_c_) * m_lat_;
  double v = 0;
  for (const auto& w : waves_) v += w.amp * std::cos(w.fx * e + w.fy * n + w.phase);
  double roof = 0;
  for (const auto& b : spec_->boxes)
    if (in_box(b, lat, lon)) {
      roof = 0.55;
      break;
    }
  double p = 0;
  if (view_perturb > 0 && view_index > 0) {
    const double shift = 37.0 * view_index;  // decorrelate views
    for (const auto& w : perturb_waves_)
      p += w.amp * std::cos(w.fx * (e + shift) + w.fy * (n - shift) + w.phase);
    p *= view_perturb;
  }
  const double value = 128.0 + 48.0 * v + 44.0 * roof + 48.0 * p;
  return std::clamp(value, 1.0, 254.0);
}

FloatRaster render_view(const SceneSpec& scene, const PreparedField& field,
                        const PushbroomCamera& cam, int view_index, int jobs) {
  const SceneTexture tex(scene);
  FloatRaster out(cam.width, cam.height, kInvalid);
  MarchOptions march;
  march.step_m = 0.5 * field.grid().cell_m;
  parallel_for(0, cam.height, jobs, [&](int y) {
    for (int x = 0; x < cam.width; ++x) {
      const PixelPoint px{static_cast<double>(x), static_cast<double>(y)};
      auto ray = [&cam, &px](double h) { return cam.inverse(px, h); };
      SurfaceHit hit;
      try {
        hit = intersect_surface(ray, field, march);
      } catch (const RayMissesField&) {
        continue;
      }
      if (!hit.hit) continue;
      out.at(x, y) = static_cast<float>(tex.sample(
          hit.point.lat, hit.point.lon, view_index, scene.texture_perturb));
    }
  });
  return out;
}

// --- analytic oracle ----------------------------------------------------------

SurfaceHit intersect_scene_exact(const SceneSpec& scene,
                                 const std::function<GeoPoint(double)>& ray,
                                 double h_top, double h_bottom, double step_m,
                                 double tol_m) {
  auto above = [&](double h, GeoPoint& g) {
    g = ray(h);
    return h > surface_height(scene, g.lat, g.lon);
  };
  GeoPoint g;
  double h_above = h_top;
  if (!above(h_top, g)) return {g, true};  // started below: degenerate, accept
  for (double h = h_top - step_m; h > h_bottom - 1e-12; h -= step_m) {
    if (!above(h, g)) {
      double lo = h, hi = h_above;
      GeoPoint best = g;
      while (hi - lo > tol_m) {
        const double mid = 0.5 * (lo + hi);
        GeoPoint gm;
        if (!above(mid, gm)) {
          lo = mid;
          best = gm;
        } else {
          hi = mid;
        }
      }
      return {best, true};
    }
    h_above = h;
  }
  return {ray(h_bottom), false};
}

DisparityMap analytic_disparity(const PushbroomCamera& cam_ref,
                                const PushbroomCamera& cam_sec,
                                const RectifiedPair& rect, const SceneSpec& scene,
                                int jobs) {
  const int w = rect.rect_width, h = rect.rect_height;
  DisparityMap out{make_invalid_raster(w, h), MaskRaster(w, h, 0)};
  const GeoBox vol = scene_volume(scene, 1.0);
  const double step = scene.cell_m / 10.0;
  parallel_for(0, h, jobs, [&](int y) {
    for (int x = 0; x < w; ++x) {
      const float ux = rect.fwd_ref.x.at(x, y);
      if (!std::isfinite(ux)) continue;
      const float uy = rect.fwd_ref.y.at(x, y);
      const PixelPoint u{ux, uy};
      auto ray = [&cam_ref, &u](double hh) { return cam_ref.inverse(u, hh); };
      const SurfaceHit hit =
          intersect_scene_exact(scene, ray, vol.h_max, vol.h_min, step);
      if (!hit.hit) continue;
      const PixelPoint v = cam_sec.project(hit.point);
      const double qx = sample_bilinear(rect.inv_sec.x, v.x, v.y);
      if (!std::isfinite(qx)) continue;
      out.disp.at(x, y) = static_cast<float>(qx - x);
      out.valid.at(x, y) = 1;
    }
  });
  return out;
}

SyntheticScene build_scene(const SceneSpec& spec, int jobs) {
  SyntheticScene scene;
  scene.spec = spec;
  scene.field = build_height_field(spec);
  scene.building_mask_geo = building_footprint_mask(spec, scene.field.grid);
  const PreparedField prepared(scene.field);
  const GeoBox vol = scene_volume(spec);
  Rng rng(spec.seed);
  int index = 0;
  for (const auto& view : spec.views) {
    SyntheticAcquisition acq;
    acq.id = view.id.empty() ? "view" + std::to_string(index) : view.id;
    acq.camera = make_pushbroom_camera(spec, view, rng.fork(100 + index).next_u64());
    acq.rpc = fit_rpc(acq.camera, vol);
    acq.geom = acq.camera.geom;
    acq.image = render_view(spec, prepared, acq.camera, index, jobs);
    scene.views.push_back(std::move(acq));
    ++index;
  }
  return scene;
}

}  // namespace satstereo
