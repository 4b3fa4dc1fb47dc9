#include "satstereo/rectification.hpp"

#include <cmath>
#include <numeric>

#include "satstereo/errors.hpp"
#include "satstereo/rng.hpp"

namespace satstereo {

std::vector<PixelWindow> TileLayout::tiles(int chip_w, int chip_h) const {
  if (overlap <= 0 || overlap >= tile_size)
    throw std::invalid_argument("tile layout: 0 < overlap < tile_size required");
  auto starts = [&](int extent) {
    std::vector<int> v{0};
    const int step = tile_size - overlap;
    while (v.back() + tile_size < extent) {
      int next = v.back() + step;
      if (next + tile_size > extent) next = extent - tile_size;
      v.push_back(next);
    }
    return v;
  };
  std::vector<PixelWindow> out;
  for (int y0 : starts(chip_h))
    for (int x0 : starts(chip_w))
      out.push_back({x0, y0, std::min(tile_size, chip_w - x0),
                     std::min(tile_size, chip_h - y0)});
  return out;
}

namespace {

Eigen::Matrix3d skew_x_unit() {
  Eigen::Matrix3d m;
  m << 0, 0, 0, 0, 0, -1, 0, 1, 0;  // skew matrix of (1, 0, 0)
  return m;
}

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// d(mapped point)/d(source point) of a homography at p.
Eigen::Matrix2d homography_jacobian(const Homography& h, const PixelPoint& p) {
  const Eigen::Vector3d q = h * Eigen::Vector3d(p.x, p.y, 1.0);
  const double w = q.z();
  Eigen::Matrix2d j;
  j(0, 0) = (h(0, 0) * w - q.x() * h(2, 0)) / (w * w);
  j(0, 1) = (h(0, 1) * w - q.x() * h(2, 1)) / (w * w);
  j(1, 0) = (h(1, 0) * w - q.y() * h(2, 0)) / (w * w);
  j(1, 1) = (h(1, 1) * w - q.y() * h(2, 1)) / (w * w);
  return j;
}

void check_epipole_outside(const Eigen::Vector3d& e, const PixelWindow& win,
                           const char* which) {
  const double n = std::hypot(e.x(), e.y());
  if (std::abs(e.z()) < 1e-12 * std::max(n, 1.0)) return;  // at infinity
  const double px = e.x() / e.z();
  const double py = e.y() / e.z();
  if (win.contains(px, py))
    throw EpipoleInsideImage(std::string("epipole inside ") + which + " image");
}

Eigen::Matrix3d translation(double tx, double ty) {
  Eigen::Matrix3d t = Eigen::Matrix3d::Identity();
  t(0, 2) = tx;
  t(1, 2) = ty;
  return t;
}

}  // namespace

std::pair<Homography, Homography> rectifying_homographies(
    const Eigen::Matrix3d& f_in, const std::vector<Correspondence>& corrs,
    const PixelWindow& window_ref, const PixelWindow& window_sec) {
  Eigen::Matrix3d f = f_in;
  const double fn = f.norm();
  if (fn < 1e-300) throw DegenerateConfiguration("zero fundamental matrix");
  f /= fn;

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(f, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d e_ref = svd.matrixV().col(2);  // F e = 0
  const Eigen::Vector3d e_sec = svd.matrixU().col(2);  // F^T e' = 0
  check_epipole_outside(e_ref, window_ref, "reference");
  check_epipole_outside(e_sec, window_sec, "secondary");

  // Secondary homography: translate the window center to the origin, rotate
  // the epipole onto the +x axis, then map it to infinity.
  const Eigen::Matrix3d t = translation(-window_sec.cx(), -window_sec.cy());
  const Eigen::Vector3d et = t * e_sec;
  const double r = std::hypot(et.x(), et.y());
  if (r < 1e-12)
    throw EpipoleInsideImage("epipole at the secondary window center");
  const double c = et.x() / r, s = et.y() / r;
  Eigen::Matrix3d rot;
  rot << c, s, 0, -s, c, 0, 0, 0, 1;
  Eigen::Matrix3d g = Eigen::Matrix3d::Identity();
  if (std::abs(et.z()) > 1e-12 * r) g(2, 0) = -et.z() / r;
  Homography h_sec = g * rot * t;

  // Matching reference homography through the transfer map M with
  // F = [e']_x M (up to scale), then an x-only least-squares alignment.
  const Eigen::Vector3d eu = e_sec / e_sec.norm();
  Eigen::Matrix3d m;
  bool m_ok = false;
  for (const auto& v : {Eigen::Vector3d(1, 1, 1), Eigen::Vector3d(0.3, -0.7, 1),
                        Eigen::Vector3d(-1, 0.5, 1)}) {
    m = skew(eu) * f + eu * v.transpose();
    if (std::abs(m.determinant()) > 1e-10) {
      m_ok = true;
      break;
    }
  }
  if (!m_ok) throw DegenerateConfiguration("transfer homography is singular");
  Homography h_ref = h_sec * m;

  if (corrs.size() >= 3) {
    Eigen::MatrixXd a(static_cast<Eigen::Index>(corrs.size()), 3);
    Eigen::VectorXd b(static_cast<Eigen::Index>(corrs.size()));
    for (size_t i = 0; i < corrs.size(); ++i) {
      const PixelPoint pa = apply_h(h_ref, corrs[i].a);
      const PixelPoint pb = apply_h(h_sec, corrs[i].b);
      a.row(static_cast<Eigen::Index>(i)) << pa.x, pa.y, 1.0;
      b(static_cast<Eigen::Index>(i)) = pb.x;
    }
    const Eigen::Vector3d sol =
        a.colPivHouseholderQr().solve(b);
    if (std::isfinite(sol.sum()) && std::abs(sol(0)) > 1e-8) {
      Eigen::Matrix3d ha = Eigen::Matrix3d::Identity();
      ha(0, 0) = sol(0);
      ha(0, 1) = sol(1);
      ha(0, 2) = sol(2);
      h_ref = ha * h_ref;
    }
  }

  // Orientation and scale sanitation. Common y transforms and per-image
  // x transforms both preserve the factorization and the row alignment.
  const PixelPoint c_ref{window_ref.cx(), window_ref.cy()};
  {
    const Eigen::Matrix2d j = homography_jacobian(h_ref, c_ref);
    Eigen::Matrix3d sy = Eigen::Matrix3d::Identity();
    const double ynorm = j.row(1).norm();
    if (ynorm > 1e-12) sy(1, 1) = 1.0 / ynorm;
    if (j(1, 1) < 0) sy(1, 1) = -sy(1, 1);
    h_ref = sy * h_ref;
    h_sec = sy * h_sec;
  }
  {
    // Common x scale and orientation from the reference view. A per-view
    // x normalization would undo the least-squares x alignment and leave a
    // disparity gradient across the frame.
    const Eigen::Matrix2d j = homography_jacobian(h_ref, c_ref);
    Eigen::Matrix3d sx = Eigen::Matrix3d::Identity();
    const double xnorm = j.row(0).norm();
    if (xnorm > 1e-12) sx(0, 0) = 1.0 / xnorm;
    if (j(0, 0) < 0) sx(0, 0) = -sx(0, 0);
    h_ref = sx * h_ref;
    h_sec = sx * h_sec;
  }

  if (std::abs(h_ref(2, 2)) > 1e-12) h_ref /= h_ref(2, 2);
  if (std::abs(h_sec(2, 2)) > 1e-12) h_sec /= h_sec(2, 2);
  return {h_ref, h_sec};
}

TileRect rectify_tile_pair(const RpcModel& rpc_ref, const RpcModel& rpc_sec,
                           const PixelWindow& tile, double h0,
                           const TileRectifyOptions& opts,
                           const std::vector<Correspondence>* detected) {
  TileRect out;
  out.window = tile;

  const PixelPoint center{tile.cx(), tile.cy()};
  const GeoPoint x0 = rpc_ref.inverse_project(center, h0);
  out.cam_ref = rpc_ref.affine_approximate(x0);
  out.cam_sec = rpc_sec.affine_approximate(x0);

  bool use_detected = detected && detected->size() >= 8;
  if (!use_detected) {
    // Synthesized correspondences from a world grid projected by both RPCs.
    // The height span is clamped to the models' validity volumes; a grid
    // collapsed to one height plane would make F estimation degenerate.
    double h_lo = h0 - opts.h_halfrange;
    double h_hi = h0 + opts.h_halfrange;
    for (const RpcModel* rpc : {&rpc_ref, &rpc_sec}) {
      const double m = 0.95 * rpc->validity_bound * rpc->height_scale;
      h_lo = std::max(h_lo, rpc->height_offset - m);
      h_hi = std::min(h_hi, rpc->height_offset + m);
    }
    if (!(h_hi > h_lo))
      throw TooFewMatches("tile height range outside the rpc validity volumes");
    const double gw = std::max(tile.width - 1, opts.min_grid_extent_px);
    const double gh_ext = std::max(tile.height - 1, opts.min_grid_extent_px);
    const int nxy = std::max(2, opts.grid_xy);
    const int nh = std::max(2, opts.grid_h);
    for (int gy = 0; gy < nxy; ++gy)
      for (int gx = 0; gx < nxy; ++gx)
        for (int gh = 0; gh < nh; ++gh) {
          const PixelPoint px{tile.cx() + gw * (gx / (nxy - 1.0) - 0.5),
                              tile.cy() + gh_ext * (gy / (nxy - 1.0) - 0.5)};
          const double h = h_lo + (h_hi - h_lo) * gh / (nh - 1.0);
          try {
            const GeoPoint w = rpc_ref.inverse_project(px, h);
            Correspondence c;
            c.a = rpc_ref.project(w);
            c.b = rpc_sec.project(w);
            c.score = 1.0;
            out.corrs.push_back(c);
          } catch (const Error&) {
            // grid point outside a validity volume; skip
          }
        }
    if (out.corrs.size() < 8)
      throw TooFewMatches("tile grid yielded fewer than 8 correspondences");
  } else {
    out.corrs = *detected;
  }

  // Matching footprint in the secondary chip: projected bbox of the tile
  // borders over the usable height range (the grid support may be wider than
  // the tile; the footprint must not be).
  {
    double bx0 = 1e300, by0 = 1e300, bx1 = -1e300, by1 = -1e300;
    double h_lo = 1e300, h_hi = -1e300;
    for (const auto& c : out.corrs) {
      bx0 = std::min(bx0, c.b.x);  // fallback: full correspondence bbox
      bx1 = std::max(bx1, c.b.x);
      by0 = std::min(by0, c.b.y);
      by1 = std::max(by1, c.b.y);
    }
    {
      const double m = 0.95 * rpc_ref.validity_bound * rpc_ref.height_scale;
      h_lo = std::max(h0 - opts.h_halfrange, rpc_ref.height_offset - m);
      h_hi = std::min(h0 + opts.h_halfrange, rpc_ref.height_offset + m);
    }
    double fx0 = 1e300, fy0 = 1e300, fx1 = -1e300, fy1 = -1e300;
    bool any = false;
    for (int gx = 0; gx < 4; ++gx)
      for (int gy = 0; gy < 4; ++gy)
        for (double h : {h_lo, h_hi}) {
          const PixelPoint px{tile.x0 + (tile.width - 1) * gx / 3.0,
                              tile.y0 + (tile.height - 1) * gy / 3.0};
          try {
            const PixelPoint b = rpc_sec.project(rpc_ref.inverse_project(px, h));
            fx0 = std::min(fx0, b.x);
            fx1 = std::max(fx1, b.x);
            fy0 = std::min(fy0, b.y);
            fy1 = std::max(fy1, b.y);
            any = true;
          } catch (const Error&) {
          }
        }
    if (any) {
      bx0 = fx0;
      bx1 = fx1;
      by0 = fy0;
      by1 = fy1;
    }
    out.window_sec.x0 = static_cast<int>(std::floor(bx0)) - 2;
    out.window_sec.y0 = static_cast<int>(std::floor(by0)) - 2;
    out.window_sec.width = static_cast<int>(std::ceil(bx1 - bx0)) + 5;
    out.window_sec.height = static_cast<int>(std::ceil(by1 - by0)) + 5;
  }

  // Zero-parallax pair (e.g. identical models): the views are already row
  // aligned and F is unconstrained, so keep identity maps.
  double max_disp = 0;
  for (const auto& c : out.corrs)
    max_disp = std::max(max_disp, std::hypot(c.b.x - c.a.x, c.b.y - c.a.y));
  if (max_disp < 1e-3) {
    out.h_ref.setIdentity();
    out.h_sec.setIdentity();
    return out;
  }

  // Affine F: the tile regime is affine by construction, and a projective
  // fit on slightly curved data drifts the epipole to a finite position,
  // giving every tile a different projective scale that the translation-only
  // stitching cannot reconcile.
  Eigen::Matrix3d f;
  if (use_detected) {
    auto res = estimate_fundamental_ransac(out.corrs, opts.ransac_tol_px,
                                           opts.ransac_iters, opts.ransac_seed);
    std::vector<Correspondence> inliers;
    for (size_t i = 0; i < out.corrs.size(); ++i)
      if (res.inlier_mask[i]) inliers.push_back(out.corrs[i]);
    out.corrs = std::move(inliers);
  }
  f = affine_fundamental(out.corrs);

  auto [h_ref, h_sec] =
      rectifying_homographies(f, out.corrs, tile, out.window_sec);
  out.h_ref = h_ref;
  out.h_sec = h_sec;
  return out;
}

namespace {

struct Accum {
  std::vector<double> sum_x, sum_y;
  std::vector<int> cnt;
  int w = 0, h = 0;
  Accum(int w_, int h_) : sum_x(static_cast<size_t>(w_) * h_, 0.0),
                          sum_y(static_cast<size_t>(w_) * h_, 0.0),
                          cnt(static_cast<size_t>(w_) * h_, 0), w(w_), h(h_) {}
  void add(int x, int y, double vx, double vy) {
    const size_t i = static_cast<size_t>(y) * w + x;
    sum_x[i] += vx;
    sum_y[i] += vy;
    ++cnt[i];
  }
  RectMap to_map() const {
    RectMap m{FloatRaster(w, h, kInvalid), FloatRaster(w, h, kInvalid)};
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const size_t i = static_cast<size_t>(y) * w + x;
        if (cnt[i] > 0) {
          m.x.at(x, y) = static_cast<float>(sum_x[i] / cnt[i]);
          m.y.at(x, y) = static_cast<float>(sum_y[i] / cnt[i]);
        }
      }
    return m;
  }
};

void fill_holes_pass(RectMap& m) {
  const int w = m.width(), h = m.height();
  FloatRaster nx = m.x, ny = m.y;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (std::isfinite(m.x.at(x, y))) continue;
      double sx = 0, sy = 0;
      int c = 0;
      const int dx[4] = {1, -1, 0, 0};
      const int dy[4] = {0, 0, 1, -1};
      for (int k = 0; k < 4; ++k) {
        const int qx = x + dx[k], qy = y + dy[k];
        if (qx < 0 || qy < 0 || qx >= w || qy >= h) continue;
        const float vx = m.x.at(qx, qy);
        if (!std::isfinite(vx)) continue;
        sx += vx;
        sy += m.y.at(qx, qy);
        ++c;
      }
      // Two supports minimum: fills interior pinholes but does not creep
      // outward past the real coverage.
      if (c >= 2) {
        nx.at(x, y) = static_cast<float>(sx / c);
        ny.at(x, y) = static_cast<float>(sy / c);
      }
    }
  m.x = std::move(nx);
  m.y = std::move(ny);
}

}  // namespace

RectifiedPair stitch_chip_maps(const std::vector<TileRect>& tiles, int chip_w,
                               int chip_h, const StitchOptions& opts,
                               int sec_chip_w, int sec_chip_h) {
  if (tiles.empty()) throw std::invalid_argument("stitch: no tiles");
  if (sec_chip_w <= 0) sec_chip_w = chip_w;
  if (sec_chip_h <= 0) sec_chip_h = chip_h;
  const size_t n = tiles.size();

  // Per-tile translations: a shared y offset per tile plus per-view x offsets,
  // estimated against already-anchored neighbours over the window overlaps.
  std::vector<double> dy(n, 0), dx_ref(n, 0), dx_sec(n, 0);
  std::vector<bool> anchored(n, false);
  anchored[0] = true;

  auto overlap_window = [](const PixelWindow& a, const PixelWindow& b) {
    PixelWindow o;
    o.x0 = std::max(a.x0, b.x0);
    o.y0 = std::max(a.y0, b.y0);
    o.width = std::min(a.x0 + a.width, b.x0 + b.width) - o.x0;
    o.height = std::min(a.y0 + a.height, b.y0 + b.height) - o.y0;
    return o;
  };
  auto sample_offsets = [&](const PixelWindow& o, const Homography& ht,
                            const Homography& hu, double du_x, double du_y,
                            std::vector<double>& dxs, std::vector<double>& dys) {
    const int k = 5;
    for (int gy = 0; gy < k; ++gy)
      for (int gx = 0; gx < k; ++gx) {
        const PixelPoint p{o.x0 + (o.width - 1) * static_cast<double>(gx) / (k - 1),
                           o.y0 + (o.height - 1) * static_cast<double>(gy) / (k - 1)};
        const PixelPoint rt = apply_h(ht, p);
        const PixelPoint ru = apply_h(hu, p);
        dxs.push_back(ru.x + du_x - rt.x);
        dys.push_back(ru.y + du_y - rt.y);
      }
  };

  for (size_t t = 1; t < n; ++t) {
    std::vector<double> dys, dxrs, dxss;
    for (size_t u = 0; u < t; ++u) {
      if (!anchored[u]) continue;
      const PixelWindow o_ref = overlap_window(tiles[t].window, tiles[u].window);
      if (o_ref.width >= 2 && o_ref.height >= 2)
        sample_offsets(o_ref, tiles[t].h_ref, tiles[u].h_ref, dx_ref[u], dy[u],
                       dxrs, dys);
      const PixelWindow o_sec =
          overlap_window(tiles[t].window_sec, tiles[u].window_sec);
      if (o_sec.width >= 2 && o_sec.height >= 2)
        sample_offsets(o_sec, tiles[t].h_sec, tiles[u].h_sec, dx_sec[u], dy[u],
                       dxss, dys);
    }
    if (!dys.empty() && !dxrs.empty() && !dxss.empty()) {
      auto mean = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      };
      dy[t] = mean(dys);
      dx_ref[t] = mean(dxrs);
      dx_sec[t] = mean(dxss);
      double worst = 0;
      for (double v : dys) worst = std::max(worst, std::abs(v - dy[t]));
      for (double v : dxrs) worst = std::max(worst, std::abs(v - dx_ref[t]));
      for (double v : dxss) worst = std::max(worst, std::abs(v - dx_sec[t]));
      if (worst > opts.inconsistency_tol_px)
        throw InconsistentTiles("tile overlap disagreement " + std::to_string(worst) +
                                " px exceeds " +
                                std::to_string(opts.inconsistency_tol_px));
    }
    anchored[t] = true;
  }

  std::vector<Homography> a_ref(n), a_sec(n);
  for (size_t t = 0; t < n; ++t) {
    a_ref[t] = translation(dx_ref[t], dy[t]) * tiles[t].h_ref;
    a_sec[t] = translation(dx_sec[t], dy[t]) * tiles[t].h_sec;
  }

  // Global rectified extent: union of the mapped tile corners of both views.
  double min_x = 1e300, min_y = 1e300, max_x = -1e300, max_y = -1e300;
  for (size_t t = 0; t < n; ++t) {
    for (int view = 0; view < 2; ++view) {
      const auto& w = view == 0 ? tiles[t].window : tiles[t].window_sec;
      const Homography& h = view == 0 ? a_ref[t] : a_sec[t];
      const double xs[2] = {static_cast<double>(w.x0),
                            static_cast<double>(w.x0 + w.width - 1)};
      const double ys[2] = {static_cast<double>(w.y0),
                            static_cast<double>(w.y0 + w.height - 1)};
      for (double cx : xs)
        for (double cy : ys) {
          const PixelPoint q = apply_h(h, {cx, cy});
          min_x = std::min(min_x, q.x);
          max_x = std::max(max_x, q.x);
          min_y = std::min(min_y, q.y);
          max_y = std::max(max_y, q.y);
        }
    }
  }
  const double ox = std::floor(min_x);
  const double oy = std::floor(min_y);
  const int rect_w = static_cast<int>(std::ceil(max_x - ox)) + 1;
  const int rect_h = static_cast<int>(std::ceil(max_y - oy)) + 1;
  if (rect_w <= 0 || rect_h <= 0 || rect_w > 8 * chip_w + 1024 ||
      rect_h > 8 * chip_h + 1024)
    throw InconsistentTiles("rectified extent is implausible");

  RectifiedPair pair;
  pair.rect_width = rect_w;
  pair.rect_height = rect_h;
  pair.tiles = tiles;
  for (size_t t = 0; t < n; ++t) {
    pair.tiles[t].h_ref = translation(-ox, -oy) * a_ref[t];
    pair.tiles[t].h_sec = translation(-ox, -oy) * a_sec[t];
  }

  // Forward maps (rectified -> source), averaged in overlaps.
  Accum acc_ref(rect_w, rect_h), acc_sec(rect_w, rect_h);
  for (size_t t = 0; t < n; ++t) {
    for (int view = 0; view < 2; ++view) {
      const auto& w = view == 0 ? tiles[t].window : tiles[t].window_sec;
      const Homography& h = view == 0 ? pair.tiles[t].h_ref : pair.tiles[t].h_sec;
      Accum& acc = view == 0 ? acc_ref : acc_sec;
      const Homography hinv = h.inverse();
      double bx0 = 1e300, by0 = 1e300, bx1 = -1e300, by1 = -1e300;
      const double xs[2] = {static_cast<double>(w.x0),
                            static_cast<double>(w.x0 + w.width - 1)};
      const double ys[2] = {static_cast<double>(w.y0),
                            static_cast<double>(w.y0 + w.height - 1)};
      for (double cx : xs)
        for (double cy : ys) {
          const PixelPoint q = apply_h(h, {cx, cy});
          bx0 = std::min(bx0, q.x);
          bx1 = std::max(bx1, q.x);
          by0 = std::min(by0, q.y);
          by1 = std::max(by1, q.y);
        }
      const int ix0 = std::max(0, static_cast<int>(std::floor(bx0)));
      const int iy0 = std::max(0, static_cast<int>(std::floor(by0)));
      const int ix1 = std::min(rect_w - 1, static_cast<int>(std::ceil(bx1)));
      const int iy1 = std::min(rect_h - 1, static_cast<int>(std::ceil(by1)));
      for (int iy = iy0; iy <= iy1; ++iy)
        for (int ix = ix0; ix <= ix1; ++ix) {
          const PixelPoint src = apply_h(hinv, {static_cast<double>(ix),
                                                static_cast<double>(iy)});
          if (w.contains(src.x, src.y, 0.5))
            acc.add(ix, iy, src.x, src.y);
        }
    }
  }
  pair.fwd_ref = acc_ref.to_map();
  pair.fwd_sec = acc_sec.to_map();

  // Inverse maps by forward splatting of the averaged forward maps. The
  // splat distributes each sample over its four neighbouring cells with
  // bilinear weights; a nearest-cell splat would leave ~0.4 px quantization
  // noise, far above the 0.25 px round-trip budget.
  auto build_inverse = [&](const RectMap& fwd, int cw, int ch) {
    std::vector<double> sum_x(static_cast<size_t>(cw) * ch, 0.0);
    std::vector<double> sum_y(static_cast<size_t>(cw) * ch, 0.0);
    std::vector<double> wsum(static_cast<size_t>(cw) * ch, 0.0);
    for (int iy = 0; iy < rect_h; ++iy)
      for (int ix = 0; ix < rect_w; ++ix) {
        const float sx = fwd.x.at(ix, iy);
        if (!std::isfinite(sx)) continue;
        const float sy = fwd.y.at(ix, iy);
        const int x0 = static_cast<int>(std::floor(sx));
        const int y0 = static_cast<int>(std::floor(sy));
        const double fx = sx - x0, fy = sy - y0;
        const double w4[4] = {(1 - fx) * (1 - fy), fx * (1 - fy),
                              (1 - fx) * fy, fx * fy};
        const int cx4[4] = {x0, x0 + 1, x0, x0 + 1};
        const int cy4[4] = {y0, y0, y0 + 1, y0 + 1};
        for (int k = 0; k < 4; ++k) {
          if (cx4[k] < 0 || cy4[k] < 0 || cx4[k] >= cw || cy4[k] >= ch) continue;
          const size_t i = static_cast<size_t>(cy4[k]) * cw + cx4[k];
          sum_x[i] += w4[k] * ix;
          sum_y[i] += w4[k] * iy;
          wsum[i] += w4[k];
        }
      }
    RectMap inv{FloatRaster(cw, ch, kInvalid), FloatRaster(cw, ch, kInvalid)};
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) {
        const size_t i = static_cast<size_t>(y) * cw + x;
        if (wsum[i] > 0.05) {
          inv.x.at(x, y) = static_cast<float>(sum_x[i] / wsum[i]);
          inv.y.at(x, y) = static_cast<float>(sum_y[i] / wsum[i]);
        }
      }
    for (int p = 0; p < opts.fill_passes; ++p) fill_holes_pass(inv);

    // Newton polish against the forward maps: removes the remaining splat
    // interpolation error (~0.01 px) so forward-inverse round trips are tight.
    for (int pass = 0; pass < 2; ++pass)
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) {
          float& rx = inv.x.at(x, y);
          if (!std::isfinite(rx)) continue;
          float& ry = inv.y.at(x, y);
          const double ux = sample_bilinear(fwd.x, rx, ry);
          const double uy = sample_bilinear(fwd.y, rx, ry);
          if (!std::isfinite(ux) || !std::isfinite(uy)) continue;
          const double jxx = sample_bilinear(fwd.x, rx + 0.5, ry) -
                             sample_bilinear(fwd.x, rx - 0.5, ry);
          const double jxy = sample_bilinear(fwd.x, rx, ry + 0.5) -
                             sample_bilinear(fwd.x, rx, ry - 0.5);
          const double jyx = sample_bilinear(fwd.y, rx + 0.5, ry) -
                             sample_bilinear(fwd.y, rx - 0.5, ry);
          const double jyy = sample_bilinear(fwd.y, rx, ry + 0.5) -
                             sample_bilinear(fwd.y, rx, ry - 0.5);
          const double det = jxx * jyy - jxy * jyx;
          if (!std::isfinite(det) || std::abs(det) < 1e-6) continue;
          const double ex = ux - x, ey = uy - y;
          double sx_step = (jyy * ex - jxy * ey) / det;
          double sy_step = (-jyx * ex + jxx * ey) / det;
          sx_step = std::clamp(sx_step, -2.0, 2.0);
          sy_step = std::clamp(sy_step, -2.0, 2.0);
          rx = static_cast<float>(rx - sx_step);
          ry = static_cast<float>(ry - sy_step);
        }
    return inv;
  };
  pair.inv_ref = build_inverse(pair.fwd_ref, chip_w, chip_h);
  pair.inv_sec = build_inverse(pair.fwd_sec, sec_chip_w, sec_chip_h);
  return pair;
}

double factorization_residual(const Eigen::Matrix3d& f, const Homography& h_ref,
                              const Homography& h_sec) {
  Eigen::Matrix3d lhs = f / f.norm();
  Eigen::Matrix3d rhs = h_sec.transpose() * skew_x_unit() * h_ref;
  const double rn = rhs.norm();
  if (rn < 1e-300) return lhs.norm();
  rhs /= rn;
  // align sign
  double dot = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) dot += lhs(i, j) * rhs(i, j);
  if (dot < 0) rhs = -rhs;
  return (lhs - rhs).norm();
}

FloatRaster warp(const FloatRaster& image, const RectMap& map) {
  FloatRaster out(map.width(), map.height(), kInvalid);
  for (int y = 0; y < map.height(); ++y)
    for (int x = 0; x < map.width(); ++x) {
      const float sx = map.x.at(x, y);
      if (!std::isfinite(sx)) continue;
      const float sy = map.y.at(x, y);
      const double v = sample_bilinear(image, sx, sy);
      if (std::isfinite(v)) out.at(x, y) = static_cast<float>(v);
    }
  return out;
}

ErrorStats eval_rectification_error(const RpcModel& rpc_ref, const RpcModel& rpc_sec,
                                    const RectifiedPair& pair,
                                    const RectEvalOptions& opts) {
  const int chip_w = pair.inv_ref.width();
  const int chip_h = pair.inv_ref.height();
  const double h_mid = 0.5 * (opts.h_min + opts.h_max);

  // Geographic extent of the chip at mid height, shrunk slightly to stay
  // clear of the validity boundary.
  double lat_min = 1e300, lat_max = -1e300, lon_min = 1e300, lon_max = -1e300;
  for (const auto& c : {PixelPoint{2, 2}, PixelPoint{chip_w - 3.0, 2},
                        PixelPoint{2, chip_h - 3.0},
                        PixelPoint{chip_w - 3.0, chip_h - 3.0}}) {
    const GeoPoint g = rpc_ref.inverse_project(c, h_mid);
    lat_min = std::min(lat_min, g.lat);
    lat_max = std::max(lat_max, g.lat);
    lon_min = std::min(lon_min, g.lon);
    lon_max = std::max(lon_max, g.lon);
  }
  const double lat_pad = 0.02 * (lat_max - lat_min);
  const double lon_pad = 0.02 * (lon_max - lon_min);
  lat_min += lat_pad;
  lat_max -= lat_pad;
  lon_min += lon_pad;
  lon_max -= lon_pad;

  const int nz = 4;
  const int nxy = static_cast<int>(std::ceil(
      std::sqrt(static_cast<double>(opts.n_points) / nz)));
  Rng rng(opts.seed);
  std::vector<double> samples;
  size_t skipped = 0;
  int emitted = 0;
  for (int k = 0; k < nz && emitted < opts.n_points; ++k)
    for (int j = 0; j < nxy && emitted < opts.n_points; ++j)
      for (int i = 0; i < nxy && emitted < opts.n_points; ++i) {
        ++emitted;
        const double jit_x = rng.uniform(-0.4, 0.4);
        const double jit_y = rng.uniform(-0.4, 0.4);
        const double jit_z = rng.uniform(-0.4, 0.4);
        GeoPoint g;
        g.lon = lon_min + (lon_max - lon_min) * ((i + 0.5 + jit_x) / nxy);
        g.lat = lat_min + (lat_max - lat_min) * ((j + 0.5 + jit_y) / nxy);
        g.h = opts.h_min + (opts.h_max - opts.h_min) * ((k + 0.5 + jit_z) / nz);
        PixelPoint a, b;
        try {
          a = rpc_ref.project(g);
          b = rpc_sec.project(g);
        } catch (const Error&) {
          ++skipped;
          continue;
        }
        const double ray = sample_bilinear(pair.inv_ref.y, a.x, a.y);
        const double rby = sample_bilinear(pair.inv_sec.y, b.x, b.y);
        if (!std::isfinite(ray) || !std::isfinite(rby)) {
          ++skipped;
          continue;
        }
        samples.push_back(std::abs(ray - rby));
      }
  return ErrorStats::from_samples(std::move(samples), skipped);
}

}  // namespace satstereo
