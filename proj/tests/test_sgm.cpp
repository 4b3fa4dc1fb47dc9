#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "satstereo/errors.hpp"
#include "satstereo/rng.hpp"
#include "satstereo/sgm.hpp"
#include "satstereo/synth.hpp"

using namespace satstereo;

namespace {

FloatRaster textured(int w, int h, uint64_t seed) {
  SceneSpec s;
  s.lat_min = 32.7000;
  s.lat_max = 32.7030;
  s.lon_min = -117.1010;
  s.lon_max = -117.0970;
  s.seed = seed;
  const SceneTexture tex(s);
  FloatRaster img(w, h);
  const double d = 0.5 / kMetersPerDegLat;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      img.at(x, y) = static_cast<float>(
          tex.sample(s.lat_min + y * d, s.lon_min + x * d, 0, 0.0));
  return img;
}

FloatRaster shifted_copy(const FloatRaster& src, int dx) {
  FloatRaster out(src.width(), src.height(), kInvalid);
  for (int y = 0; y < src.height(); ++y)
    for (int x = 0; x < src.width(); ++x) {
      const int sx = x - dx;
      if (sx >= 0 && sx < src.width()) out.at(x, y) = src.at(sx, y);
    }
  return out;
}

bool bit_equal(const FloatRaster& a, const FloatRaster& b) {
  return a.width() == b.width() && a.height() == b.height() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("census: constant image gives all-zero codes") {
  const FloatRaster img(32, 24, 99.f);
  const CensusRaster c = census_transform(img, 5);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 32; ++x) {
      if (c.valid.at(x, y)) CHECK(c.code.at(x, y) == 0);
      const bool border = x < 2 || y < 2 || x >= 30 || y >= 22;
      CHECK(static_cast<bool>(c.valid.at(x, y)) == !border);
    }
}

TEST_CASE("census: monotone horizontal ramp has one interior code") {
  FloatRaster img(24, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 24; ++x) img.at(x, y) = static_cast<float>(x);
  const CensusRaster c = census_transform(img, 3);
  const uint64_t expected = c.code.at(5, 5);
  CHECK(expected != 0);
  for (int y = 1; y < 15; ++y)
    for (int x = 1; x < 23; ++x) CHECK(c.code.at(x, y) == expected);
}

TEST_CASE("census: invariant to strictly monotone intensity remaps") {
  const FloatRaster img = textured(64, 48, 7);
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    // random strictly increasing map: a*x + b*x^3 + c*exp(x/300)
    const double a = rng.uniform(0.5, 3.0);
    const double b = rng.uniform(0.0, 1e-4);
    const double c = rng.uniform(0.0, 10.0);
    FloatRaster mapped(64, 48);
    for (int y = 0; y < 48; ++y)
      for (int x = 0; x < 64; ++x) {
        const double v = img.at(x, y);
        mapped.at(x, y) = static_cast<float>(a * v + b * v * v * v +
                                             c * std::exp(v / 300.0));
      }
    const CensusRaster c0 = census_transform(img, 5);
    const CensusRaster c1 = census_transform(mapped, 5);
    CHECK(c0.code == c1.code);
    CHECK(c0.valid == c1.valid);
  }
  CHECK_THROWS_AS(census_transform(img, 4), std::invalid_argument);
  CHECK_THROWS_AS(census_transform(img, 9), std::invalid_argument);
}

TEST_CASE("sgm: identical images match at zero disparity") {
  const FloatRaster img = textured(96, 72, 13);
  SgmParams p;
  p.d_min = -8;
  p.d_max = 8;
  const DisparityMap d = sgm_match(img, img, p);
  size_t valid = 0, zero = 0;
  for (int y = 0; y < d.height(); ++y)
    for (int x = 0; x < d.width(); ++x)
      if (d.is_valid(x, y)) {
        ++valid;
        // the equiangular refinement jitters an exact-zero vertex by up to
        // half a pixel; the integer winner is what the example pins down
        if (std::abs(d.disp.at(x, y)) <= 0.5) ++zero;
      }
  REQUIRE(valid > 3000);
  CHECK(static_cast<double>(zero) / valid >= 0.99);
}

TEST_CASE("sgm: known integer shift recovered") {
  const FloatRaster ref = textured(120, 80, 17);
  const FloatRaster sec = shifted_copy(ref, 5);
  SgmParams p;
  p.d_min = 0;
  p.d_max = 16;
  const DisparityMap d = sgm_match(ref, sec, p);
  size_t valid = 0, good = 0;
  for (int y = 4; y < d.height() - 4; ++y)
    for (int x = 8; x < d.width() - 12; ++x)
      if (d.is_valid(x, y)) {
        ++valid;
        if (std::abs(d.disp.at(x, y) - 5.0) <= 0.5) ++good;
      }
  REQUIRE(valid > 3000);
  CHECK(static_cast<double>(good) / valid >= 0.99);
}

TEST_CASE("sgm: output range containment and empty range error") {
  const FloatRaster ref = textured(60, 40, 19);
  const FloatRaster sec = shifted_copy(ref, 2);
  SgmParams p;
  p.d_min = -4;
  p.d_max = 6;
  const DisparityMap d = sgm_match(ref, sec, p);
  for (int y = 0; y < d.height(); ++y)
    for (int x = 0; x < d.width(); ++x)
      if (d.is_valid(x, y)) {
        CHECK(d.disp.at(x, y) >= p.d_min - 1.0);
        CHECK(d.disp.at(x, y) <= p.d_max + 1.0);
      }
  SgmParams bad = p;
  bad.d_min = bad.d_max = 3;
  CHECK_THROWS_AS(sgm_match(ref, sec, bad), EmptyDisparityRange);
}

TEST_CASE("sgm: deterministic and shift equivariant") {
  const FloatRaster ref = textured(200, 140, 23);
  const FloatRaster sec = shifted_copy(ref, 3);
  SgmParams p;
  p.d_min = -2;
  p.d_max = 8;
  const DisparityMap d1 = sgm_match(ref, sec, p);
  const DisparityMap d2 = sgm_match(ref, sec, p);
  CHECK(bit_equal(d1.disp, d2.disp));
  CHECK(d1.valid == d2.valid);

  // Translate both inputs by the same integer offset: the disparity map
  // translates with them over the interior (path aggregation is global along
  // each path, so border influence needs a wide margin to die out).
  const int off = 7;
  FloatRaster ref_t(200, 140, kInvalid), sec_t(200, 140, kInvalid);
  for (int y = 0; y < 140; ++y)
    for (int x = off; x < 200; ++x) {
      ref_t.at(x, y) = ref.at(x - off, y);
      sec_t.at(x, y) = sec.at(x - off, y);
    }
  const DisparityMap dt = sgm_match(ref_t, sec_t, p);
  size_t compared = 0, equal = 0;
  for (int y = 40; y < 100; ++y)
    for (int x = 48; x < 140; ++x) {
      if (!d1.is_valid(x, y) || !dt.is_valid(x + off, y)) continue;
      ++compared;
      if (std::abs(d1.disp.at(x, y) - dt.disp.at(x + off, y)) < 1e-6) ++equal;
    }
  REQUIRE(compared > 2000);
  CHECK(static_cast<double>(equal) / compared > 0.99);
}

TEST_CASE("sgm: full matcher invariant to monotone illumination remap") {
  const FloatRaster ref = textured(90, 60, 29);
  const FloatRaster sec = shifted_copy(ref, 4);
  FloatRaster ref_m(90, 60), sec_m(90, 60);
  for (int y = 0; y < 60; ++y)
    for (int x = 0; x < 90; ++x) {
      auto f = [](float v) {
        return static_cast<float>(2.2 * v + 1e-4 * v * v * v + 12.0);
      };
      ref_m.at(x, y) = f(ref.at(x, y));
      sec_m.at(x, y) = std::isfinite(sec.at(x, y)) ? f(sec.at(x, y)) : kInvalid;
    }
  SgmParams p;
  p.d_min = 0;
  p.d_max = 10;
  const DisparityMap d1 = sgm_match(ref, sec, p);
  const DisparityMap d2 = sgm_match(ref_m, sec_m, p);
  CHECK(bit_equal(d1.disp, d2.disp));
  CHECK(d1.valid == d2.valid);
}

TEST_CASE("lr_consistency: boundary inclusive, mutual constants valid") {
  const int w = 40, h = 20;
  DisparityMap left{FloatRaster(w, h, 3.f), MaskRaster(w, h, 1)};
  DisparityMap right{FloatRaster(w, h, 3.f), MaskRaster(w, h, 1)};
  const DisparityMap all = lr_consistency(left, right, 1.0);
  size_t valid = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w - 3; ++x)
      if (all.is_valid(x, y)) ++valid;
  CHECK(valid == static_cast<size_t>((w - 3) * h));

  // |difference| exactly at the tolerance is kept.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) right.disp.at(x, y) = 4.f;  // |3-4| = 1
  const DisparityMap kept = lr_consistency(left, right, 1.0);
  CHECK(kept.is_valid(10, 10));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) right.disp.at(x, y) = 4.01f;
  const DisparityMap dropped = lr_consistency(left, right, 1.0);
  CHECK(!dropped.is_valid(10, 10));
}

TEST_CASE("sgm: occlusion band behind a step matches the geometry") {
  // Foreground strip shifted by 8, background by 2: the background band of
  // width (8 - 2) behind the strip's left edge is occluded in the secondary
  // view and must fail the left-right check.
  const int w = 160, h = 60;
  const FloatRaster tex_bg = textured(w, h, 31);
  const FloatRaster tex_fg = textured(w, h, 37);
  const int fg_x0 = 80, fg_x1 = 110;
  const int d_bg = 2, d_fg = 8;

  FloatRaster ref(w, h), sec(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool fg = x >= fg_x0 && x < fg_x1;
      ref.at(x, y) = fg ? tex_fg.at(x, y) : tex_bg.at(x, y);
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      // secondary: foreground pixels land at x + d_fg, background at x + d_bg;
      // foreground wins where both land.
      const int xb = x - d_bg;
      float v = (xb >= 0 && xb < w) ? tex_bg.at(xb, y) : kInvalid;
      const int xf = x - d_fg;
      if (xf >= fg_x0 && xf < fg_x1) v = tex_fg.at(xf, y);
      sec.at(x, y) = v;
    }

  SgmParams p;
  p.d_min = 0;
  p.d_max = 12;
  p.subpixel = false;
  const DisparityMap d = sgm_match(ref, sec, p);

  // Occluded background: x + d_bg lands under the shifted foreground
  // [fg_x0 + d_fg, fg_x1 + d_fg), i.e. x in [fg_x1, fg_x1 + d_fg - d_bg).
  // The matcher hallucinates inside the band, so require at least half of it
  // flagged; the exact-width contract is tested on geometric maps below.
  int occluded_cols = 0;
  for (int x = fg_x1 - 2; x < fg_x1 + (d_fg - d_bg) + 2; ++x) {
    int invalid = 0;
    for (int y = 8; y < h - 8; ++y)
      if (!d.is_valid(x, y)) ++invalid;
    if (invalid > (h - 16) / 2) ++occluded_cols;
  }
  CHECK(occluded_cols >= (d_fg - d_bg) / 2);
  CHECK(occluded_cols <= d_fg - d_bg + 1);
}

TEST_CASE("lr_consistency: analytic occlusion band is flagged exactly") {
  // Geometric maps of the same step scene: background at 2, foreground strip
  // at 8; occluded background columns [fg_x1, fg_x1 + 6) carry the background
  // value, which the right map contradicts.
  const int w = 160, h = 20;
  const int fg_x0 = 80, fg_x1 = 110;
  const int d_bg = 2, d_fg = 8;
  DisparityMap left{FloatRaster(w, h), MaskRaster(w, h, 1)};
  DisparityMap right{FloatRaster(w, h), MaskRaster(w, h, 1)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      left.disp.at(x, y) =
          (x >= fg_x0 && x < fg_x1) ? static_cast<float>(d_fg)
                                    : static_cast<float>(d_bg);
      const bool fg_sec = x >= fg_x0 + d_fg && x < fg_x1 + d_fg;
      right.disp.at(x, y) =
          fg_sec ? static_cast<float>(d_fg) : static_cast<float>(d_bg);
    }
  const DisparityMap checked = lr_consistency(left, right, 1.0);
  int band = 0;
  for (int x = fg_x1 - 3; x < fg_x1 + (d_fg - d_bg) + 3; ++x)
    if (!checked.is_valid(x, 10)) ++band;
  CHECK(band >= d_fg - d_bg - 1);
  CHECK(band <= d_fg - d_bg + 1);
  // Visible pixels on both sides of the band survive.
  CHECK(checked.is_valid(fg_x1 - 5, 10));
  CHECK(checked.is_valid(fg_x1 + (d_fg - d_bg) + 4, 10));
}

TEST_CASE("sgm: generator box scene against the analytic oracle") {
  SceneSpec s;
  s.lat_min = 32.7000;
  s.lat_max = 32.7012;
  s.lon_min = -117.1010;
  s.lon_max = -117.0994;
  s.terrain.base_h = 30.0;
  s.cell_m = 0.5;
  s.seed = 41;
  s.boxes.push_back({32.70030, 32.70090, -117.10080, -117.10020, 12.0});
  ViewSpec va;
  va.id = "a";
  va.azimuth_deg = 95;
  va.elevation_deg = 78;
  va.curvature_px = 0.1;
  va.time = "2016-03-01T10:30:00Z";
  ViewSpec vb = va;
  vb.id = "b";
  vb.azimuth_deg = 265;
  vb.elevation_deg = 76;
  s.views = {va, vb};

  const SyntheticScene scene = build_scene(s, 2);
  const PixelWindow tile{0, 0, scene.views[0].camera.width,
                         scene.views[0].camera.height};
  const TileRect tr = rectify_tile_pair(scene.views[0].rpc, scene.views[1].rpc,
                                        tile, 30.0);
  const RectifiedPair rect = stitch_chip_maps(
      {tr}, scene.views[0].camera.width, scene.views[0].camera.height, {},
      scene.views[1].camera.width, scene.views[1].camera.height);

  const FloatRaster rect_ref = warp(scene.views[0].image, rect.fwd_ref);
  const FloatRaster rect_sec = warp(scene.views[1].image, rect.fwd_sec);
  const DisparityMap oracle = analytic_disparity(scene.views[0].camera,
                                                 scene.views[1].camera, rect, s, 2);

  // Search range from the oracle's extremes.
  double lo = 1e300, hi = -1e300;
  for (int y = 0; y < oracle.height(); ++y)
    for (int x = 0; x < oracle.width(); ++x)
      if (oracle.is_valid(x, y)) {
        lo = std::min(lo, static_cast<double>(oracle.disp.at(x, y)));
        hi = std::max(hi, static_cast<double>(oracle.disp.at(x, y)));
      }
  SgmParams p;
  p.d_min = static_cast<int>(std::floor(lo)) - 4;
  p.d_max = static_cast<int>(std::ceil(hi)) + 4;
  const DisparityMap est = sgm_match(rect_ref, rect_sec, p);

  const MaskRaster bmask =
      project_building_mask(scene.building_mask_geo, scene.field.grid,
                            scene.views[0].rpc, rect.inv_ref, rect.rect_width,
                            rect.rect_height, PreparedField(scene.field));
  size_t masked = 0, bad = 0;
  for (int y = 0; y < est.height(); ++y)
    for (int x = 0; x < est.width(); ++x) {
      if (!bmask.at(x, y) || !oracle.is_valid(x, y)) continue;
      ++masked;
      if (!est.is_valid(x, y) ||
          std::abs(est.disp.at(x, y) - oracle.disp.at(x, y)) > 1.0)
        ++bad;
    }
  REQUIRE(masked > 2000);
  CHECK(static_cast<double>(bad) / masked < 0.10);
}
