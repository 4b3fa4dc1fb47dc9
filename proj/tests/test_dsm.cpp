#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "satstereo/dsm.hpp"
#include "satstereo/errors.hpp"
#include "satstereo/rng.hpp"
#include "satstereo/synth.hpp"

using namespace satstereo;

namespace {

SceneSpec box_scene() {
  SceneSpec s;
  s.lat_min = 32.7000;
  s.lat_max = 32.7015;
  s.lon_min = -117.1010;
  s.lon_max = -117.0990;
  s.terrain.kind = "rolling";
  s.terrain.base_h = 30.0;
  s.terrain.amp = 3.0;
  s.terrain.wavelength_m = 60.0;
  s.cell_m = 0.5;
  s.seed = 9;
  s.boxes.push_back({32.70040, 32.70070, -117.10060, -117.10030, 15.0});
  s.boxes.push_back({32.70090, 32.70115, -117.10000, -117.09960, 8.0});
  return s;
}

PushbroomCamera make_cam(const SceneSpec& s, double az, double el, uint64_t seed) {
  ViewSpec v;
  v.azimuth_deg = az;
  v.elevation_deg = el;
  v.curvature_px = 0.1;
  v.time = "2016-03-01T10:30:00Z";
  return make_pushbroom_camera(s, v, seed);
}

}  // namespace

TEST_CASE("triangulate: exact correspondence recovers the world point") {
  const SceneSpec s = box_scene();
  const GeoBox vol = scene_volume(s);
  const RpcModel rpc_a = fit_rpc(make_cam(s, 85, 74, 3), vol);
  const RpcModel rpc_b = fit_rpc(make_cam(s, 255, 71, 5), vol);
  const PixelWindow tile{0, 0, 300, 300};
  const TileRect tr = rectify_tile_pair(rpc_a, rpc_b, tile, 32.0);

  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const GeoPoint w{rng.uniform(s.lat_min, s.lat_max),
                     rng.uniform(s.lon_min, s.lon_max), rng.uniform(20, 45)};
    const PixelPoint u = tr.cam_ref.project(w);
    const PixelPoint v = tr.cam_sec.project(w);
    const PixelPoint p_rect = apply_h(tr.h_ref, u);
    const PixelPoint q_rect = apply_h(tr.h_sec, v);

    DisparityMap one{FloatRaster(1, 1), MaskRaster(1, 1, 1)};
    one.disp.at(0, 0) = static_cast<float>(q_rect.x - p_rect.x);
    TilePairGeometry geom{tr.cam_ref, tr.cam_sec, tr.h_ref, tr.h_sec,
                          p_rect.x, p_rect.y};
    const PointCloud cloud = triangulate(one, geom);
    REQUIRE(cloud.points.size() == 1);
    // the row misalignment of the rectified pair is the only inexactness
    CHECK(std::abs(cloud.points[0].p.lat - w.lat) < 1e-6);
    CHECK(std::abs(cloud.points[0].p.lon - w.lon) < 1e-6);
    CHECK(std::abs(cloud.points[0].p.h - w.h) < 0.05);
    CHECK(cloud.points[0].residual_px <= 1.0);
  }
}

TEST_CASE("triangulate: generator scene heights within 0.2 m for 95%") {
  SceneSpec s = box_scene();
  ViewSpec va;
  va.id = "a";
  va.azimuth_deg = 85;
  va.elevation_deg = 76;
  va.curvature_px = 0.1;
  va.time = "2016-03-01T10:30:00Z";
  ViewSpec vb = va;
  vb.id = "b";
  vb.azimuth_deg = 255;
  vb.elevation_deg = 73;
  s.views = {va, vb};
  const SyntheticScene scene = build_scene(s, 2);
  const auto& aa = scene.views[0];
  const auto& ab = scene.views[1];

  // Tile-wise, like the production path: the affine approximation is a
  // per-tile contract and degrades over chip-scale windows.
  TileLayout layout{220, 48};
  PointCloud cloud;
  for (const auto& w : layout.tiles(aa.camera.width, aa.camera.height)) {
    const TileRect tr = rectify_tile_pair(aa.rpc, ab.rpc, w, 32.0);
    const RectifiedPair rect = stitch_chip_maps({tr}, aa.camera.width,
                                                aa.camera.height, {},
                                                ab.camera.width, ab.camera.height);
    const DisparityMap oracle =
        analytic_disparity(aa.camera, ab.camera, rect, s, 2);
    TilePairGeometry geom{rect.tiles[0].cam_ref, rect.tiles[0].cam_sec,
                          rect.tiles[0].h_ref, rect.tiles[0].h_sec, 0, 0};
    const PointCloud part = triangulate(oracle, geom);
    cloud.points.insert(cloud.points.end(), part.points.begin(),
                        part.points.end());
  }
  REQUIRE(cloud.points.size() > 20000);
  size_t ok = 0;
  for (const auto& cp : cloud.points) {
    const double truth = surface_height(s, cp.p.lat, cp.p.lon);
    if (std::abs(cp.p.h - truth) <= 0.2) ++ok;
  }
  CHECK(static_cast<double>(ok) / cloud.points.size() >= 0.95);
}

TEST_CASE("triangulate: near-parallel pair is rejected") {
  const SceneSpec s = box_scene();
  const GeoBox vol = scene_volume(s);
  const RpcModel rpc = fit_rpc(make_cam(s, 85, 74, 11), vol);
  const GeoPoint x0{0.5 * (s.lat_min + s.lat_max), 0.5 * (s.lon_min + s.lon_max),
                    32.0};
  const AffineCamera cam = rpc.affine_approximate(x0);
  DisparityMap one{FloatRaster(1, 1, 0.f), MaskRaster(1, 1, 1)};
  const PixelPoint u = cam.project(x0);
  TilePairGeometry geom{cam, cam, Eigen::Matrix3d::Identity(),
                        Eigen::Matrix3d::Identity(), u.x, u.y};
  CHECK_THROWS_AS(triangulate(one, geom), IllConditionedPair);
}

TEST_CASE("rasterize_dsm: point placement and surface semantics") {
  const GridSpec grid = GridSpec::make(32.7000, 32.7005, -117.1010, -117.1005, 1.0);
  PointCloud cloud;
  // one point per cell
  cloud.points.push_back({{grid.lat_at(3), grid.lon_at(4), 17.0}, 0.0});
  cloud.points.push_back({{grid.lat_at(10), grid.lon_at(2), 23.5}, 0.0});
  // ground + roof in one cell: the roof stays
  cloud.points.push_back({{grid.lat_at(7), grid.lon_at(7), 5.0}, 0.0});
  cloud.points.push_back({{grid.lat_at(7), grid.lon_at(7), 25.0}, 0.0});
  const Dsm dsm = rasterize_dsm(cloud, grid);
  CHECK(dsm.heights.at(4, 3) == 17.0f);
  CHECK(dsm.heights.at(2, 10) == 23.5f);
  CHECK(dsm.heights.at(7, 7) == 25.0f);
  CHECK(!std::isfinite(dsm.heights.at(0, 0)));

  // dense flat cloud covers cells exactly
  PointCloud flat;
  for (int iy = 0; iy < grid.height; ++iy)
    for (int ix = 0; ix < grid.width; ++ix)
      flat.points.push_back({{grid.lat_at(iy), grid.lon_at(ix), 10.0}, 0.0});
  const Dsm flat_dsm = rasterize_dsm(flat, grid);
  for (int iy = 0; iy < grid.height; ++iy)
    for (int ix = 0; ix < grid.width; ++ix)
      CHECK(flat_dsm.heights.at(ix, iy) == 10.0f);

  CHECK_THROWS_AS(rasterize_dsm(PointCloud{}, grid), std::invalid_argument);
}

TEST_CASE("fuse_median: identity, robustness, invalid handling") {
  const GridSpec grid = GridSpec::make(32.7000, 32.7004, -117.1010, -117.1006, 1.0);
  Rng rng(13);
  Dsm base{grid, FloatRaster(grid.width, grid.height)};
  for (int y = 0; y < grid.height; ++y)
    for (int x = 0; x < grid.width; ++x)
      base.heights.at(x, y) = static_cast<float>(rng.uniform(10, 40));

  // identical inputs -> identical output
  const Dsm same = fuse_median({base, base, base});
  CHECK(same.heights == base.heights);

  // single input passes through
  const Dsm single = fuse_median({base});
  CHECK(single.heights == base.heights);

  // 5 inputs, 2 corrupted by +50 at one cell -> truth survives
  std::vector<Dsm> five(5, base);
  five[1].heights.at(3, 3) += 50.f;
  five[4].heights.at(3, 3) += 50.f;
  const Dsm fused = fuse_median(five);
  CHECK(fused.heights.at(3, 3) == base.heights.at(3, 3));

  // all invalid at a cell -> invalid
  for (auto& d : five) d.heights.at(1, 2) = kInvalid;
  const Dsm holed = fuse_median(five);
  CHECK(!std::isfinite(holed.heights.at(1, 2)));

  // permutation invariance, bit exact
  std::vector<Dsm> perm = {five[4], five[2], five[0], five[3], five[1]};
  const Dsm f1 = fuse_median(five);
  const Dsm f2 = fuse_median(perm);
  CHECK(std::memcmp(f1.heights.data(), f2.heights.data(),
                    f1.heights.size() * sizeof(float)) == 0);

  // grid mismatch rejected
  Dsm other{GridSpec::make(32.7000, 32.7004, -117.1010, -117.1006, 2.0),
            FloatRaster(0, 0)};
  other.heights = FloatRaster(other.grid.width, other.grid.height, 1.f);
  CHECK_THROWS_AS(fuse_median({base, other}), GridMismatch);
}

TEST_CASE("apply_water_mask") {
  const GridSpec grid = GridSpec::make(32.7000, 32.7003, -117.1010, -117.1007, 1.0);
  Dsm dsm{grid, FloatRaster(grid.width, grid.height, 12.f)};
  MaskRaster none(grid.width, grid.height, 0);
  CHECK(apply_water_mask(dsm, none).heights == dsm.heights);

  MaskRaster all(grid.width, grid.height, 1);
  const Dsm drowned = apply_water_mask(dsm, all);
  for (int y = 0; y < grid.height; ++y)
    for (int x = 0; x < grid.width; ++x)
      CHECK(!std::isfinite(drowned.heights.at(x, y)));

  MaskRaster checker(grid.width, grid.height, 0);
  for (int y = 0; y < grid.height; ++y)
    for (int x = 0; x < grid.width; ++x) checker.at(x, y) = (x + y) % 2;
  const Dsm checked = apply_water_mask(dsm, checker);
  for (int y = 0; y < grid.height; ++y)
    for (int x = 0; x < grid.width; ++x)
      CHECK(std::isfinite(checked.heights.at(x, y)) == ((x + y) % 2 == 0));

  MaskRaster wrong(grid.width + 1, grid.height, 0);
  CHECK_THROWS_AS(apply_water_mask(dsm, wrong), GridMismatch);
}

namespace {

Dsm structured_truth() {
  const SceneSpec s = box_scene();
  const HeightField hf = build_height_field(s);
  return hf;
}

}  // namespace

TEST_CASE("align_lidar: identity, injected shift, pure vertical, antisymmetry") {
  const Dsm truth = structured_truth();

  // lidar == fused -> zero within one fine step
  const AlignSearch search;
  const double fine = fine_step_m(search);
  const AlignmentOffset zero = align_lidar(truth, truth, search);
  CHECK(std::abs(zero.dx_m) <= fine + 1e-12);
  CHECK(std::abs(zero.dy_m) <= fine + 1e-12);
  CHECK(std::abs(zero.dz_m) < 0.05);

  // injected (+3.0, -2.0, +1.5)
  const AlignmentOffset v{3.0, -2.0, 1.5};
  const Dsm lidar = shift_height_grid(truth, {-v.dx_m, -v.dy_m, -v.dz_m});
  const AlignmentOffset rec = align_lidar(lidar, truth, search);
  CHECK(std::abs(rec.dx_m - v.dx_m) <= 0.5 * fine + 1e-12);
  CHECK(std::abs(rec.dy_m - v.dy_m) <= 0.5 * fine + 1e-12);
  CHECK(std::abs(rec.dz_m - v.dz_m) <= 0.1);

  // applying the inverse restores the grid
  const Dsm aligned = shift_height_grid(lidar, rec);
  double worst = 0;
  for (int y = 8; y < truth.grid.height - 8; ++y)
    for (int x = 8; x < truth.grid.width - 8; ++x) {
      const float a = aligned.heights.at(x, y);
      const float b = truth.heights.at(x, y);
      if (std::isfinite(a) && std::isfinite(b))
        worst = std::max<double>(worst, std::abs(a - b));
    }
  CHECK(worst < 0.75);  // bilinear resampling of the box edges dominates

  // pure vertical offset
  Dsm up = truth;
  for (size_t i = 0; i < up.heights.size(); ++i) up.heights.data()[i] += 7.f;
  const AlignmentOffset vert = align_lidar(up, truth, search);
  CHECK(vert.dx_m == 0.0);
  CHECK(vert.dy_m == 0.0);
  CHECK(std::abs(vert.dz_m - 7.0) <= 0.1);

  // antisymmetry within the discretization
  const AlignmentOffset fwd = align_lidar(lidar, truth, search);
  const AlignmentOffset bwd = align_lidar(truth, lidar, search);
  CHECK(std::abs(fwd.dx_m + bwd.dx_m) <= fine + 1e-12);
  CHECK(std::abs(fwd.dy_m + bwd.dy_m) <= fine + 1e-12);
  CHECK(std::abs(fwd.dz_m + bwd.dz_m) <= 0.2);
}

TEST_CASE("align_lidar: insufficient overlap is rejected") {
  const Dsm truth = structured_truth();
  Dsm sparse = truth;
  for (int y = 0; y < sparse.grid.height; ++y)
    for (int x = 0; x < sparse.grid.width; ++x)
      if (x > sparse.grid.width / 8) sparse.heights.at(x, y) = kInvalid;
  Dsm empty_fused = truth;
  for (int y = 0; y < empty_fused.grid.height; ++y)
    for (int x = 0; x < empty_fused.grid.width; ++x)
      if (x <= sparse.grid.width / 8) empty_fused.heights.at(x, y) = kInvalid;
  CHECK_THROWS_AS(align_lidar(sparse, empty_fused, {}), InsufficientOverlap);
}
