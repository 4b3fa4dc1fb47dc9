#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "satstereo/errors.hpp"
#include "satstereo/rng.hpp"
#include "satstereo/synth.hpp"
#include "satstereo/tie_points.hpp"

using namespace satstereo;

namespace {

SceneSpec test_scene() {
  SceneSpec s;
  s.lat_min = 32.7000;
  s.lat_max = 32.7018;
  s.lon_min = -117.1010;
  s.lon_max = -117.0988;
  s.terrain.base_h = 30.0;
  s.cell_m = 0.5;
  s.seed = 5;
  return s;
}

PushbroomCamera make_cam(double az, double el, uint64_t seed, double curv = 0.0) {
  ViewSpec v;
  v.azimuth_deg = az;
  v.elevation_deg = el;
  v.curvature_px = curv;
  v.time = "2016-03-01T10:30:00Z";
  return make_pushbroom_camera(test_scene(), v, seed);
}

FloatRaster noise_image(int w, int h, uint64_t seed) {
  const SceneSpec s = test_scene();
  SceneSpec seeded = s;
  seeded.seed = seed;
  const SceneTexture tex(seeded);
  FloatRaster img(w, h, 0.f);
  const double d = 0.5 / kMetersPerDegLat;  // ~0.5 m per pixel
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      img.at(x, y) = static_cast<float>(
          tex.sample(s.lat_min + y * d, s.lon_min + x * d, 0, 0.0));
  return img;
}

std::vector<Correspondence> camera_corrs(const PushbroomCamera& a,
                                         const PushbroomCamera& b, int n,
                                         uint64_t seed) {
  const SceneSpec s = test_scene();
  Rng rng(seed);
  std::vector<Correspondence> out;
  for (int i = 0; i < n; ++i) {
    const GeoPoint g{rng.uniform(s.lat_min, s.lat_max),
                     rng.uniform(s.lon_min, s.lon_max), rng.uniform(15, 45)};
    out.push_back({a.project(g), b.project(g), 1.0});
  }
  return out;
}

}  // namespace

TEST_CASE("detect_and_match: identical images self-match at zero distance") {
  const FloatRaster img = noise_image(220, 200, 3);
  const auto corrs = detect_and_match(img, img);
  REQUIRE(corrs.size() >= 8);
  for (const auto& c : corrs) {
    CHECK(c.a.x == c.b.x);
    CHECK(c.a.y == c.b.y);
    CHECK(c.score == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("detect_and_match: integer translate recovered") {
  const FloatRaster big = noise_image(260, 240, 7);
  // img_b(x, y) = img_a(x + 7, y + 3): crop two aligned windows.
  const int w = 220, h = 200;
  FloatRaster img_a(w, h), img_b(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img_a.at(x, y) = big.at(x + 7, y + 3);
      img_b.at(x, y) = big.at(x, y);
    }
  // A feature at big(X, Y) sits at (X-7, Y-3) in img_a and (X, Y) in img_b,
  // so matches are displaced by (+7, +3).
  const auto corrs = detect_and_match(img_a, img_b);
  REQUIRE(corrs.size() >= 8);
  int good = 0;
  for (const auto& c : corrs)
    if (std::abs(c.b.x - c.a.x - 7.0) <= 0.5 && std::abs(c.b.y - c.a.y - 3.0) <= 0.5)
      ++good;
  CHECK(static_cast<double>(good) / corrs.size() >= 0.9);
}

TEST_CASE("detect_and_match: textureless image has no corners") {
  const FloatRaster flat(160, 160, 42.f);
  CHECK_THROWS_AS(detect_and_match(flat, flat), TooFewMatches);
}

TEST_CASE("ransac: exact affine-pair correspondences are all inliers") {
  const PushbroomCamera cam_a = make_cam(80, 72, 11);
  const PushbroomCamera cam_b = make_cam(250, 70, 13);
  const auto corrs = camera_corrs(cam_a, cam_b, 120, 17);
  const auto res = estimate_fundamental_ransac(corrs, 0.5, 200, 99);
  CHECK(res.inlier_count == static_cast<int>(corrs.size()));

  // Algebraic residual on normalized coordinates with the unit-norm F.
  for (const auto& c : corrs) {
    const Eigen::Vector3d xa(c.a.x, c.a.y, 1.0);
    const Eigen::Vector3d xb(c.b.x, c.b.y, 1.0);
    const double alg = std::abs(xb.dot(res.f * xa)) / (xa.norm() * xb.norm());
    CHECK(alg < 1e-8);
  }
  // Rank-2 and unit Frobenius norm are enforced.
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(res.f);
  CHECK(svd.singularValues()(2) < 1e-12);
  CHECK(res.f.norm() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ransac: known outlier labels recovered exactly") {
  const PushbroomCamera cam_a = make_cam(60, 75, 19);
  const PushbroomCamera cam_b = make_cam(210, 68, 23);
  auto corrs = camera_corrs(cam_a, cam_b, 100, 29);
  const Eigen::Matrix3d f_true = eight_point(corrs);

  Rng rng(31);
  std::vector<uint8_t> labels(corrs.size(), 1);
  int outliers = 0;
  for (size_t i = 0; i < corrs.size() && outliers < 30; i += 3) {
    // Perturb until safely off the true epipolar line.
    for (int attempt = 0; attempt < 50; ++attempt) {
      Correspondence c = corrs[i];
      c.b.x += rng.uniform(-20, 20);
      c.b.y += rng.uniform(3, 20) * (rng.next_below(2) ? 1 : -1);
      if (epipolar_distance(f_true, c) > 2.0) {
        corrs[i] = c;
        labels[i] = 0;
        ++outliers;
        break;
      }
    }
  }
  REQUIRE(outliers == 30);
  const auto res = estimate_fundamental_ransac(corrs, 0.5, 500, 7);
  for (size_t i = 0; i < corrs.size(); ++i) CHECK(res.inlier_mask[i] == labels[i]);
}

TEST_CASE("ransac: collinear points are degenerate") {
  std::vector<Correspondence> corrs;
  for (int i = 0; i < 10; ++i)
    corrs.push_back({{10.0 + 3.0 * i, 20.0 + 2.0 * i},
                     {15.0 + 3.0 * i, 19.0 + 2.0 * i},
                     1.0});
  CHECK_THROWS_AS(estimate_fundamental_ransac(corrs, 1.0, 50, 1),
                  DegenerateConfiguration);
}

TEST_CASE("ransac: deterministic given the seed") {
  const PushbroomCamera cam_a = make_cam(100, 74, 37);
  const PushbroomCamera cam_b = make_cam(280, 71, 41);
  auto corrs = camera_corrs(cam_a, cam_b, 60, 43);
  Rng rng(47);
  for (size_t i = 0; i < corrs.size(); i += 5) corrs[i].b.y += rng.uniform(4, 9);
  const auto r1 = estimate_fundamental_ransac(corrs, 0.5, 300, 12345);
  const auto r2 = estimate_fundamental_ransac(corrs, 0.5, 300, 12345);
  CHECK(r1.inlier_mask == r2.inlier_mask);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(r1.f(i, j) == r2.f(i, j));
}

TEST_CASE("build_tracks: transitivity and empty input") {
  CHECK(build_tracks({}).empty());

  std::vector<PairMatches> pm;
  pm.push_back({0, 1, {{{10, 10}, {12, 11}, 1.0}}});
  pm.push_back({1, 2, {{{12, 11}, {14, 12}, 1.0}}});
  const auto tracks = build_tracks(pm);
  REQUIRE(tracks.size() == 1);
  CHECK(tracks[0].observations.size() == 3);
  CHECK(tracks[0].observations[0].image_id == 0);
  CHECK(tracks[0].observations[2].image_id == 2);
}

TEST_CASE("build_tracks: conflicting merge is skipped conservatively") {
  std::vector<PairMatches> pm;
  pm.push_back({0, 1, {{{10, 10}, {12, 11}, 1.0}}});
  // Claims another image-1 pixel matches the same image-0 point: accepting
  // both would put two image-1 pixels into one track.
  pm.push_back({0, 1, {{{10, 10}, {99, 99}, 1.0}}});
  const auto tracks = build_tracks(pm);
  REQUIRE(tracks.size() == 1);
  CHECK(tracks[0].observations.size() == 2);
}

TEST_CASE("build_tracks: synthetic 4-image set partitions like the generator") {
  const PushbroomCamera cams[4] = {make_cam(45, 75, 51), make_cam(135, 72, 53),
                                   make_cam(225, 70, 57), make_cam(315, 74, 59)};
  const SceneSpec s = test_scene();
  Rng rng(61);
  std::vector<GeoPoint> world;
  for (int i = 0; i < 25; ++i)
    world.push_back({rng.uniform(s.lat_min, s.lat_max),
                     rng.uniform(s.lon_min, s.lon_max), rng.uniform(20, 40)});

  std::vector<PairMatches> pm;
  for (int a = 0; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b) {
      PairMatches m{a, b, {}};
      for (const auto& w : world)
        m.matches.push_back({cams[a].project(w), cams[b].project(w), 1.0});
      pm.push_back(std::move(m));
    }
  const auto tracks = build_tracks(pm);
  REQUIRE(tracks.size() == world.size());
  for (const auto& t : tracks) CHECK(t.observations.size() == 4);
}

namespace {

struct BaFixture {
  std::vector<RpcModel> rpcs;
  std::vector<Track> tracks;
  std::vector<Eigen::Vector2d> injected;
};

BaFixture make_ba_fixture(const std::vector<Eigen::Vector2d>& injected,
                          double noise_sigma, uint64_t seed) {
  const SceneSpec s = test_scene();
  const GeoBox vol = scene_volume(s);
  BaFixture f;
  f.injected = injected;
  const double azs[3] = {40, 160, 280};
  const double els[3] = {74, 70, 72};
  for (int i = 0; i < 3; ++i)
    f.rpcs.push_back(fit_rpc(make_cam(azs[i], els[i], 100 + i, 0.35), vol));

  Rng rng(seed);
  for (int k = 0; k < 40; ++k) {
    const GeoPoint w{rng.uniform(s.lat_min, s.lat_max),
                     rng.uniform(s.lon_min, s.lon_max), rng.uniform(15, 45)};
    Track t;
    bool ok = true;
    for (int i = 0; i < 3 && ok; ++i) {
      try {
        PixelPoint p = f.rpcs[static_cast<size_t>(i)].project(w);
        p.x += injected[static_cast<size_t>(i)].x() + noise_sigma * rng.next_gaussian();
        p.y += injected[static_cast<size_t>(i)].y() + noise_sigma * rng.next_gaussian();
        t.observations.push_back({i, p});
      } catch (const Error&) {
        ok = false;
      }
    }
    if (ok) f.tracks.push_back(std::move(t));
  }
  return f;
}

}  // namespace

TEST_CASE("bundle: zero bias, noise-free data stays at the optimum") {
  BaFixture f = make_ba_fixture({Eigen::Vector2d(0, 0), Eigen::Vector2d(0, 0),
                                 Eigen::Vector2d(0, 0)},
                                0.0, 71);
  const BiasSolution sol = bundle_adjust_bias(f.rpcs, f.tracks);
  CHECK(sol.rmse_px < 1e-6);
  for (const auto& b : sol.bias) CHECK(b.norm() < 1e-6);
  CHECK(sol.converged);
}

TEST_CASE("bundle: injected biases recovered to 0.05 px, gauge fixed") {
  const std::vector<Eigen::Vector2d> injected = {
      Eigen::Vector2d(0, 0), Eigen::Vector2d(5.0, -3.0), Eigen::Vector2d(-2.0, 4.0)};
  BaFixture f = make_ba_fixture(injected, 0.0, 73);
  const BiasSolution sol = bundle_adjust_bias(f.rpcs, f.tracks);
  CHECK(sol.bias[0].x() == 0.0);
  CHECK(sol.bias[0].y() == 0.0);
  for (int i = 1; i < 3; ++i) {
    const Eigen::Vector2d rel = injected[static_cast<size_t>(i)] - injected[0];
    CHECK((sol.bias[static_cast<size_t>(i)] - rel).norm() < 0.05);
  }
  CHECK(sol.rmse_px < 0.01);
  // Accepted iterations never increase the error.
  for (size_t i = 1; i < sol.rmse_history.size(); ++i)
    CHECK(sol.rmse_history[i] <= sol.rmse_history[i - 1] + 1e-12);
}

namespace {

// Identifiable recovery error: a common world translation along the gauge
// camera's view ray trades exactly against the other images' biases, so the
// recovery is compared modulo that one-parameter family.
double quotient_recovery_error(const BaFixture& f,
                               const std::vector<Eigen::Vector2d>& recovered) {
  const SceneSpec s = test_scene();
  const GeoPoint center{0.5 * (s.lat_min + s.lat_max),
                        0.5 * (s.lon_min + s.lon_max), 30.0};
  std::vector<Eigen::Matrix<double, 2, 3>> a;
  for (const auto& rpc : f.rpcs) a.push_back(rpc.jacobian(center));
  const Eigen::Vector3d ray =
      a[0].row(0).transpose().cross(a[0].row(1).transpose()).normalized();
  double num = 0, den = 0;
  for (size_t i = 1; i < f.rpcs.size(); ++i) {
    const Eigen::Vector2d u = recovered[i] - f.injected[i];
    const Eigen::Vector2d v = a[i] * ray;
    num += u.dot(v);
    den += v.squaredNorm();
  }
  const double t = den > 0 ? -num / den : 0.0;
  double sse = 0;
  for (size_t i = 1; i < f.rpcs.size(); ++i)
    sse += (recovered[i] - f.injected[i] + t * (a[i] * ray)).squaredNorm();
  return std::sqrt(sse / static_cast<double>(f.rpcs.size() - 1));
}

}  // namespace

TEST_CASE("bundle: gaussian noise, mean behavior over 20 seeds") {
  const std::vector<Eigen::Vector2d> injected = {
      Eigen::Vector2d(0, 0), Eigen::Vector2d(5.0, -3.0), Eigen::Vector2d(-2.0, 4.0)};
  const std::vector<Eigen::Vector2d> zero = {
      Eigen::Vector2d(0, 0), Eigen::Vector2d(0, 0), Eigen::Vector2d(0, 0)};
  double rmse_sum = 0;
  double reduction_sum = 0;
  double quotient_sum = 0;
  const int n_seeds = 20;
  for (int seed = 0; seed < n_seeds; ++seed) {
    BaFixture f = make_ba_fixture(injected, 0.5, 1000 + seed);
    const BiasSolution sol = bundle_adjust_bias(f.rpcs, f.tracks);
    rmse_sum += sol.rmse_px;
    quotient_sum += quotient_recovery_error(f, sol.bias);

    // Reduction of the bias-attributable reprojection error, against a
    // noise-only run with the same noise realization.
    BaFixture f0 = make_ba_fixture(zero, 0.5, 1000 + seed);
    const BiasSolution sol0 = bundle_adjust_bias(f0.rpcs, f0.tracks);
    auto component = [](double total, double floor_rmse) {
      return std::sqrt(std::max(total * total - floor_rmse * floor_rmse, 0.0));
    };
    const double before =
        component(sol.rmse_history.front(), sol0.rmse_history.front());
    const double after = component(sol.rmse_px, sol0.rmse_px);
    if (before > 0) reduction_sum += 1.0 - after / before;
  }
  CHECK(rmse_sum / n_seeds <= 0.7);
  CHECK(reduction_sum / n_seeds >= 0.9);
  CHECK(quotient_sum / n_seeds <= 0.2);
}

TEST_CASE("bundle: recovery invariant under the observational gauge family") {
  // Shifting every image's bias by the image of one common world translation
  // changes nothing observable (the worlds absorb it); recovered biases must
  // not move. A plain constant shift is NOT in this family: its camera-0
  // part is forced through the world points and leaks into the other images
  // by the difference of the view geometries.
  std::vector<Eigen::Vector2d> base = {Eigen::Vector2d(0, 0),
                                       Eigen::Vector2d(3.0, 1.0),
                                       Eigen::Vector2d(-1.0, 2.0)};
  BaFixture f1 = make_ba_fixture(base, 0.0, 77);

  const SceneSpec s = test_scene();
  const GeoPoint center{0.5 * (s.lat_min + s.lat_max),
                        0.5 * (s.lon_min + s.lon_max), 30.0};
  const Eigen::Vector3d delta(4e-6, -3e-6, 0.8);  // ~0.5 m horizontal shift
  std::vector<Eigen::Vector2d> shifted = base;
  for (size_t i = 0; i < f1.rpcs.size(); ++i)
    shifted[i] += f1.rpcs[i].jacobian(center) * delta;

  BaFixture f2 = make_ba_fixture(shifted, 0.0, 77);
  const BiasSolution s1 = bundle_adjust_bias(f1.rpcs, f1.tracks);
  const BiasSolution s2 = bundle_adjust_bias(f2.rpcs, f2.tracks);
  // The two runs see observationally equivalent data, so the recovered
  // configurations agree modulo the weakly-determined valley direction.
  BaFixture cmp = f1;
  cmp.injected = s2.bias;
  CHECK(quotient_recovery_error(cmp, s1.bias) < 0.02);
}

TEST_CASE("bundle: underconstrained track is rejected") {
  BaFixture f = make_ba_fixture({Eigen::Vector2d(0, 0), Eigen::Vector2d(0, 0),
                                 Eigen::Vector2d(0, 0)},
                                0.0, 79);
  Track bad;
  bad.observations.push_back({0, {100, 100}});
  f.tracks.push_back(bad);
  CHECK_THROWS_AS(bundle_adjust_bias(f.rpcs, f.tracks), UnderconstrainedTrack);
}

TEST_CASE("tie point interchange file round trip") {
  std::vector<Track> tracks(2);
  tracks[0].observations = {{0, {1.5, 2.25}}, {1, {3.0625, 4.0}}};
  tracks[1].observations = {{0, {10.1, 20.2}}, {2, {30.3, 40.4}}};
  const auto path = std::filesystem::temp_directory_path() / "satstereo_ties.txt";
  write_tie_points(path, tracks);
  const auto back = read_tie_points(path);
  REQUIRE(back.size() == 2);
  REQUIRE(back[0].observations.size() == 2);
  CHECK(back[0].observations[1].px.x == 3.0625);
  CHECK(back[1].observations[1].image_id == 2);
  CHECK(back[1].observations[1].px.y == 40.4);
  std::filesystem::remove(path);
}
