#pragma once

#include <Eigen/Dense>
#include <array>
#include <functional>
#include <string>
#include <vector>

#include "satstereo/groundtruth.hpp"
#include "satstereo/raster.hpp"
#include "satstereo/rectification.hpp"
#include "satstereo/rpc_model.hpp"
#include "satstereo/sgm.hpp"

namespace satstereo {

struct GeoBox {
  double lat_min = 0, lat_max = 0;
  double lon_min = 0, lon_max = 0;
  double h_min = 0, h_max = 0;
};

struct BoxSpec {
  double lat_min = 0, lat_max = 0;
  double lon_min = 0, lon_max = 0;
  double height = 0;  // added to the terrain inside the footprint
};

struct TerrainSpec {
  std::string kind = "flat";  // flat | slope | rolling
  double base_h = 30.0;
  double slope_e = 0.0;       // m per m east (slope)
  double slope_n = 0.0;       // m per m north (slope)
  double amp = 2.0;           // m (rolling)
  double wavelength_m = 120.0;
};

struct ViewSpec {
  std::string id;
  double azimuth_deg = 0;
  double elevation_deg = 70;
  std::string time;           // ISO-8601
  double gsd_m = 0.5;
  double curvature_px = 0.3;  // target mid-chord deviation over a 500 px span
};

struct SceneSpec {
  double lat_min = 0, lat_max = 0;
  double lon_min = 0, lon_max = 0;
  TerrainSpec terrain;
  std::vector<BoxSpec> boxes;
  double cell_m = 0.5;
  uint64_t seed = 1;
  double texture_perturb = 0.0;  // per-view scene-content change amplitude
  std::vector<ViewSpec> views;
};

double terrain_height(const SceneSpec& s, double lat, double lon);
double surface_height(const SceneSpec& s, double lat, double lon);

HeightField build_height_field(const SceneSpec& s);
MaskRaster building_footprint_mask(const SceneSpec& s, const GridSpec& grid);

GeoBox scene_volume(const SceneSpec& s, double pad_m = 20.0);

// True camera of the generator: an orthographic pushbroom-style view along a
// fixed direction plus a mild cubic image-space perturbation (exactly cubic in
// world coordinates, so it is representable by an RPC but bends epipolar
// curves). Pixel axes and the view direction are orthonormal.
struct PushbroomCamera {
  double lat_c = 0, lon_c = 0;  // anchor of the local metric frame
  double m_lat = 0, m_lon = 0;  // meters per degree at the anchor
  Eigen::Vector3d axis_col = Eigen::Vector3d::UnitX();
  Eigen::Vector3d axis_row = Eigen::Vector3d::UnitY();
  Eigen::Vector3d view_dir = Eigen::Vector3d::UnitZ();
  double gsd = 0.5;
  Eigen::Vector2d pixel_offset = Eigen::Vector2d::Zero();
  Eigen::Vector3d norm_center = Eigen::Vector3d::Zero();
  Eigen::Vector3d norm_scale = Eigen::Vector3d::Ones();
  std::array<double, 20> cubic_x{}, cubic_y{};  // degree-1 entries stay zero
  ViewGeometry geom;
  int width = 0, height = 0;

  Eigen::Vector3d metric(const GeoPoint& g) const {
    return {(g.lon - lon_c) * m_lon, (g.lat - lat_c) * m_lat, g.h};
  }
  GeoPoint geo(const Eigen::Vector3d& m) const {
    return {lat_c + m.y() / m_lat, lon_c + m.x() / m_lon, m.z()};
  }

  PixelPoint project(const GeoPoint& g) const;
  // Exact closed form for the affine part, then a couple of Newton steps for
  // the cubic perturbation.
  GeoPoint inverse(const PixelPoint& px, double h) const;
};

PushbroomCamera make_pushbroom_camera(const SceneSpec& scene, const ViewSpec& view,
                                      uint64_t seed);

struct RpcFitOptions {
  int grid_lat = 12, grid_lon = 12, grid_h = 8;  // >= 1000 samples total
  double max_residual_px = 0.01;                 // on a held-out sample
};

// Least-squares fit of rational cubics to sampled world->pixel pairs;
// validates on an independent grid and throws FitResidualTooLarge on failure.
RpcModel fit_rpc(const std::function<PixelPoint(const GeoPoint&)>& camera,
                 const GeoBox& volume, const RpcFitOptions& opts = {});
RpcModel fit_rpc(const PushbroomCamera& camera, const GeoBox& volume,
                 const RpcFitOptions& opts = {});

// Procedural band-limited texture with extra contrast on box roofs.
// view_perturb blends in a second, view-specific noise field so that views
// rendered with different indices disagree in content (multi-date stand-in).
class SceneTexture {
 public:
  explicit SceneTexture(const SceneSpec& s);
  double sample(double lat, double lon, int view_index, double view_perturb) const;

 private:
  struct Wave {
    double fx, fy, phase, amp;
  };
  const SceneSpec* spec_;
  double lat_c_, lon_c_, m_lat_, m_lon_;
  std::vector<Wave> waves_;
  std::vector<Wave> perturb_waves_;
};

inline double scene_texture(const SceneSpec& s, double lat, double lon,
                            int view_index, double view_perturb) {
  return SceneTexture(s).sample(lat, lon, view_index, view_perturb);
}

FloatRaster render_view(const SceneSpec& scene, const PreparedField& field,
                        const PushbroomCamera& cam, int view_index, int jobs = 1);

// Independent oracle for the groundtruth path: true cameras, analytic surface,
// bisection-refined exact intersection. Shares only the rectification maps
// (which are part of the geometry under test) with the production path.
DisparityMap analytic_disparity(const PushbroomCamera& cam_ref,
                                const PushbroomCamera& cam_sec,
                                const RectifiedPair& rect, const SceneSpec& scene,
                                int jobs = 1);

// Exact-surface intersection used by the oracle; step only brackets the
// crossing, bisection makes it exact to tol_m.
SurfaceHit intersect_scene_exact(const SceneSpec& scene,
                                 const std::function<GeoPoint(double)>& ray,
                                 double h_top, double h_bottom, double step_m,
                                 double tol_m = 1e-6);

struct SyntheticAcquisition {
  std::string id;
  PushbroomCamera camera;
  RpcModel rpc;
  ViewGeometry geom;
  FloatRaster image;
};

struct SyntheticScene {
  SceneSpec spec;
  HeightField field;
  MaskRaster building_mask_geo;
  std::vector<SyntheticAcquisition> views;
};

SyntheticScene build_scene(const SceneSpec& spec, int jobs = 1);

}  // namespace satstereo
