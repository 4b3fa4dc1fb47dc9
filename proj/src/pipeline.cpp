#include "satstereo/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "satstereo/errors.hpp"
#include "satstereo/hash.hpp"
#include "satstereo/parallel.hpp"
#include "satstereo/rng.hpp"

namespace satstereo {

using nlohmann::json;

// --- config -------------------------------------------------------------------

namespace {

json scene_to_json(const SceneSpec& s) {
  json j;
  j["aoi"] = {{"lat_min", s.lat_min},
              {"lat_max", s.lat_max},
              {"lon_min", s.lon_min},
              {"lon_max", s.lon_max}};
  j["terrain"] = {{"kind", s.terrain.kind},       {"base_h", s.terrain.base_h},
                  {"slope_e", s.terrain.slope_e}, {"slope_n", s.terrain.slope_n},
                  {"amp", s.terrain.amp},         {"wavelength_m", s.terrain.wavelength_m}};
  j["boxes"] = json::array();
  for (const auto& b : s.boxes)
    j["boxes"].push_back({{"lat_min", b.lat_min},
                          {"lat_max", b.lat_max},
                          {"lon_min", b.lon_min},
                          {"lon_max", b.lon_max},
                          {"height", b.height}});
  j["cell_m"] = s.cell_m;
  j["seed"] = s.seed;
  j["texture_perturb"] = s.texture_perturb;
  j["views"] = json::array();
  for (const auto& v : s.views)
    j["views"].push_back({{"id", v.id},
                          {"azimuth", v.azimuth_deg},
                          {"elevation", v.elevation_deg},
                          {"time", v.time},
                          {"gsd_m", v.gsd_m},
                          {"curvature_px", v.curvature_px}});
  return j;
}

SceneSpec scene_from_json(const json& j) {
  SceneSpec s;
  const auto& aoi = j.at("aoi");
  s.lat_min = aoi.at("lat_min");
  s.lat_max = aoi.at("lat_max");
  s.lon_min = aoi.at("lon_min");
  s.lon_max = aoi.at("lon_max");
  if (j.contains("terrain")) {
    const auto& t = j["terrain"];
    s.terrain.kind = t.value("kind", s.terrain.kind);
    s.terrain.base_h = t.value("base_h", s.terrain.base_h);
    s.terrain.slope_e = t.value("slope_e", s.terrain.slope_e);
    s.terrain.slope_n = t.value("slope_n", s.terrain.slope_n);
    s.terrain.amp = t.value("amp", s.terrain.amp);
    s.terrain.wavelength_m = t.value("wavelength_m", s.terrain.wavelength_m);
  }
  for (const auto& b : j.value("boxes", json::array()))
    s.boxes.push_back({b.at("lat_min"), b.at("lat_max"), b.at("lon_min"),
                       b.at("lon_max"), b.at("height")});
  s.cell_m = j.value("cell_m", s.cell_m);
  s.seed = j.value("seed", s.seed);
  s.texture_perturb = j.value("texture_perturb", s.texture_perturb);
  for (const auto& v : j.value("views", json::array())) {
    ViewSpec vs;
    vs.id = v.value("id", "");
    vs.azimuth_deg = v.at("azimuth");
    vs.elevation_deg = v.at("elevation");
    vs.time = v.value("time", "2016-01-01T10:00:00Z");
    vs.gsd_m = v.value("gsd_m", vs.gsd_m);
    vs.curvature_px = v.value("curvature_px", vs.curvature_px);
    s.views.push_back(std::move(vs));
  }
  return s;
}

json config_to_json(const PipelineConfig& c) {
  json j;
  j["io_root"] = c.io_root.string();
  j["jobs"] = c.jobs;
  j["seed"] = c.master_seed;
  j["scene"] = scene_to_json(c.scene);
  j["lidar_shift"] = {{"dx_m", c.lidar_shift.dx_m},
                      {"dy_m", c.lidar_shift.dy_m},
                      {"dz_m", c.lidar_shift.dz_m}};
  j["radiometric_table"] = c.radiometric_table;
  j["selection"] = {{"off_nadir_min", c.selection.off_nadir_min},
                    {"off_nadir_max", c.selection.off_nadir_max},
                    {"max_view_diff", c.selection.max_view_diff},
                    {"max_time_diff", c.selection.max_time_diff},
                    {"min_intersection", c.selection.min_intersection},
                    {"max_intersection", c.selection.max_intersection}};
  j["adjust"] = {{"tie_source", c.tie_source},
                 {"tie_file", c.tie_file},
                 {"ransac_tol_px", c.ransac_tol_px},
                 {"ransac_iters", c.ransac_iters},
                 {"max_iters", c.bundle.max_iters},
                 {"huber", c.bundle.huber}};
  j["rectify"] = {{"tile_size", c.layout.tile_size},
                  {"overlap", c.layout.overlap},
                  {"h_halfrange", c.tile_rectify.h_halfrange},
                  {"max_pairs", c.max_pairs}};
  j["match"] = {{"census_window", c.sgm.census_window},
                {"p1", c.sgm.p1},
                {"p2", c.sgm.p2},
                {"paths", c.sgm.paths},
                {"d_min", c.sgm.d_min},
                {"d_max", c.sgm.d_max},
                {"lr_tolerance", c.sgm.lr_tolerance},
                {"subpixel", c.sgm.subpixel}};
  j["fuse"] = {{"cell_m", c.fuse_cell_m},
               {"min_pairs", c.min_pairs_for_fusion},
               {"water_mask", c.water_mask_path},
               {"max_residual_px", c.triangulate.max_residual_px},
               {"min_intersection_deg", c.triangulate.min_intersection_deg}};
  j["align"] = {{"bound_m", c.align.bound_m},
                {"coarse_step_m", c.align.coarse_step_m},
                {"refine_levels", c.align.refine_levels},
                {"refine_factor", c.align.refine_factor},
                {"min_overlap", c.align.min_overlap}};
  j["gt"] = {{"lrrl_tol", c.gt.lrrl_tol},
             {"lrrl_subpixel", c.gt.lrrl_subpixel},
             {"step_m", c.gt.march.step_m}};
  json buckets = json::array();
  for (const auto& [lo, hi] : c.tau_buckets) buckets.push_back({lo, hi});
  j["eval"] = {{"n_points", c.rect_eval.n_points},
               {"tau_buckets", buckets},
               {"annotations", c.annotations_path},
               {"external_disparity_dir", c.external_disparity_dir}};
  return j;
}

}  // namespace

std::string PipelineConfig::canonical_json() const {
  return config_to_json(*this).dump();  // object keys are sorted by nlohmann
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigInvalid("cannot open config: " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigInvalid("config parse error: " + std::string(e.what()));
  }
  PipelineConfig c;
  try {
    c.io_root = j.value("io_root", c.io_root.string());
    c.jobs = j.value("jobs", c.jobs);
    c.master_seed = j.value("seed", c.master_seed);
    c.scene = scene_from_json(j.at("scene"));
    if (j.contains("lidar_shift")) {
      c.lidar_shift.dx_m = j["lidar_shift"].value("dx_m", 0.0);
      c.lidar_shift.dy_m = j["lidar_shift"].value("dy_m", 0.0);
      c.lidar_shift.dz_m = j["lidar_shift"].value("dz_m", 0.0);
    }
    c.radiometric_table = j.value("radiometric_table", "");
    if (j.contains("selection")) {
      const auto& s = j["selection"];
      c.selection.off_nadir_min = s.value("off_nadir_min", c.selection.off_nadir_min);
      c.selection.off_nadir_max = s.value("off_nadir_max", c.selection.off_nadir_max);
      c.selection.max_view_diff = s.value("max_view_diff", c.selection.max_view_diff);
      c.selection.max_time_diff = s.value("max_time_diff", c.selection.max_time_diff);
      c.selection.min_intersection =
          s.value("min_intersection", c.selection.min_intersection);
      c.selection.max_intersection =
          s.value("max_intersection", c.selection.max_intersection);
    }
    if (j.contains("adjust")) {
      const auto& a = j["adjust"];
      c.tie_source = a.value("tie_source", c.tie_source);
      c.tie_file = a.value("tie_file", "");
      c.ransac_tol_px = a.value("ransac_tol_px", c.ransac_tol_px);
      c.ransac_iters = a.value("ransac_iters", c.ransac_iters);
      c.bundle.max_iters = a.value("max_iters", c.bundle.max_iters);
      c.bundle.huber = a.value("huber", c.bundle.huber);
    }
    if (j.contains("rectify")) {
      const auto& r = j["rectify"];
      c.layout.tile_size = r.value("tile_size", c.layout.tile_size);
      c.layout.overlap = r.value("overlap", c.layout.overlap);
      c.tile_rectify.h_halfrange = r.value("h_halfrange", c.tile_rectify.h_halfrange);
      c.max_pairs = r.value("max_pairs", c.max_pairs);
    }
    if (j.contains("match")) {
      const auto& m = j["match"];
      c.sgm.census_window = m.value("census_window", c.sgm.census_window);
      c.sgm.p1 = m.value("p1", c.sgm.p1);
      c.sgm.p2 = m.value("p2", c.sgm.p2);
      c.sgm.paths = m.value("paths", c.sgm.paths);
      c.sgm.d_min = m.value("d_min", c.sgm.d_min);
      c.sgm.d_max = m.value("d_max", c.sgm.d_max);
      c.sgm.lr_tolerance = m.value("lr_tolerance", c.sgm.lr_tolerance);
      c.sgm.subpixel = m.value("subpixel", c.sgm.subpixel);
    }
    if (j.contains("fuse")) {
      const auto& f = j["fuse"];
      c.fuse_cell_m = f.value("cell_m", c.fuse_cell_m);
      c.min_pairs_for_fusion = f.value("min_pairs", c.min_pairs_for_fusion);
      c.water_mask_path = f.value("water_mask", "");
      c.triangulate.max_residual_px =
          f.value("max_residual_px", c.triangulate.max_residual_px);
      c.triangulate.min_intersection_deg =
          f.value("min_intersection_deg", c.triangulate.min_intersection_deg);
    }
    if (j.contains("align")) {
      const auto& a = j["align"];
      c.align.bound_m = a.value("bound_m", c.align.bound_m);
      c.align.coarse_step_m = a.value("coarse_step_m", c.align.coarse_step_m);
      c.align.refine_levels = a.value("refine_levels", c.align.refine_levels);
      c.align.refine_factor = a.value("refine_factor", c.align.refine_factor);
      c.align.min_overlap = a.value("min_overlap", c.align.min_overlap);
    }
    if (j.contains("gt")) {
      const auto& g = j["gt"];
      c.gt.lrrl_tol = g.value("lrrl_tol", c.gt.lrrl_tol);
      c.gt.lrrl_subpixel = g.value("lrrl_subpixel", c.gt.lrrl_subpixel);
      c.gt.march.step_m = g.value("step_m", c.gt.march.step_m);
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      c.rect_eval.n_points = e.value("n_points", c.rect_eval.n_points);
      if (e.contains("tau_buckets")) {
        c.tau_buckets.clear();
        for (const auto& b : e["tau_buckets"])
          c.tau_buckets.emplace_back(b.at(0), b.at(1));
      }
      c.annotations_path = e.value("annotations", "");
      c.external_disparity_dir = e.value("external_disparity_dir", "");
    }
  } catch (const json::exception& e) {
    throw ConfigInvalid("config field error: " + std::string(e.what()));
  }
  if (c.scene.views.size() < 2)
    throw ConfigInvalid("config must declare at least two views");
  if (c.jobs < 1) throw ConfigInvalid("jobs must be >= 1");
  c.rect_eval.seed = c.master_seed;
  c.tile_rectify.ransac_seed = c.master_seed;
  return c;
}

// --- manifests -----------------------------------------------------------------

namespace {

struct Stage {
  const PipelineConfig& cfg;
  std::filesystem::path root;
  std::string name;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;

  Stage(const PipelineConfig& c, std::string n)
      : cfg(c), root(c.io_root), name(std::move(n)) {}

  std::filesystem::path abs(const std::string& rel) const { return root / rel; }

  // Record (and hash) a file this stage consumed.
  std::filesystem::path in(const std::string& rel) {
    const auto p = abs(rel);
    if (!std::filesystem::exists(p))
      throw MissingUpstream(name + ": missing input " + rel);
    inputs[rel] = hash_file_hex(p);
    return p;
  }

  std::filesystem::path out(const std::string& rel) {
    const auto p = abs(rel);
    std::filesystem::create_directories(p.parent_path());
    outputs[rel] = "";  // hashed on finish
    return p;
  }

  void require_upstream(const std::vector<std::string>& stages) const {
    for (const auto& s : stages) {
      const auto mpath = root / "manifests" / (s + ".json");
      if (!std::filesystem::exists(mpath))
        throw MissingUpstream(name + ": stage '" + s + "' has not been run");
      const StageManifest m = read_manifest(mpath);
      for (const auto& [rel, hash] : m.outputs) {
        const auto p = root / rel;
        if (!std::filesystem::exists(p))
          throw MissingUpstream(name + ": upstream artifact missing: " + rel);
        if (hash_file_hex(p) != hash)
          throw MissingUpstream(name + ": upstream artifact stale: " + rel);
      }
    }
  }

  void finish() {
    for (auto& [rel, h] : outputs) h = hash_file_hex(abs(rel));
    json j;
    j["stage"] = name;
    j["config_hash"] = hash_bytes_hex(cfg.canonical_json());
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["version"] = "1";
    const auto p = root / "manifests" / (name + ".json");
    std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p);
    os << j.dump(2) << "\n";
  }
};

std::string pair_dir(const PairRecord& p) { return p.id_a + "__" + p.id_b; }

void write_mask_raster(const std::filesystem::path& path, const MaskRaster& m) {
  FloatRaster f(m.width(), m.height(), 0.f);
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) f.at(x, y) = m.at(x, y) ? 1.f : 0.f;
  write_float_raster(path, f);
}

MaskRaster read_mask_raster(const std::filesystem::path& path) {
  const FloatRaster f = read_float_raster_single(path);
  MaskRaster m(f.width(), f.height(), 0);
  for (int y = 0; y < f.height(); ++y)
    for (int x = 0; x < f.width(); ++x) m.at(x, y) = f.at(x, y) > 0.5f ? 1 : 0;
  return m;
}

void write_disparity(const std::filesystem::path& path, const DisparityMap& d) {
  FloatRaster valid(d.width(), d.height(), 0.f);
  for (int y = 0; y < d.height(); ++y)
    for (int x = 0; x < d.width(); ++x) valid.at(x, y) = d.is_valid(x, y) ? 1.f : 0.f;
  write_float_raster(path, {&d.disp, &valid});
}

DisparityMap read_disparity(const std::filesystem::path& path) {
  auto ch = read_float_raster(path);
  if (ch.size() != 2) throw IoError("disparity raster needs 2 channels");
  DisparityMap d{std::move(ch[0]), MaskRaster(ch[1].width(), ch[1].height(), 0)};
  for (int y = 0; y < d.disp.height(); ++y)
    for (int x = 0; x < d.disp.width(); ++x)
      d.valid.at(x, y) = ch[1].at(x, y) > 0.5f ? 1 : 0;
  return d;
}

void write_rect_map(const std::filesystem::path& path, const RectMap& m) {
  write_float_raster(path, {&m.x, &m.y});
}

RectMap read_rect_map(const std::filesystem::path& path) {
  auto ch = read_float_raster(path);
  if (ch.size() != 2) throw IoError("rect map raster needs 2 channels");
  return {std::move(ch[0]), std::move(ch[1])};
}

json homography_to_json(const Homography& h) {
  json a = json::array();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) a.push_back(h(i, j));
  return a;
}

Homography homography_from_json(const json& a) {
  Homography h;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) h(i, j) = a.at(static_cast<size_t>(3 * i + j));
  return h;
}

json affine_to_json(const AffineCamera& c) {
  json a = json::array();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) a.push_back(c.m(i, j));
  for (int i = 0; i < 3; ++i) a.push_back(c.anchor(i));
  a.push_back(c.anchor_px(0));
  a.push_back(c.anchor_px(1));
  return a;
}

AffineCamera affine_from_json(const json& a) {
  AffineCamera c;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) c.m(i, j) = a.at(static_cast<size_t>(4 * i + j));
  for (int i = 0; i < 3; ++i) c.anchor(i) = a.at(static_cast<size_t>(12 + i));
  c.anchor_px(0) = a.at(15);
  c.anchor_px(1) = a.at(16);
  return c;
}

json camera_to_json(const PushbroomCamera& c) {
  json j;
  j["lat_c"] = c.lat_c;
  j["lon_c"] = c.lon_c;
  j["m_lat"] = c.m_lat;
  j["m_lon"] = c.m_lon;
  j["axis_col"] = {c.axis_col.x(), c.axis_col.y(), c.axis_col.z()};
  j["axis_row"] = {c.axis_row.x(), c.axis_row.y(), c.axis_row.z()};
  j["view_dir"] = {c.view_dir.x(), c.view_dir.y(), c.view_dir.z()};
  j["gsd"] = c.gsd;
  j["pixel_offset"] = {c.pixel_offset.x(), c.pixel_offset.y()};
  j["norm_center"] = {c.norm_center.x(), c.norm_center.y(), c.norm_center.z()};
  j["norm_scale"] = {c.norm_scale.x(), c.norm_scale.y(), c.norm_scale.z()};
  j["cubic_x"] = c.cubic_x;
  j["cubic_y"] = c.cubic_y;
  j["azimuth"] = c.geom.azimuth_deg;
  j["elevation"] = c.geom.elevation_deg;
  j["time"] = c.geom.acquisition_time;
  j["width"] = c.width;
  j["height"] = c.height;
  return j;
}

PushbroomCamera camera_from_json(const json& j) {
  PushbroomCamera c;
  c.lat_c = j.at("lat_c");
  c.lon_c = j.at("lon_c");
  c.m_lat = j.at("m_lat");
  c.m_lon = j.at("m_lon");
  auto vec3 = [&](const char* k) {
    const auto& a = j.at(k);
    return Eigen::Vector3d(a.at(0), a.at(1), a.at(2));
  };
  c.axis_col = vec3("axis_col");
  c.axis_row = vec3("axis_row");
  c.view_dir = vec3("view_dir");
  c.gsd = j.at("gsd");
  c.pixel_offset = Eigen::Vector2d(j.at("pixel_offset").at(0),
                                   j.at("pixel_offset").at(1));
  c.norm_center = vec3("norm_center");
  c.norm_scale = vec3("norm_scale");
  for (int i = 0; i < 20; ++i) {
    c.cubic_x[static_cast<size_t>(i)] = j.at("cubic_x").at(static_cast<size_t>(i));
    c.cubic_y[static_cast<size_t>(i)] = j.at("cubic_y").at(static_cast<size_t>(i));
  }
  c.geom.azimuth_deg = j.at("azimuth");
  c.geom.elevation_deg = j.at("elevation");
  c.geom.acquisition_time = j.at("time");
  c.width = j.at("width");
  c.height = j.at("height");
  return c;
}

// Per-tile archive entry of the rectify stage.
json tile_to_json(const TileRect& t) {
  json j;
  j["window"] = {t.window.x0, t.window.y0, t.window.width, t.window.height};
  j["window_sec"] = {t.window_sec.x0, t.window_sec.y0, t.window_sec.width,
                     t.window_sec.height};
  j["h_ref"] = homography_to_json(t.h_ref);
  j["h_sec"] = homography_to_json(t.h_sec);
  j["cam_ref"] = affine_to_json(t.cam_ref);
  j["cam_sec"] = affine_to_json(t.cam_sec);
  return j;
}

TileRect tile_from_json(const json& j) {
  TileRect t;
  t.window = {j.at("window").at(0), j.at("window").at(1), j.at("window").at(2),
              j.at("window").at(3)};
  t.window_sec = {j.at("window_sec").at(0), j.at("window_sec").at(1),
                  j.at("window_sec").at(2), j.at("window_sec").at(3)};
  t.h_ref = homography_from_json(j.at("h_ref"));
  t.h_sec = homography_from_json(j.at("h_sec"));
  t.cam_ref = affine_from_json(j.at("cam_ref"));
  t.cam_sec = affine_from_json(j.at("cam_sec"));
  return t;
}

double median_height(const HeightGrid& hg) {
  std::vector<float> v;
  v.reserve(hg.heights.size());
  for (size_t i = 0; i < hg.heights.size(); ++i)
    if (std::isfinite(hg.heights.data()[i])) v.push_back(hg.heights.data()[i]);
  if (v.empty()) throw ConfigInvalid("height field has no valid cells");
  std::sort(v.begin(), v.end());
  return v[(v.size() - 1) / 2];
}

std::pair<double, double> height_range(const HeightGrid& hg) {
  double lo = 1e300, hi = -1e300;
  for (size_t i = 0; i < hg.heights.size(); ++i) {
    const float v = hg.heights.data()[i];
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  return {lo, hi};
}

std::vector<PairRecord> load_pairs(Stage& st, int max_pairs) {
  auto pairs = read_pair_records(st.in("pairs/pairs.txt"));
  if (max_pairs > 0 && static_cast<int>(pairs.size()) > max_pairs)
    pairs.resize(static_cast<size_t>(max_pairs));
  return pairs;
}

// --- stages ---------------------------------------------------------------------

void stage_synth(const PipelineConfig& cfg) {
  Stage st(cfg, "synth");
  SceneSpec spec = cfg.scene;
  if (spec.seed == 0) spec.seed = cfg.master_seed;
  SyntheticScene scene = build_scene(spec, cfg.jobs);

  // Radiometric normalization hook (identity unless a table is configured).
  std::map<std::string, std::pair<double, double>> radiometric;
  if (!cfg.radiometric_table.empty()) {
    std::ifstream is(cfg.radiometric_table);
    if (!is) throw ConfigInvalid("cannot open radiometric table");
    std::string id;
    double gain, offset;
    while (is >> id >> gain >> offset) radiometric[id] = {gain, offset};
  }

  write_height_grid(st.out("scene/height_field.fr"), scene.field);
  st.outputs["scene/height_field.hdr"] = "";

  Dsm lidar = scene.field;
  if (cfg.lidar_shift.dx_m != 0 || cfg.lidar_shift.dy_m != 0 ||
      cfg.lidar_shift.dz_m != 0) {
    const AlignmentOffset inv{-cfg.lidar_shift.dx_m, -cfg.lidar_shift.dy_m,
                              -cfg.lidar_shift.dz_m};
    lidar = shift_height_grid(scene.field, inv);
  }
  write_height_grid(st.out("scene/lidar.fr"), lidar);
  st.outputs["scene/lidar.hdr"] = "";

  write_mask_raster(st.out("scene/building_mask_geo.fr"), scene.building_mask_geo);
  write_grid_header(st.out("scene/building_mask_geo.hdr"), scene.field.grid);

  json cams = json::object();
  std::vector<ImageMeta> metas;
  for (const auto& v : scene.views) {
    cams[v.id] = camera_to_json(v.camera);
    metas.push_back({v.id, v.geom});
    FloatRaster img = v.image;
    if (auto it = radiometric.find(v.id); it != radiometric.end()) {
      for (size_t i = 0; i < img.size(); ++i)
        img.data()[i] = static_cast<float>(it->second.first * img.data()[i] +
                                           it->second.second);
    }
    write_float_raster(st.out("images/" + v.id + ".fr"), img);
    write_rpc_text(st.out("rpc/" + v.id + ".rpc"), v.rpc);
  }
  {
    std::ofstream os(st.out("scene/cameras.json"));
    os << cams.dump(2) << "\n";
  }
  write_image_metas(st.out("meta/images.txt"), metas);
  st.finish();
}

void stage_pairs(const PipelineConfig& cfg) {
  Stage st(cfg, "pairs");
  st.require_upstream({"synth"});
  const auto metas = read_image_metas(st.in("meta/images.txt"));
  const auto pairs = select_pairs(metas, cfg.selection);
  write_pair_records(st.out("pairs/pairs.txt"), pairs);
  st.finish();
}

void stage_adjust(const PipelineConfig& cfg) {
  Stage st(cfg, "adjust");
  st.require_upstream({"synth", "pairs"});
  const auto metas = read_image_metas(st.in("meta/images.txt"));
  const auto pairs = read_pair_records(st.in("pairs/pairs.txt"));

  std::map<std::string, int> image_index;
  std::vector<RpcModel> rpcs;
  std::vector<FloatRaster> images;
  for (const auto& m : metas) {
    image_index[m.id] = static_cast<int>(rpcs.size());
    rpcs.push_back(read_rpc_text(st.in("rpc/" + m.id + ".rpc")));
    images.push_back(read_float_raster_single(st.in("images/" + m.id + ".fr")));
  }

  std::vector<PairMatches> matches(pairs.size());
  std::vector<Track> tracks;
  if (cfg.tie_source == "file") {
    // Hand-made or externally produced interchange records.
    if (cfg.tie_file.empty())
      throw ConfigInvalid("tie_source=file requires adjust.tie_file");
    tracks = read_tie_points(cfg.tie_file);
    st.inputs["<tie_file>"] = hash_file_hex(cfg.tie_file);
  } else if (cfg.tie_source == "oracle") {
    // Exact correspondences from the true cameras; keeps the pipeline
    // independent of detector quality when requested.
    std::ifstream is(st.in("scene/cameras.json"));
    json cams;
    is >> cams;
    const HeightGrid field = read_height_grid(st.in("scene/height_field.fr"));
    st.inputs["scene/height_field.hdr"] =
        hash_file_hex(st.abs("scene/height_field.hdr"));
    const auto [h_lo, h_hi] = height_range(field);
    for (size_t pi = 0; pi < pairs.size(); ++pi) {
      const auto& pr = pairs[pi];
      const PushbroomCamera ca = camera_from_json(cams.at(pr.id_a));
      const PushbroomCamera cb = camera_from_json(cams.at(pr.id_b));
      PairMatches pm{image_index.at(pr.id_a), image_index.at(pr.id_b), {}};
      const int g = 6;
      for (int i = 0; i < g; ++i)
        for (int j = 0; j < g; ++j)
          for (int k = 0; k < 3; ++k) {
            GeoPoint w;
            w.lat = field.grid.lat_at((field.grid.height - 1) * (i + 0.5) / g);
            w.lon = field.grid.lon_at((field.grid.width - 1) * (j + 0.5) / g);
            w.h = h_lo + (h_hi - h_lo) * k / 2.0;
            pm.matches.push_back({ca.project(w), cb.project(w), 1.0});
          }
      matches[pi] = std::move(pm);
    }
  } else {
    parallel_for(0, static_cast<int>(pairs.size()), cfg.jobs, [&](int pi) {
      const auto& pr = pairs[static_cast<size_t>(pi)];
      const int ia = image_index.at(pr.id_a);
      const int ib = image_index.at(pr.id_b);
      PairMatches pm{ia, ib, {}};
      try {
        auto corrs = detect_and_match(images[static_cast<size_t>(ia)],
                                      images[static_cast<size_t>(ib)], cfg.detect);
        auto res = estimate_fundamental_ransac(corrs, cfg.ransac_tol_px,
                                               cfg.ransac_iters, cfg.master_seed);
        for (size_t i = 0; i < corrs.size(); ++i)
          if (res.inlier_mask[i]) pm.matches.push_back(corrs[i]);
      } catch (const Error&) {
        // pair contributes no ties; bundle still runs on the rest
      }
      matches[static_cast<size_t>(pi)] = std::move(pm);
    });
  }

  if (cfg.tie_source != "file") tracks = build_tracks(matches);
  if (tracks.empty()) throw TooFewMatches("no tie-point tracks for adjustment");

  // Gauge: the image with the earliest acquisition time.
  int gauge = 0;
  double t_min = 1e300;
  for (const auto& m : metas) {
    const double t = parse_time_days(m.geom.acquisition_time);
    if (t < t_min) {
      t_min = t;
      gauge = image_index.at(m.id);
    }
  }
  BundleOptions bopts = cfg.bundle;
  bopts.gauge_index = gauge;
  const BiasSolution sol = bundle_adjust_bias(rpcs, tracks, bopts);

  write_tie_points(st.out("adjust/tiepoints.txt"), tracks);
  {
    std::ofstream os(st.out("adjust/biases.txt"));
    os << "# id bias_x bias_y\n";
    char buf[256];
    for (const auto& m : metas) {
      const int i = image_index.at(m.id);
      std::snprintf(buf, sizeof(buf), "%s %.17g %.17g\n", m.id.c_str(),
                    sol.bias[static_cast<size_t>(i)].x(),
                    sol.bias[static_cast<size_t>(i)].y());
      os << buf;
    }
  }
  {
    std::ofstream os(st.out("adjust/report.txt"));
    os << "rmse_px " << sol.rmse_px << "\n"
       << "iterations " << sol.iterations << "\n"
       << "converged " << (sol.converged ? 1 : 0) << "\n";
  }
  for (const auto& m : metas) {
    const int i = image_index.at(m.id);
    RpcModel corrected = rpcs[static_cast<size_t>(i)];
    corrected.bias_x += sol.bias[static_cast<size_t>(i)].x();
    corrected.bias_y += sol.bias[static_cast<size_t>(i)].y();
    write_rpc_text(st.out("adjust/rpc/" + m.id + ".rpc"), corrected);
  }
  st.finish();
}

void stage_rectify(const PipelineConfig& cfg) {
  Stage st(cfg, "rectify");
  st.require_upstream({"synth", "pairs", "adjust"});
  const auto pairs = load_pairs(st, cfg.max_pairs);
  const HeightGrid field = read_height_grid(st.in("scene/height_field.fr"));
  const double h0 = median_height(field);

  for (const auto& pr : pairs) {
    const RpcModel rpc_a = read_rpc_text(st.in("adjust/rpc/" + pr.id_a + ".rpc"));
    const RpcModel rpc_b = read_rpc_text(st.in("adjust/rpc/" + pr.id_b + ".rpc"));
    const FloatRaster img_a = read_float_raster_single(st.in("images/" + pr.id_a + ".fr"));
    const FloatRaster img_b = read_float_raster_single(st.in("images/" + pr.id_b + ".fr"));

    const auto windows = cfg.layout.tiles(img_a.width(), img_a.height());
    std::vector<TileRect> tiles(windows.size());
    parallel_for(0, static_cast<int>(windows.size()), cfg.jobs, [&](int ti) {
      tiles[static_cast<size_t>(ti)] = rectify_tile_pair(
          rpc_a, rpc_b, windows[static_cast<size_t>(ti)], h0, cfg.tile_rectify);
    });
    const RectifiedPair rect =
        stitch_chip_maps(tiles, img_a.width(), img_a.height(), {},
                         img_b.width(), img_b.height());

    const std::string d = "rect/" + pair_dir(pr) + "/";
    write_rect_map(st.out(d + "fwd_ref.fr"), rect.fwd_ref);
    write_rect_map(st.out(d + "fwd_sec.fr"), rect.fwd_sec);
    write_rect_map(st.out(d + "inv_ref.fr"), rect.inv_ref);
    write_rect_map(st.out(d + "inv_sec.fr"), rect.inv_sec);
    {
      std::ofstream os(st.out(d + "frame.txt"));
      os << "rect_width " << rect.rect_width << "\nrect_height "
         << rect.rect_height << "\nchip_width " << img_a.width()
         << "\nchip_height " << img_a.height() << "\n";
    }
    {
      json jt = json::array();
      for (const auto& t : rect.tiles) jt.push_back(tile_to_json(t));
      std::ofstream os(st.out(d + "tiles.json"));
      os << jt.dump(2) << "\n";
    }
    write_float_raster(st.out(d + "rect_ref.fr"), warp(img_a, rect.fwd_ref));
    write_float_raster(st.out(d + "rect_sec.fr"), warp(img_b, rect.fwd_sec));
  }
  st.finish();
}

void stage_match(const PipelineConfig& cfg) {
  Stage st(cfg, "match");
  st.require_upstream({"rectify"});
  const auto pairs = load_pairs(st, cfg.max_pairs);

  for (const auto& pr : pairs) {
    const std::string rd = "rect/" + pair_dir(pr) + "/";
    const std::string md = "match/" + pair_dir(pr) + "/";
    const FloatRaster rect_ref = read_float_raster_single(st.in(rd + "rect_ref.fr"));
    const FloatRaster rect_sec = read_float_raster_single(st.in(rd + "rect_sec.fr"));

    // Chip-level disparity for the benchmarking experiment.
    write_disparity(st.out(md + "chip.fr"), sgm_match(rect_ref, rect_sec, cfg.sgm));

    // Tile-level disparities for the DSM path.
    json tiles_json;
    {
      std::ifstream is(st.in(rd + "tiles.json"));
      is >> tiles_json;
    }
    const FloatRaster img_a = read_float_raster_single(st.in("images/" + pr.id_a + ".fr"));
    const FloatRaster img_b = read_float_raster_single(st.in("images/" + pr.id_b + ".fr"));

    std::vector<TileRect> tiles;
    for (const auto& tj : tiles_json) tiles.push_back(tile_from_json(tj));

    json geoms = json::array();
    std::vector<DisparityMap> tile_disp(tiles.size());
    std::vector<json> tile_geom(tiles.size());
    parallel_for(0, static_cast<int>(tiles.size()), cfg.jobs, [&](int ti) {
      const TileRect& t = tiles[static_cast<size_t>(ti)];
      // Shared rectified bbox of the tile under both homographies.
      double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
      for (int view = 0; view < 2; ++view) {
        const auto& w = view == 0 ? t.window : t.window_sec;
        const Homography& h = view == 0 ? t.h_ref : t.h_sec;
        for (double cx : {static_cast<double>(w.x0), static_cast<double>(w.x0 + w.width - 1)})
          for (double cy : {static_cast<double>(w.y0), static_cast<double>(w.y0 + w.height - 1)}) {
            const PixelPoint q = apply_h(h, {cx, cy});
            x0 = std::min(x0, q.x);
            x1 = std::max(x1, q.x);
            y0 = std::min(y0, q.y);
            y1 = std::max(y1, q.y);
          }
      }
      const int rw = static_cast<int>(std::ceil(x1 - x0)) + 1;
      const int rh = static_cast<int>(std::ceil(y1 - y0)) + 1;
      auto make_map = [&](const Homography& h, const PixelWindow& w) {
        RectMap m{FloatRaster(rw, rh, kInvalid), FloatRaster(rw, rh, kInvalid)};
        const Homography hinv = h.inverse();
        for (int iy = 0; iy < rh; ++iy)
          for (int ix = 0; ix < rw; ++ix) {
            const PixelPoint src = apply_h(hinv, {x0 + ix, y0 + iy});
            if (w.contains(src.x, src.y, 0.5)) {
              m.x.at(ix, iy) = static_cast<float>(src.x);
              m.y.at(ix, iy) = static_cast<float>(src.y);
            }
          }
        return m;
      };
      const FloatRaster tile_ref = warp(img_a, make_map(t.h_ref, t.window));
      const FloatRaster tile_sec = warp(img_b, make_map(t.h_sec, t.window_sec));
      tile_disp[static_cast<size_t>(ti)] = sgm_match(tile_ref, tile_sec, cfg.sgm);
      json g;
      g["rect_x0"] = x0;
      g["rect_y0"] = y0;
      g["tile"] = tile_to_json(t);
      tile_geom[static_cast<size_t>(ti)] = std::move(g);
    });
    for (size_t ti = 0; ti < tiles.size(); ++ti) {
      write_disparity(st.out(md + "tile_" + std::to_string(ti) + ".fr"),
                      tile_disp[ti]);
      geoms.push_back(tile_geom[ti]);
    }
    std::ofstream os(st.out(md + "tiles.json"));
    os << geoms.dump(2) << "\n";
  }
  st.finish();
}

void stage_fuse(const PipelineConfig& cfg) {
  Stage st(cfg, "fuse");
  st.require_upstream({"match"});
  const auto pairs = load_pairs(st, cfg.max_pairs);
  if (static_cast<int>(pairs.size()) < cfg.min_pairs_for_fusion)
    throw ConfigInvalid("fewer selected pairs than min_pairs_for_fusion");

  const GridSpec grid = GridSpec::make(cfg.scene.lat_min, cfg.scene.lat_max,
                                       cfg.scene.lon_min, cfg.scene.lon_max,
                                       cfg.fuse_cell_m);
  std::vector<Dsm> pairwise;
  for (const auto& pr : pairs) {
    const std::string md = "match/" + pair_dir(pr) + "/";
    json geoms;
    {
      std::ifstream is(st.in(md + "tiles.json"));
      is >> geoms;
    }
    PointCloud cloud;
    for (size_t ti = 0; ti < geoms.size(); ++ti) {
      const DisparityMap disp =
          read_disparity(st.in(md + "tile_" + std::to_string(ti) + ".fr"));
      const TileRect tile = tile_from_json(geoms.at(ti).at("tile"));
      TilePairGeometry g{tile.cam_ref, tile.cam_sec, tile.h_ref, tile.h_sec,
                         geoms.at(ti).at("rect_x0"), geoms.at(ti).at("rect_y0")};
      PointCloud part = triangulate(disp, g, cfg.triangulate);
      cloud.points.insert(cloud.points.end(), part.points.begin(),
                          part.points.end());
    }
    if (cloud.points.empty()) continue;
    Dsm dsm = rasterize_dsm(cloud, grid);
    write_height_grid(st.out("fuse/pairwise/" + pair_dir(pr) + ".fr"), dsm);
    st.outputs["fuse/pairwise/" + pair_dir(pr) + ".hdr"] = "";
    pairwise.push_back(std::move(dsm));
  }
  if (static_cast<int>(pairwise.size()) < cfg.min_pairs_for_fusion)
    throw ConfigInvalid("fewer usable pairwise DSMs than min_pairs_for_fusion");

  Dsm fused = fuse_median(pairwise);
  if (!cfg.water_mask_path.empty())
    fused = apply_water_mask(fused, read_mask_raster(cfg.water_mask_path));
  write_height_grid(st.out("fuse/fused.fr"), fused);
  st.outputs["fuse/fused.hdr"] = "";
  st.finish();
}

void stage_align(const PipelineConfig& cfg) {
  Stage st(cfg, "align");
  st.require_upstream({"synth", "fuse"});
  Dsm lidar = read_height_grid(st.in("scene/lidar.fr"));
  st.inputs["scene/lidar.hdr"] = hash_file_hex(st.abs("scene/lidar.hdr"));
  const Dsm fused = read_height_grid(st.in("fuse/fused.fr"));
  st.inputs["fuse/fused.hdr"] = hash_file_hex(st.abs("fuse/fused.hdr"));

  // The search expects a shared grid; resample the stand-in when cell sizes
  // differ.
  if (!lidar.grid.same_grid(fused.grid)) {
    Dsm res{fused.grid, make_invalid_raster(fused.grid.width, fused.grid.height)};
    for (int y = 0; y < fused.grid.height; ++y)
      for (int x = 0; x < fused.grid.width; ++x) {
        const double lat = fused.grid.lat_at(y), lon = fused.grid.lon_at(x);
        const double v = sample_bilinear(lidar.heights, lidar.grid.cell_x(lon),
                                         lidar.grid.cell_y(lat));
        if (std::isfinite(v)) res.heights.at(x, y) = static_cast<float>(v);
      }
    lidar = std::move(res);
  }

  const AlignmentOffset off = align_lidar(lidar, fused, cfg.align);
  {
    std::ofstream os(st.out("align/offset.txt"));
    char buf[160];
    std::snprintf(buf, sizeof(buf), "dx_m %.17g\ndy_m %.17g\ndz_m %.17g\n",
                  off.dx_m, off.dy_m, off.dz_m);
    os << buf;
  }
  const Dsm original = read_height_grid(st.abs("scene/lidar.fr"));
  write_height_grid(st.out("align/lidar_aligned.fr"),
                    shift_height_grid(original, off));
  st.outputs["align/lidar_aligned.hdr"] = "";
  st.finish();
}

void stage_gt(const PipelineConfig& cfg) {
  Stage st(cfg, "gt");
  st.require_upstream({"rectify", "align"});
  const auto pairs = load_pairs(st, cfg.max_pairs);
  const auto metas = read_image_metas(st.in("meta/images.txt"));
  const HeightField aligned = read_height_grid(st.in("align/lidar_aligned.fr"));
  st.inputs["align/lidar_aligned.hdr"] =
      hash_file_hex(st.abs("align/lidar_aligned.hdr"));
  const PreparedField field(aligned);
  const MaskRaster mask_geo = read_mask_raster(st.in("scene/building_mask_geo.fr"));
  const GridSpec mask_grid = read_grid_header(st.in("scene/building_mask_geo.hdr"));

  for (const auto& pr : pairs) {
    const std::string rd = "rect/" + pair_dir(pr) + "/";
    const std::string gd = "gt/" + pair_dir(pr) + "/";
    RectifiedPair rect;
    rect.fwd_ref = read_rect_map(st.in(rd + "fwd_ref.fr"));
    rect.fwd_sec = read_rect_map(st.in(rd + "fwd_sec.fr"));
    rect.inv_ref = read_rect_map(st.in(rd + "inv_ref.fr"));
    rect.inv_sec = read_rect_map(st.in(rd + "inv_sec.fr"));
    rect.rect_width = rect.fwd_ref.width();
    rect.rect_height = rect.fwd_ref.height();
    const RpcModel rpc_a = read_rpc_text(st.in("adjust/rpc/" + pr.id_a + ".rpc"));
    const RpcModel rpc_b = read_rpc_text(st.in("adjust/rpc/" + pr.id_b + ".rpc"));

    GtOptions gopts = cfg.gt;
    GtDisparityPair gt = generate_gt_disparity(rect, rpc_a, rpc_b, field, gopts,
                                               cfg.jobs);
    gt.meta = {pair_dir(pr), pr.tau_days, pr.theta_deg};

    write_disparity(st.out(gd + "disp_ref.fr"), gt.d_ref);
    write_disparity(st.out(gd + "disp_sec.fr"), gt.d_sec);
    write_mask_raster(st.out(gd + "building_mask.fr"),
                      project_building_mask(mask_geo, mask_grid, rpc_a,
                                            rect.inv_ref, rect.rect_width,
                                            rect.rect_height, field));
    {
      std::ofstream os(st.out(gd + "meta.txt"));
      char buf[640];
      const ImageMeta* ma = nullptr;
      const ImageMeta* mb = nullptr;
      for (const auto& mm : metas) {
        if (mm.id == pr.id_a) ma = &mm;
        if (mm.id == pr.id_b) mb = &mm;
      }
      std::snprintf(buf, sizeof(buf),
                    "pair %s\ntau_days %.17g\ntheta_deg %.17g\n"
                    "ref %s %s azimuth %.17g elevation %.17g\n"
                    "sec %s %s azimuth %.17g elevation %.17g\n",
                    gt.meta.pair_id.c_str(), pr.tau_days, pr.theta_deg,
                    pr.id_a.c_str(),
                    ma ? ma->geom.acquisition_time.c_str() : "?",
                    ma ? ma->geom.azimuth_deg : 0.0,
                    ma ? ma->geom.elevation_deg : 0.0,
                    pr.id_b.c_str(),
                    mb ? mb->geom.acquisition_time.c_str() : "?",
                    mb ? mb->geom.azimuth_deg : 0.0,
                    mb ? mb->geom.elevation_deg : 0.0);
      os << buf;
    }
  }
  st.finish();
}

void stage_eval(const PipelineConfig& cfg) {
  Stage st(cfg, "eval");
  st.require_upstream({"gt", "match"});
  const auto pairs = load_pairs(st, cfg.max_pairs);
  const HeightField aligned = read_height_grid(st.in("align/lidar_aligned.fr"));
  const auto [h_lo, h_hi] = height_range(aligned);

  json cams;
  {
    std::ifstream is(st.in("scene/cameras.json"));
    is >> cams;
  }
  SceneSpec spec = cfg.scene;
  if (spec.seed == 0) spec.seed = cfg.master_seed;

  auto csv_stats_row = [](std::ostream& os, const std::string& tag,
                          const PairRecord& pr, const ErrorStats& s) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%zu,%zu\n",
                  tag.c_str(), pr.tau_days, pr.theta_deg, s.mean, s.median, s.p95,
                  s.max, s.count, s.skipped);
    os << buf;
  };

  std::ofstream rect_csv(st.out("eval/rect_errors.csv"));
  rect_csv << "pair,tau_days,theta_deg,mean_abs_dy,median_abs_dy,p95_abs_dy,"
              "max_abs_dy,count,skipped\n";
  std::ofstream fid_csv(st.out("eval/gt_fidelity.csv"));
  fid_csv << "pair,tau_days,theta_deg,mean_abs_diff,median_abs_diff,"
             "p95_abs_diff,max_abs_diff,count,skipped\n";
  std::ofstream match_csv(st.out("eval/matcher.csv"));
  match_csv << "pair,tau_days,theta_deg,masked_px,err_gt1px_rate,valid_frac\n";
  std::ofstream hist_csv(st.out("eval/rect_hist.csv"));
  hist_csv << "pair,bin_lo_px,count\n";

  for (const auto& pr : pairs) {
    const std::string rd = "rect/" + pair_dir(pr) + "/";
    const std::string gd = "gt/" + pair_dir(pr) + "/";
    RectifiedPair rect;
    rect.fwd_ref = read_rect_map(st.in(rd + "fwd_ref.fr"));
    rect.fwd_sec = read_rect_map(st.in(rd + "fwd_sec.fr"));
    rect.inv_ref = read_rect_map(st.in(rd + "inv_ref.fr"));
    rect.inv_sec = read_rect_map(st.in(rd + "inv_sec.fr"));
    rect.rect_width = rect.fwd_ref.width();
    rect.rect_height = rect.fwd_ref.height();
    const RpcModel rpc_a = read_rpc_text(st.in("adjust/rpc/" + pr.id_a + ".rpc"));
    const RpcModel rpc_b = read_rpc_text(st.in("adjust/rpc/" + pr.id_b + ".rpc"));

    RectEvalOptions ropts = cfg.rect_eval;
    ropts.h_min = h_lo;
    ropts.h_max = h_hi;
    const ErrorStats rect_stats = eval_rectification_error(rpc_a, rpc_b, rect, ropts);
    csv_stats_row(rect_csv, pair_dir(pr), pr, rect_stats);
    for (size_t b = 0; b < rect_stats.histogram.size(); ++b) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%s,%.6g,%zu\n", pair_dir(pr).c_str(),
                    b * rect_stats.hist_bin_width, rect_stats.histogram[b]);
      hist_csv << buf;
    }

    // Groundtruth fidelity against the independent analytic oracle.
    const DisparityMap gt_ref = read_disparity(st.in(gd + "disp_ref.fr"));
    const PushbroomCamera cam_a = camera_from_json(cams.at(pr.id_a));
    const PushbroomCamera cam_b = camera_from_json(cams.at(pr.id_b));
    const DisparityMap oracle = analytic_disparity(cam_a, cam_b, rect, spec, cfg.jobs);
    std::vector<double> diffs;
    for (int y = 0; y < gt_ref.height(); ++y)
      for (int x = 0; x < gt_ref.width(); ++x)
        if (gt_ref.is_valid(x, y) && y < oracle.height() && x < oracle.width() &&
            oracle.is_valid(x, y))
          diffs.push_back(std::abs(gt_ref.disp.at(x, y) - oracle.disp.at(x, y)));
    csv_stats_row(fid_csv, pair_dir(pr), pr,
                  ErrorStats::from_samples(std::move(diffs)));

    // Matcher benchmark inside the building mask; an external results
    // directory substitutes for the built-in matcher when configured.
    DisparityMap est;
    if (!cfg.external_disparity_dir.empty()) {
      const auto path = std::filesystem::path(cfg.external_disparity_dir) /
                        (pair_dir(pr) + ".fr");
      est = read_disparity(path);
      st.inputs["<external>/" + pair_dir(pr) + ".fr"] = hash_file_hex(path);
    } else {
      est = read_disparity(st.in("match/" + pair_dir(pr) + "/chip.fr"));
    }
    const MaskRaster bmask = read_mask_raster(st.in(gd + "building_mask.fr"));
    size_t masked = 0, bad = 0, est_valid = 0;
    for (int y = 0; y < gt_ref.height(); ++y)
      for (int x = 0; x < gt_ref.width(); ++x) {
        if (!bmask.at(x, y) || !gt_ref.is_valid(x, y)) continue;
        ++masked;
        if (x < est.width() && y < est.height() && est.is_valid(x, y)) {
          ++est_valid;
          if (std::abs(est.disp.at(x, y) - gt_ref.disp.at(x, y)) > 1.0) ++bad;
        } else {
          ++bad;  // missing estimate counts as an error
        }
      }
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g,%zu,%.6g,%.6g\n",
                  pair_dir(pr).c_str(), pr.tau_days, pr.theta_deg, masked,
                  masked ? static_cast<double>(bad) / masked : 0.0,
                  masked ? static_cast<double>(est_valid) / masked : 0.0);
    match_csv << buf;
  }

  rect_csv.close();
  fid_csv.close();
  match_csv.close();
  hist_csv.close();

  // Optional human-annotation protocol.
  if (!cfg.annotations_path.empty()) {
    std::ifstream is(cfg.annotations_path);
    if (!is) throw ConfigInvalid("cannot open annotations file");
    std::map<std::string, std::vector<AnnotatedTiePoint>> by_pair;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string pid;
      AnnotatedTiePoint a;
      if (!(ls >> pid >> a.ref.x >> a.ref.y >> a.sec.x >> a.sec.y))
        throw ConfigInvalid("bad annotation record: " + line);
      by_pair[pid].push_back(a);
    }
    std::ofstream ann_csv(st.out("eval/annotation_errors.csv"));
    ann_csv << "pair,mean_abs_err,median_abs_err,p95_abs_err,count,skipped\n";
    for (const auto& pr : pairs) {
      auto it = by_pair.find(pair_dir(pr));
      if (it == by_pair.end()) continue;
      GtDisparityPair gt;
      gt.d_ref = read_disparity(st.abs("gt/" + pair_dir(pr) + "/disp_ref.fr"));
      const ErrorStats s = eval_disparity_error(gt, it->second);
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g,%.6g,%zu,%zu\n",
                    pair_dir(pr).c_str(), s.mean, s.median, s.p95, s.count,
                    s.skipped);
      ann_csv << buf;
    }
  }
  st.finish();
}

void stage_report(const PipelineConfig& cfg) {
  Stage st(cfg, "report");
  st.require_upstream({"eval"});

  auto read_csv = [&](const std::string& rel) {
    std::ifstream is(st.in(rel));
    std::vector<std::vector<std::string>> rows;
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
      if (header) {
        header = false;
        continue;
      }
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::istringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) cells.push_back(cell);
      rows.push_back(std::move(cells));
    }
    return rows;
  };

  const auto rect_rows = read_csv("eval/rect_errors.csv");
  const auto fid_rows = read_csv("eval/gt_fidelity.csv");
  const auto match_rows = read_csv("eval/matcher.csv");

  std::string bucket_desc;
  for (size_t i = 0; i < cfg.tau_buckets.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s%g:%g", i ? ";" : "",
                  cfg.tau_buckets[i].first, cfg.tau_buckets[i].second);
    bucket_desc += buf;
  }

  {
    std::ofstream os(st.out("report/summary.csv"));
    os << "# tau_buckets = " << bucket_desc << "\n";
    os << "pair,tau_days,theta_deg,mean_abs_dy,gt_fidelity_mean,"
          "matcher_err_gt1px_rate\n";
    for (size_t i = 0; i < rect_rows.size(); ++i) {
      const auto& r = rect_rows[i];
      const std::string fid = i < fid_rows.size() ? fid_rows[i][3] : "";
      const std::string mrate = i < match_rows.size() ? match_rows[i][4] : "";
      os << r[0] << "," << r[1] << "," << r[2] << "," << r[3] << "," << fid
         << "," << mrate << "\n";
    }
  }
  {
    // tau-bucketed matcher error rates (the stereo-matching experiment).
    std::ofstream os(st.out("report/matcher_by_tau.csv"));
    os << "# tau_buckets = " << bucket_desc << "\n";
    os << "bucket_lo,bucket_hi,pairs,mean_err_gt1px_rate\n";
    for (const auto& [lo, hi] : cfg.tau_buckets) {
      double sum = 0;
      int cnt = 0;
      for (const auto& r : match_rows) {
        const double tau = std::stod(r[1]);
        if (tau < lo || tau > hi) continue;
        sum += std::stod(r[4]);
        ++cnt;
      }
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%g,%g,%d,%.6g\n", lo, hi, cnt,
                    cnt ? sum / cnt : 0.0);
      os << buf;
    }
  }
  {
    std::ofstream os(st.out("report/rect_hist.csv"));
    os << "pair,bin_lo_px,count\n";
    std::ifstream is(st.in("eval/rect_hist.csv"));
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
      if (header) {
        header = false;
        continue;
      }
      os << line << "\n";
    }
  }
  {
    std::ofstream os(st.out("report/summary.txt"));
    double worst_dy = 0, mean_dy = 0;
    for (const auto& r : rect_rows) {
      worst_dy = std::max(worst_dy, std::stod(r[3]));
      mean_dy += std::stod(r[3]);
    }
    os << "pairs " << rect_rows.size() << "\n";
    os << "mean_abs_dy_avg "
       << (rect_rows.empty() ? 0.0 : mean_dy / rect_rows.size()) << "\n";
    os << "mean_abs_dy_worst " << worst_dy << "\n";
  }
  st.finish();
}

}  // namespace

StageManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest: " + path.string());
  json j;
  is >> j;
  StageManifest m;
  m.stage = j.at("stage");
  m.config_hash = j.at("config_hash");
  for (const auto& [k, v] : j.at("inputs").items()) m.inputs[k] = v;
  for (const auto& [k, v] : j.at("outputs").items()) m.outputs[k] = v;
  return m;
}

void run_stage(const std::string& name, const PipelineConfig& cfg) {
  if (name == "synth") return stage_synth(cfg);
  if (name == "pairs") return stage_pairs(cfg);
  if (name == "adjust") return stage_adjust(cfg);
  if (name == "rectify") return stage_rectify(cfg);
  if (name == "match") return stage_match(cfg);
  if (name == "fuse") return stage_fuse(cfg);
  if (name == "align") return stage_align(cfg);
  if (name == "gt") return stage_gt(cfg);
  if (name == "eval") return stage_eval(cfg);
  if (name == "report") return stage_report(cfg);
  throw ConfigInvalid("unknown stage: " + name);
}

void run_all(const PipelineConfig& cfg) {
  for (const auto& s : stage_names()) run_stage(s, cfg);
}

}  // namespace satstereo
