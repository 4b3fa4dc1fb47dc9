#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "satstereo/errors.hpp"
#include "satstereo/hash.hpp"
#include "satstereo/pipeline.hpp"
#include "satstereo/rng.hpp"

using namespace satstereo;

namespace {

std::filesystem::path test_root() {
  const auto p = std::filesystem::temp_directory_path() / "satstereo_pipe_test";
  return p;
}

std::string demo_config_json(const std::filesystem::path& io_root) {
  std::ostringstream os;
  os << R"({
  "io_root": ")" << io_root.string() << R"(",
  "jobs": 2,
  "seed": 7,
  "scene": {
    "aoi": {"lat_min": 32.7000, "lat_max": 32.7010,
            "lon_min": -117.1010, "lon_max": -117.0996},
    "terrain": {"kind": "rolling", "base_h": 30.0, "amp": 2.5, "wavelength_m": 70.0},
    "boxes": [
      {"lat_min": 32.70030, "lat_max": 32.70062,
       "lon_min": -117.10066, "lon_max": -117.10022, "height": 12.0}
    ],
    "cell_m": 0.5,
    "seed": 7,
    "views": [
      {"id": "v0", "azimuth": 80,  "elevation": 76, "time": "2016-03-01T10:30:00Z", "curvature_px": 0.15},
      {"id": "v1", "azimuth": 250, "elevation": 73, "time": "2016-03-18T10:31:00Z", "curvature_px": 0.15},
      {"id": "v2", "azimuth": 150, "elevation": 78, "time": "2016-04-20T10:29:00Z", "curvature_px": 0.15},
      {"id": "v3", "azimuth": 330, "elevation": 74, "time": "2016-07-05T10:32:00Z", "curvature_px": 0.15}
    ]
  },
  "lidar_shift": {"dx_m": 1.5, "dy_m": -1.0, "dz_m": 0.75},
  "adjust": {"tie_source": "detect"},
  "rectify": {"tile_size": 200, "overlap": 48, "h_halfrange": 40.0, "max_pairs": 3},
  "match": {"d_min": -24, "d_max": 24},
  "fuse": {"cell_m": 0.5, "min_pairs": 3},
  "eval": {"n_points": 2500, "tau_buckets": [[0, 25], [100, 250]]}
})";
  return os.str();
}

std::filesystem::path write_config(const std::filesystem::path& io_root) {
  std::filesystem::create_directories(io_root);
  const auto path = io_root / "config.json";
  std::ofstream os(path);
  os << demo_config_json(io_root);
  os.close();
  return path;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p,
                                               int skip_comments = 1) {
  std::ifstream is(p);
  REQUIRE(is.good());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace

TEST_CASE("float raster container round trips NaN and values bit-exactly") {
  Rng rng(3);
  FloatRaster a(37, 23), b(37, 23);
  for (size_t i = 0; i < a.size(); ++i) {
    a.data()[i] = static_cast<float>(rng.uniform(-50, 50));
    b.data()[i] = (i % 7 == 0) ? kInvalid : static_cast<float>(rng.next_gaussian());
  }
  const auto path = std::filesystem::temp_directory_path() / "satstereo_raster.fr";
  write_float_raster(path, {&a, &b});
  const auto back = read_float_raster(path);
  REQUIRE(back.size() == 2);
  CHECK(std::memcmp(back[0].data(), a.data(), a.size() * sizeof(float)) == 0);
  CHECK(std::memcmp(back[1].data(), b.data(), b.size() * sizeof(float)) == 0);
  std::filesystem::remove(path);

  const GridSpec g = GridSpec::make(32.5, 32.6, -117.3, -117.2, 0.5);
  const auto hpath = std::filesystem::temp_directory_path() / "satstereo_grid.hdr";
  write_grid_header(hpath, g);
  const GridSpec gg = read_grid_header(hpath);
  CHECK(gg.same_grid(g));
  CHECK(gg.cell_m == g.cell_m);
  std::filesystem::remove(hpath);
}

TEST_CASE("pipeline: full run, evaluation quality, manifests, determinism") {
  const auto root = test_root();
  std::filesystem::remove_all(root);
  const auto cfg_path = write_config(root);
  const PipelineConfig cfg = load_config(cfg_path);
  CHECK(cfg.jobs == 2);
  CHECK(cfg.scene.views.size() == 4);
  CHECK(cfg.max_pairs == 3);

  run_all(cfg);

  // Every stage left a manifest and the deliverables exist.
  for (const auto& st : stage_names())
    CHECK(std::filesystem::exists(root / "manifests" / (st + ".json")));
  const auto pairs = read_pair_records(root / "pairs" / "pairs.txt");
  REQUIRE(pairs.size() >= 3);
  const std::string d0 = pairs[0].id_a + "__" + pairs[0].id_b;
  for (const char* f : {"disp_ref.fr", "disp_sec.fr", "building_mask.fr", "meta.txt"})
    CHECK(std::filesystem::exists(root / "gt" / d0 / f));
  for (const char* f : {"rect_ref.fr", "rect_sec.fr", "fwd_ref.fr", "inv_sec.fr"})
    CHECK(std::filesystem::exists(root / "rect" / d0 / f));

  // The alignment absorbs both the injected lidar displacement and the
  // datum drift of the control-free bundle, so the recovered offset is not
  // comparable to the injection; what must hold is that the aligned lidar
  // and the fused DSM describe the same surface.
  {
    const Dsm fused = read_height_grid(root / "fuse" / "fused.fr");
    const Dsm aligned = read_height_grid(root / "align" / "lidar_aligned.fr");
    REQUIRE(aligned.grid.same_grid(fused.grid));
    std::vector<double> diffs;
    for (int y = 0; y < fused.grid.height; ++y)
      for (int x = 0; x < fused.grid.width; ++x) {
        const float a = aligned.heights.at(x, y);
        const float b = fused.heights.at(x, y);
        if (std::isfinite(a) && std::isfinite(b))
          diffs.push_back(std::abs(a - b));
      }
    REQUIRE(diffs.size() > 10000);
    std::nth_element(diffs.begin(), diffs.begin() + diffs.size() / 2, diffs.end());
    CHECK(diffs[diffs.size() / 2] < 0.5);  // median |dz| after alignment
  }

  // Rectification protocol under half a pixel, groundtruth close to the
  // analytic oracle, for every processed pair.
  {
    const auto rows = read_csv(root / "eval" / "rect_errors.csv");
    REQUIRE(rows.size() >= 4);  // header + 3 pairs
    for (size_t i = 1; i < rows.size(); ++i) CHECK(std::stod(rows[i][3]) < 0.5);
    const auto fid = read_csv(root / "eval" / "gt_fidelity.csv");
    REQUIRE(fid.size() >= 4);
    for (size_t i = 1; i < fid.size(); ++i) CHECK(std::stod(fid[i][3]) < 0.3);
  }

  // Report echoes the configured tau buckets and carries the summary column.
  {
    std::ifstream is(root / "report" / "summary.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header.find("0:25") != std::string::npos);
    CHECK(header.find("100:250") != std::string::npos);
    const auto rows = read_csv(root / "report" / "summary.csv");
    REQUIRE(rows.size() >= 5);  // comment + header + 3 pairs
  }

  // Idempotent re-run: byte-identical artifact hashes.
  {
    const StageManifest before =
        read_manifest(root / "manifests" / "rectify.json");
    run_stage("rectify", cfg);
    const StageManifest after =
        read_manifest(root / "manifests" / "rectify.json");
    REQUIRE(!before.outputs.empty());
    CHECK(before.outputs == after.outputs);
    CHECK(before.config_hash == after.config_hash);
  }

  // Stale upstream artifacts are detected through the hash chain.
  {
    const auto victim = root / "rect" / d0 / "fwd_ref.fr";
    const auto backup = victim.string() + ".bak";
    std::filesystem::copy_file(victim, backup);
    {
      std::ofstream os(victim, std::ios::binary | std::ios::app);
      os << "tail";
    }
    CHECK_THROWS_AS(run_stage("gt", cfg), MissingUpstream);
    std::filesystem::remove(victim);
    std::filesystem::rename(backup, victim);
  }

  // Hand-made tie-point interchange drives the adjustment directly.
  {
    PipelineConfig file_cfg = cfg;
    file_cfg.tie_source = "file";
    file_cfg.tie_file = (root / "adjust" / "tiepoints.txt").string();
    run_stage("adjust", file_cfg);
    CHECK(std::filesystem::exists(root / "adjust" / "biases.txt"));
  }

  // Externally produced disparity rasters substitute for the matcher output
  // in the benchmark.
  {
    const auto ext = root / "external_disp";
    std::filesystem::create_directories(ext);
    for (const auto& pr : pairs) {
      const auto src = root / "match" / (pr.id_a + "__" + pr.id_b) / "chip.fr";
      if (std::filesystem::exists(src))
        std::filesystem::copy_file(src, ext / (pr.id_a + "__" + pr.id_b + ".fr"));
    }
    PipelineConfig ext_cfg = cfg;
    ext_cfg.external_disparity_dir = ext.string();
    run_stage("eval", ext_cfg);
    const auto rows = read_csv(root / "eval" / "matcher.csv");
    CHECK(rows.size() >= 4);
  }

  // Deleting upstream outputs entirely is also detected.
  {
    std::filesystem::remove_all(root / "rect");
    CHECK_THROWS_AS(run_stage("gt", cfg), MissingUpstream);
  }
  std::filesystem::remove_all(root);
}

TEST_CASE("report: empty eval artifacts produce well-formed csv") {
  const auto root = test_root() / "empty";
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root / "eval");
  std::filesystem::create_directories(root / "manifests");

  auto write_header_only = [&](const char* rel, const char* header) {
    std::ofstream os(root / "eval" / rel);
    os << header << "\n";
  };
  write_header_only("rect_errors.csv",
                    "pair,tau_days,theta_deg,mean_abs_dy,median_abs_dy,"
                    "p95_abs_dy,max_abs_dy,count,skipped");
  write_header_only("gt_fidelity.csv",
                    "pair,tau_days,theta_deg,mean_abs_diff,median_abs_diff,"
                    "p95_abs_diff,max_abs_diff,count,skipped");
  write_header_only("matcher.csv",
                    "pair,tau_days,theta_deg,masked_px,err_gt1px_rate,valid_frac");
  write_header_only("rect_hist.csv", "pair,bin_lo_px,count");

  PipelineConfig cfg;
  cfg.io_root = root;
  ViewSpec v0, v1;
  v0.azimuth_deg = 0;
  v1.azimuth_deg = 180;
  cfg.scene.views = {v0, v1};
  {
    nlohmann::json m;
    m["stage"] = "eval";
    m["config_hash"] = hash_bytes_hex(cfg.canonical_json());
    m["inputs"] = nlohmann::json::object();
    nlohmann::json outs;
    for (const char* rel : {"eval/rect_errors.csv", "eval/gt_fidelity.csv",
                            "eval/matcher.csv", "eval/rect_hist.csv"})
      outs[rel] = hash_file_hex(root / rel);
    m["outputs"] = outs;
    m["version"] = "1";
    std::ofstream os(root / "manifests" / "eval.json");
    os << m.dump(2) << "\n";
  }

  run_stage("report", cfg);
  const auto rows = read_csv(root / "report" / "summary.csv");
  REQUIRE(rows.size() == 2);  // tau-bucket comment + header only
  CHECK(rows[1][0] == "pair");
  const auto byt = read_csv(root / "report" / "matcher_by_tau.csv");
  REQUIRE(byt.size() >= 3);  // comment + header + one row per bucket
  std::filesystem::remove_all(test_root());
}
