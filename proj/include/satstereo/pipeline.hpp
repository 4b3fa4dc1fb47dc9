#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "satstereo/dsm.hpp"
#include "satstereo/groundtruth.hpp"
#include "satstereo/pair_selection.hpp"
#include "satstereo/rectification.hpp"
#include "satstereo/sgm.hpp"
#include "satstereo/synth.hpp"
#include "satstereo/tie_points.hpp"

namespace satstereo {

// Stages in run order. Every stage reads only on-disk artifacts of earlier
// stages (hash-checked through the manifests) and writes its own artifacts
// plus a manifest, so a rerun with identical inputs is byte-identical.
inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {
      "synth", "pairs", "adjust", "rectify", "match",
      "fuse",  "align", "gt",     "eval",    "report"};
  return names;
}

struct PipelineConfig {
  std::filesystem::path io_root = "out";
  int jobs = 1;
  uint64_t master_seed = 1;

  SceneSpec scene;
  AlignmentOffset lidar_shift;       // displacement injected into the stand-in
  std::string radiometric_table;     // per-image gain/offset file; identity if empty

  SelectionConfig selection;

  std::string tie_source = "detect";  // detect | oracle | file
  std::string tie_file;               // interchange records for tie_source=file
  DetectParams detect;
  double ransac_tol_px = 1.0;
  int ransac_iters = 500;
  BundleOptions bundle;

  TileLayout layout;
  TileRectifyOptions tile_rectify;
  int max_pairs = 0;  // cap on processed pairs; 0 = all selected

  SgmParams sgm;

  double fuse_cell_m = 0.5;
  int min_pairs_for_fusion = 5;
  std::string water_mask_path;
  TriangulateOptions triangulate;

  AlignSearch align;
  GtOptions gt;

  RectEvalOptions rect_eval;
  std::vector<std::pair<double, double>> tau_buckets = {{0, 25}, {100, 250}};
  std::string annotations_path;
  // Benchmark externally produced disparity rasters (<dir>/<pair>.fr) in
  // place of the built-in matcher's output.
  std::string external_disparity_dir;

  // Canonical serialization (sorted keys, fixed float formatting) used for
  // the manifest config hash.
  std::string canonical_json() const;
};

PipelineConfig load_config(const std::filesystem::path& path);

struct StageManifest {
  std::string stage;
  std::string config_hash;
  std::map<std::string, std::string> inputs;   // path -> content hash
  std::map<std::string, std::string> outputs;  // path -> content hash
};

StageManifest read_manifest(const std::filesystem::path& path);

// Runs one stage. Throws MissingUpstream when a required upstream manifest is
// absent or its recorded outputs no longer match what is on disk.
void run_stage(const std::string& name, const PipelineConfig& cfg);

void run_all(const PipelineConfig& cfg);

}  // namespace satstereo
