#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "satstereo/rpc_model.hpp"

namespace satstereo {

struct ImageMeta {
  std::string id;
  ViewGeometry geom;  // carries the ISO-8601 acquisition time
};

struct SelectionConfig {
  double off_nadir_min = 5.0;    // inclusive bounds, degrees
  double off_nadir_max = 35.0;
  double max_view_diff = 35.0;   // |off_nadir_a - off_nadir_b|
  double max_time_diff = 300.0;  // days
  double min_intersection = 5.0; // degrees
  double max_intersection = 45.0;
};

struct PairRecord {
  std::string id_a, id_b;  // id_a < id_b lexicographically
  double tau_days = 0;
  double dview_deg = 0;
  double theta_deg = 0;
};

// Days since the Unix epoch for an ISO-8601 UTC timestamp (fractional).
double parse_time_days(const std::string& iso8601);

std::vector<ImageMeta> filter_images(const std::vector<ImageMeta>& metas,
                                     const SelectionConfig& cfg);

// All unordered pairs passing the view-difference, time-difference and
// intersection-angle thresholds, sorted by tau ascending (ties by ids).
std::vector<PairRecord> select_pairs(const std::vector<ImageMeta>& metas,
                                     const SelectionConfig& cfg);

// Text records: "id iso_time azimuth elevation" per line.
void write_image_metas(const std::filesystem::path& path,
                       const std::vector<ImageMeta>& metas);
std::vector<ImageMeta> read_image_metas(const std::filesystem::path& path);

// Text records: "id_a id_b tau_days dview_deg theta_deg" per line.
void write_pair_records(const std::filesystem::path& path,
                        const std::vector<PairRecord>& pairs);
std::vector<PairRecord> read_pair_records(const std::filesystem::path& path);

}  // namespace satstereo
