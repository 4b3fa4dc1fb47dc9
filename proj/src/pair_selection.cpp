#include "satstereo/pair_selection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "satstereo/errors.hpp"

namespace satstereo {

namespace {

// Days from the civil epoch 1970-01-01 (Howard Hinnant's algorithm).
int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<int64_t>(doe) - 719468;
}

}  // namespace

double parse_time_days(const std::string& iso8601) {
  int y = 0, mo = 0, d = 0, hh = 0, mi = 0;
  double ss = 0;
  const int n = std::sscanf(iso8601.c_str(), "%d-%d-%dT%d:%d:%lf", &y, &mo, &d,
                            &hh, &mi, &ss);
  if (n < 3) throw ConfigInvalid("bad ISO-8601 timestamp: " + iso8601);
  const double day_frac = (hh * 3600.0 + mi * 60.0 + ss) / 86400.0;
  return static_cast<double>(days_from_civil(y, mo, d)) + day_frac;
}

std::vector<ImageMeta> filter_images(const std::vector<ImageMeta>& metas,
                                     const SelectionConfig& cfg) {
  std::vector<ImageMeta> out;
  for (const auto& m : metas) {
    const double off = off_nadir_deg(m.geom);
    if (off >= cfg.off_nadir_min && off <= cfg.off_nadir_max) out.push_back(m);
  }
  return out;
}

std::vector<PairRecord> select_pairs(const std::vector<ImageMeta>& metas,
                                     const SelectionConfig& cfg) {
  std::vector<ImageMeta> sorted = filter_images(metas, cfg);
  std::sort(sorted.begin(), sorted.end(),
            [](const ImageMeta& a, const ImageMeta& b) { return a.id < b.id; });

  std::vector<PairRecord> out;
  for (size_t i = 0; i < sorted.size(); ++i)
    for (size_t j = i + 1; j < sorted.size(); ++j) {
      const auto& a = sorted[i];
      const auto& b = sorted[j];
      PairRecord r;
      r.id_a = a.id;
      r.id_b = b.id;
      r.tau_days = std::abs(parse_time_days(a.geom.acquisition_time) -
                            parse_time_days(b.geom.acquisition_time));
      r.dview_deg = std::abs(off_nadir_deg(a.geom) - off_nadir_deg(b.geom));
      r.theta_deg = intersection_angle_deg(a.geom, b.geom);
      if (r.tau_days > cfg.max_time_diff) continue;
      if (r.dview_deg > cfg.max_view_diff) continue;
      if (r.theta_deg < cfg.min_intersection || r.theta_deg > cfg.max_intersection)
        continue;
      out.push_back(std::move(r));
    }
  std::sort(out.begin(), out.end(), [](const PairRecord& a, const PairRecord& b) {
    if (a.tau_days != b.tau_days) return a.tau_days < b.tau_days;
    if (a.id_a != b.id_a) return a.id_a < b.id_a;
    return a.id_b < b.id_b;
  });
  return out;
}

void write_image_metas(const std::filesystem::path& path,
                       const std::vector<ImageMeta>& metas) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "# id iso_time azimuth_deg elevation_deg\n";
  char buf[256];
  for (const auto& m : metas) {
    std::snprintf(buf, sizeof(buf), "%s %s %.17g %.17g\n", m.id.c_str(),
                  m.geom.acquisition_time.c_str(), m.geom.azimuth_deg,
                  m.geom.elevation_deg);
    os << buf;
  }
}

std::vector<ImageMeta> read_image_metas(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::vector<ImageMeta> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ImageMeta m;
    if (!(ls >> m.id >> m.geom.acquisition_time >> m.geom.azimuth_deg >>
          m.geom.elevation_deg))
      throw IoError("bad image meta record: " + line);
    out.push_back(std::move(m));
  }
  return out;
}

void write_pair_records(const std::filesystem::path& path,
                        const std::vector<PairRecord>& pairs) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "# id_a id_b tau_days dview_deg theta_deg\n";
  char buf[320];
  for (const auto& p : pairs) {
    std::snprintf(buf, sizeof(buf), "%s %s %.17g %.17g %.17g\n", p.id_a.c_str(),
                  p.id_b.c_str(), p.tau_days, p.dview_deg, p.theta_deg);
    os << buf;
  }
}

std::vector<PairRecord> read_pair_records(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::vector<PairRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    PairRecord p;
    if (!(ls >> p.id_a >> p.id_b >> p.tau_days >> p.dview_deg >> p.theta_deg))
      throw IoError("bad pair record: " + line);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace satstereo
