#pragma once

#include <cmath>
#include <string>

namespace satstereo {

// WGS84-ish mean meters per degree of latitude. A fixed ellipsoid is assumed
// throughout; datum conversions are out of scope.
inline constexpr double kMetersPerDegLat = 111320.0;

inline double meters_per_deg_lon(double lat_deg) {
  return kMetersPerDegLat * std::cos(lat_deg * M_PI / 180.0);
}

struct GeoPoint {
  double lat = 0.0;  // degrees, [-90, 90]
  double lon = 0.0;  // degrees, [-180, 180]
  double h = 0.0;    // meters above the ellipsoid
};

struct PixelPoint {
  double x = 0.0;  // column
  double y = 0.0;  // row
};

struct ViewGeometry {
  double azimuth_deg = 0.0;    // clockwise from north, [0, 360)
  double elevation_deg = 90.0; // above horizon, (0, 90]
  std::string acquisition_time;  // ISO-8601 UTC, e.g. 2016-03-01T10:30:00Z
};

inline double off_nadir_deg(const ViewGeometry& v) { return 90.0 - v.elevation_deg; }

// Regular geographic grid. Cell (ix, iy) has its center at
// (lon0 + ix*dlon, lat0 + iy*dlat); dlat/dlon are derived from a nominal
// metric cell size so cells are near-square on the ground.
struct GridSpec {
  double lat0 = 0.0;
  double lon0 = 0.0;
  double dlat = 0.0;   // degrees per row, > 0
  double dlon = 0.0;   // degrees per column, > 0
  double cell_m = 0.0; // nominal metric cell size
  int width = 0;       // columns (lon)
  int height = 0;      // rows (lat)

  static GridSpec make(double lat_min, double lat_max, double lon_min,
                       double lon_max, double cell_m) {
    GridSpec g;
    const double mid_lat = 0.5 * (lat_min + lat_max);
    g.cell_m = cell_m;
    g.dlat = cell_m / kMetersPerDegLat;
    g.dlon = cell_m / meters_per_deg_lon(mid_lat);
    g.lat0 = lat_min;
    g.lon0 = lon_min;
    g.height = static_cast<int>(std::floor((lat_max - lat_min) / g.dlat)) + 1;
    g.width = static_cast<int>(std::floor((lon_max - lon_min) / g.dlon)) + 1;
    return g;
  }

  bool same_grid(const GridSpec& o) const {
    return lat0 == o.lat0 && lon0 == o.lon0 && dlat == o.dlat &&
           dlon == o.dlon && width == o.width && height == o.height;
  }

  // Fractional cell coordinates of a geographic position.
  double cell_x(double lon) const { return (lon - lon0) / dlon; }
  double cell_y(double lat) const { return (lat - lat0) / dlat; }
  double lon_at(double ix) const { return lon0 + ix * dlon; }
  double lat_at(double iy) const { return lat0 + iy * dlat; }
};

}  // namespace satstereo
