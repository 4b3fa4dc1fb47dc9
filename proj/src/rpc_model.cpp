#include "satstereo/rpc_model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "satstereo/errors.hpp"

namespace satstereo {

namespace {
constexpr double kDenEps = 1e-9;
constexpr double kNewtonTolPx = 1e-6;
constexpr int kNewtonMaxIters = 50;
}  // namespace

std::array<double, 20> RpcModel::monomials(double x, double y, double z) {
  return {1.0,
          x,
          y,
          z,
          x * y,
          x * z,
          y * z,
          x * x,
          y * y,
          z * z,
          x * y * z,
          x * x * x,
          x * y * y,
          x * z * z,
          x * x * y,
          y * y * y,
          y * z * z,
          x * x * z,
          y * y * z,
          z * z * z};
}

Eigen::Matrix<double, 20, 3> RpcModel::monomial_jacobian(double x, double y, double z) {
  Eigen::Matrix<double, 20, 3> m;
  // df/dx            df/dy            df/dz                // term
  m << 0, 0, 0,                                             // 1
      1, 0, 0,                                              // x
      0, 1, 0,                                              // y
      0, 0, 1,                                              // z
      y, x, 0,                                              // xy
      z, 0, x,                                              // xz
      0, z, y,                                              // yz
      2 * x, 0, 0,                                          // xx
      0, 2 * y, 0,                                          // yy
      0, 0, 2 * z,                                          // zz
      y * z, x * z, x * y,                                  // xyz
      3 * x * x, 0, 0,                                      // xxx
      y * y, 2 * x * y, 0,                                  // xyy
      z * z, 0, 2 * x * z,                                  // xzz
      2 * x * y, x * x, 0,                                  // xxy
      0, 3 * y * y, 0,                                      // yyy
      0, z * z, 2 * y * z,                                  // yzz
      2 * x * z, 0, x * x,                                  // xxz
      0, 2 * y * z, y * y,                                  // yyz
      0, 0, 3 * z * z;                                      // zzz
  return m;
}

bool RpcModel::in_validity_volume(const GeoPoint& p) const {
  const double xn = (p.lon - lon_offset) / lon_scale;
  const double yn = (p.lat - lat_offset) / lat_scale;
  const double zn = (p.h - height_offset) / height_scale;
  return std::abs(xn) <= validity_bound && std::abs(yn) <= validity_bound &&
         std::abs(zn) <= validity_bound && std::isfinite(xn + yn + zn);
}

namespace {

inline double dot20(const std::array<double, 20>& c, const std::array<double, 20>& t) {
  double s = 0;
  for (int i = 0; i < 20; ++i) s += c[i] * t[i];
  return s;
}

// Normalized pixel (u=samp, v=line) from normalized geodetic coordinates.
inline void normalized_eval(const RpcModel& r, double xn, double yn, double zn,
                            double& u, double& v) {
  const auto t = RpcModel::monomials(xn, yn, zn);
  const double ds = dot20(r.samp_den, t);
  const double dl = dot20(r.line_den, t);
  if (std::abs(ds) < kDenEps || std::abs(dl) < kDenEps)
    throw DenominatorNearZero("rpc denominator near zero in normalized units");
  u = dot20(r.samp_num, t) / ds;
  v = dot20(r.line_num, t) / dl;
}

// d(u, v)/d(xn, yn, zn).
inline Eigen::Matrix<double, 2, 3> normalized_jacobian(const RpcModel& r, double xn,
                                                       double yn, double zn) {
  const auto t = RpcModel::monomials(xn, yn, zn);
  const Eigen::Matrix<double, 20, 3> jt = RpcModel::monomial_jacobian(xn, yn, zn);
  Eigen::Map<const Eigen::Matrix<double, 20, 1>> tv(t.data());
  Eigen::Map<const Eigen::Matrix<double, 20, 1>> sn(r.samp_num.data());
  Eigen::Map<const Eigen::Matrix<double, 20, 1>> sd(r.samp_den.data());
  Eigen::Map<const Eigen::Matrix<double, 20, 1>> ln(r.line_num.data());
  Eigen::Map<const Eigen::Matrix<double, 20, 1>> ld(r.line_den.data());
  const double ns = sn.dot(tv), ds = sd.dot(tv);
  const double nl = ln.dot(tv), dl = ld.dot(tv);
  if (std::abs(ds) < kDenEps || std::abs(dl) < kDenEps)
    throw DenominatorNearZero("rpc denominator near zero in normalized units");
  // d(n/d) = (d * n' - n * d') / d^2 applied through the monomial jacobian.
  Eigen::Matrix<double, 2, 3> out;
  out.row(0) = ((ds * sn - ns * sd).transpose() * jt) / (ds * ds);
  out.row(1) = ((dl * ln - nl * ld).transpose() * jt) / (dl * dl);
  return out;
}

}  // namespace

PixelPoint RpcModel::project(const GeoPoint& p) const {
  const double xn = (p.lon - lon_offset) / lon_scale;
  const double yn = (p.lat - lat_offset) / lat_scale;
  const double zn = (p.h - height_offset) / height_scale;
  if (!(std::abs(xn) <= validity_bound && std::abs(yn) <= validity_bound &&
        std::abs(zn) <= validity_bound))
    throw OutOfValidityVolume("point outside rpc validity volume");
  double u, v;
  normalized_eval(*this, xn, yn, zn, u, v);
  return {samp_offset + samp_scale * u + bias_x,
          line_offset + line_scale * v + bias_y};
}

Eigen::Matrix<double, 2, 3> RpcModel::jacobian(const GeoPoint& p) const {
  const double xn = (p.lon - lon_offset) / lon_scale;
  const double yn = (p.lat - lat_offset) / lat_scale;
  const double zn = (p.h - height_offset) / height_scale;
  const Eigen::Matrix<double, 2, 3> jn = normalized_jacobian(*this, xn, yn, zn);
  // Chain through normalization and denormalization; reorder columns from
  // (lon, lat, h) to (lat, lon, h).
  Eigen::Matrix<double, 2, 3> j;
  j.col(0) = jn.col(1) / lat_scale;
  j.col(1) = jn.col(0) / lon_scale;
  j.col(2) = jn.col(2) / height_scale;
  j.row(0) *= samp_scale;
  j.row(1) *= line_scale;
  return j;
}

GeoPoint RpcModel::inverse_project(const PixelPoint& px, double h) const {
  return inverse_project(px, h, {lat_offset, lon_offset, h});
}

GeoPoint RpcModel::inverse_project(const PixelPoint& px, double h,
                                   const GeoPoint& guess) const {
  const double u_target = (px.x - bias_x - samp_offset) / samp_scale;
  const double v_target = (px.y - bias_y - line_offset) / line_scale;
  if (std::abs(u_target) > validity_bound || std::abs(v_target) > validity_bound)
    throw OutOfValidityVolume("pixel outside rpc validity window");
  const double zn = (h - height_offset) / height_scale;
  if (std::abs(zn) > validity_bound)
    throw OutOfValidityVolume("height outside rpc validity range");

  double xn = (guess.lon - lon_offset) / lon_scale;
  double yn = (guess.lat - lat_offset) / lat_scale;
  if (!std::isfinite(xn) || !std::isfinite(yn) ||
      std::max(std::abs(xn), std::abs(yn)) > validity_bound) {
    xn = 0;
    yn = 0;
  }

  auto residual_px = [&](double ex, double ey) {
    return std::hypot(ex * samp_scale, ey * line_scale);
  };

  double u, v;
  normalized_eval(*this, xn, yn, zn, u, v);
  double err = residual_px(u - u_target, v - v_target);

  for (int iter = 0; iter < kNewtonMaxIters && err > kNewtonTolPx; ++iter) {
    const Eigen::Matrix<double, 2, 3> jn = normalized_jacobian(*this, xn, yn, zn);
    // 2x2 system in (xn, yn).
    const double a = jn(0, 0), b = jn(0, 1);
    const double c = jn(1, 0), d = jn(1, 1);
    const double det = a * d - b * c;
    if (std::abs(det) < 1e-16)
      throw SingularJacobian("singular 2x2 jacobian in rpc inversion");
    const double fu = u - u_target;
    const double fv = v - v_target;
    double step_x = (d * fu - b * fv) / det;
    double step_y = (-c * fu + a * fv) / det;

    // Damped update: halve the step while it fails to reduce the residual.
    double lambda = 1.0;
    bool improved = false;
    for (int k = 0; k < 10; ++k, lambda *= 0.5) {
      const double tx = xn - lambda * step_x;
      const double ty = yn - lambda * step_y;
      double tu, tv;
      try {
        normalized_eval(*this, tx, ty, zn, tu, tv);
      } catch (const DenominatorNearZero&) {
        continue;
      }
      const double terr = residual_px(tu - u_target, tv - v_target);
      if (terr < err) {
        xn = tx;
        yn = ty;
        u = tu;
        v = tv;
        err = terr;
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }

  if (err > kNewtonTolPx)
    throw NoConvergence("rpc inversion did not reach 1e-6 px");
  return {lat_offset + yn * lat_scale, lon_offset + xn * lon_scale, h};
}

AffineCamera RpcModel::affine_approximate(const GeoPoint& x0) const {
  const Eigen::Matrix<double, 2, 3> j = jacobian(x0);
  const PixelPoint p0 = project(x0);
  const Eigen::Vector3d w0(x0.lat, x0.lon, x0.h);
  const Eigen::Vector2d b = Eigen::Vector2d(p0.x, p0.y) - j * w0;
  AffineCamera cam;
  cam.m.block<2, 3>(0, 0) = j;
  cam.m.block<2, 1>(0, 3) = b;
  cam.m(2, 3) = 1.0;
  cam.anchor = w0;
  cam.anchor_px = Eigen::Vector2d(p0.x, p0.y);
  return cam;
}

std::vector<PixelPoint> epipolar_curve(const RpcModel& rpc_ref,
                                       const RpcModel& rpc_sec,
                                       const PixelPoint& p, double h_min,
                                       double h_max, int n) {
  if (n < 2) throw std::invalid_argument("epipolar_curve: n must be >= 2");
  std::vector<PixelPoint> out;
  out.reserve(n);
  GeoPoint guess{rpc_ref.lat_offset, rpc_ref.lon_offset, h_min};
  for (int i = 0; i < n; ++i) {
    const double h = h_min + (h_max - h_min) * static_cast<double>(i) / (n - 1);
    const GeoPoint w = rpc_ref.inverse_project(p, h, guess);
    guess = w;
    out.push_back(rpc_sec.project(w));
  }
  return out;
}

double intersection_angle_deg(const ViewGeometry& a, const ViewGeometry& b) {
  const double d2r = M_PI / 180.0;
  auto unit = [d2r](const ViewGeometry& v) {
    const double az = v.azimuth_deg * d2r, el = v.elevation_deg * d2r;
    return Eigen::Vector3d(std::sin(az) * std::cos(el),
                           std::cos(az) * std::cos(el), std::sin(el));
  };
  const Eigen::Vector3d u1 = unit(a), u2 = unit(b);
  // atan2 form of cos(theta) = sin e1 sin e2 + cos e1 cos e2 cos(daz);
  // well conditioned near 0 and 180 where acos is not.
  return std::atan2(u1.cross(u2).norm(), u1.dot(u2)) / d2r;
}

namespace {

void put_kv(std::ostream& os, const char* key, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  os << key << " = " << buf << "\n";
}

void put_coeffs(std::ostream& os, const char* key, const std::array<double, 20>& c) {
  os << key << " =";
  char buf[64];
  for (double v : c) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << " " << buf;
  }
  os << "\n";
}

}  // namespace

void write_rpc_text(const std::filesystem::path& path, const RpcModel& r) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "rpc\n";
  put_kv(os, "line_offset", r.line_offset);
  put_kv(os, "line_scale", r.line_scale);
  put_kv(os, "samp_offset", r.samp_offset);
  put_kv(os, "samp_scale", r.samp_scale);
  put_kv(os, "lat_offset", r.lat_offset);
  put_kv(os, "lat_scale", r.lat_scale);
  put_kv(os, "lon_offset", r.lon_offset);
  put_kv(os, "lon_scale", r.lon_scale);
  put_kv(os, "height_offset", r.height_offset);
  put_kv(os, "height_scale", r.height_scale);
  put_coeffs(os, "line_num", r.line_num);
  put_coeffs(os, "line_den", r.line_den);
  put_coeffs(os, "samp_num", r.samp_num);
  put_coeffs(os, "samp_den", r.samp_den);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "bias = %.17g %.17g\n", r.bias_x, r.bias_y);
  os << buf;
  put_kv(os, "validity_bound", r.validity_bound);
}

RpcModel read_rpc_text(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string tag;
  std::getline(is, tag);
  if (tag != "rpc") throw IoError("bad rpc file tag: " + path.string());
  RpcModel r;
  std::string line;
  auto read20 = [&](std::istringstream& ls, std::array<double, 20>& c) {
    for (double& v : c)
      if (!(ls >> v)) throw IoError("short coefficient list in " + path.string());
  };
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key, eq;
    ls >> key >> eq;
    if (eq != "=") throw IoError("bad rpc line: " + line);
    if (key == "line_offset") ls >> r.line_offset;
    else if (key == "line_scale") ls >> r.line_scale;
    else if (key == "samp_offset") ls >> r.samp_offset;
    else if (key == "samp_scale") ls >> r.samp_scale;
    else if (key == "lat_offset") ls >> r.lat_offset;
    else if (key == "lat_scale") ls >> r.lat_scale;
    else if (key == "lon_offset") ls >> r.lon_offset;
    else if (key == "lon_scale") ls >> r.lon_scale;
    else if (key == "height_offset") ls >> r.height_offset;
    else if (key == "height_scale") ls >> r.height_scale;
    else if (key == "line_num") read20(ls, r.line_num);
    else if (key == "line_den") read20(ls, r.line_den);
    else if (key == "samp_num") read20(ls, r.samp_num);
    else if (key == "samp_den") read20(ls, r.samp_den);
    else if (key == "bias") ls >> r.bias_x >> r.bias_y;
    else if (key == "validity_bound") ls >> r.validity_bound;
    else throw IoError("unknown rpc key: " + key);
  }
  if (r.line_scale <= 0 || r.samp_scale <= 0 || r.lat_scale <= 0 ||
      r.lon_scale <= 0 || r.height_scale <= 0)
    throw IoError("rpc scales must be positive: " + path.string());
  return r;
}

}  // namespace satstereo
