#pragma once

#include <Eigen/Dense>
#include <array>
#include <filesystem>
#include <vector>

#include "satstereo/geometry.hpp"

namespace satstereo {

// First-order camera: pixel = A * (lat, lon, h)^T + b, stored as the usual
// 3x4 homogeneous matrix with bottom row (0, 0, 0, 1). Evaluation goes
// through the expansion point: b alone mixes ~1e7-magnitude terms and costs
// a few 1e-9 px to cancellation, which the anchored form avoids.
struct AffineCamera {
  Eigen::Matrix<double, 3, 4> m = Eigen::Matrix<double, 3, 4>::Zero();
  Eigen::Vector3d anchor = Eigen::Vector3d::Zero();     // (lat, lon, h)
  Eigen::Vector2d anchor_px = Eigen::Vector2d::Zero();  // pixel at the anchor

  static AffineCamera from_matrix(const Eigen::Matrix<double, 3, 4>& mat) {
    AffineCamera c;
    c.m = mat;
    c.anchor_px = mat.block<2, 1>(0, 3);
    return c;
  }

  PixelPoint project(const GeoPoint& p) const {
    const Eigen::Vector3d w(p.lat, p.lon, p.h);
    const Eigen::Vector2d q = anchor_px + linear() * (w - anchor);
    return {q.x(), q.y()};
  }
  Eigen::Matrix<double, 2, 3> linear() const { return m.block<2, 3>(0, 0); }
  Eigen::Vector2d offset() const { return m.block<2, 1>(0, 3); }
};

// Rational polynomial coefficient camera (RPC00B coefficient ordering),
// mapping geodetic coordinates to image pixels, plus the constant image-space
// bias used for multi-image alignment. Immutable by convention after
// construction; all member functions are const and thread-safe.
struct RpcModel {
  double line_offset = 0, line_scale = 1;
  double samp_offset = 0, samp_scale = 1;
  double lat_offset = 0, lat_scale = 1;
  double lon_offset = 0, lon_scale = 1;
  double height_offset = 0, height_scale = 1;

  // 20 cubic-monomial coefficients each; denominator constant terms are 1.
  std::array<double, 20> line_num{}, line_den{}, samp_num{}, samp_den{};

  // Additive pixel bias (dx, dy), applied after denormalization.
  double bias_x = 0, bias_y = 0;

  // Normalized coordinates are valid within [-validity_bound, +validity_bound].
  double validity_bound = 1.5;

  // Monomial basis in the standard order: 1, x, y, z, xy, xz, yz, xx, yy, zz,
  // xyz, xxx, xyy, xzz, xxy, yyy, yzz, xxz, yyz, zzz with x=lon_n, y=lat_n,
  // z=h_n.
  static std::array<double, 20> monomials(double x, double y, double z);
  // d(monomials)/d(x, y, z), one row per term.
  static Eigen::Matrix<double, 20, 3> monomial_jacobian(double x, double y, double z);

  PixelPoint project(const GeoPoint& p) const;

  // d(pixel)/d(lat, lon, h) at p, from the analytic rational derivatives.
  Eigen::Matrix<double, 2, 3> jacobian(const GeoPoint& p) const;

  // Newton inversion at fixed height. Initialized at the normalization offset
  // point unless a guess is given; damped steps on divergence.
  GeoPoint inverse_project(const PixelPoint& px, double h) const;
  GeoPoint inverse_project(const PixelPoint& px, double h, const GeoPoint& guess) const;

  AffineCamera affine_approximate(const GeoPoint& x0) const;

  bool in_validity_volume(const GeoPoint& p) const;
};

// Height-parameterized locus of possible matches in the secondary image for a
// reference pixel; n uniform height samples in [h_min, h_max].
std::vector<PixelPoint> epipolar_curve(const RpcModel& rpc_ref,
                                       const RpcModel& rpc_sec,
                                       const PixelPoint& p, double h_min,
                                       double h_max, int n);

// Angle in degrees between the two view rays given by azimuth/elevation.
double intersection_angle_deg(const ViewGeometry& a, const ViewGeometry& b);

// Text serialization: key=value lines with 17-significant-digit floats so the
// decimal round trip is bit-exact. Grammar in docs/formats.md.
void write_rpc_text(const std::filesystem::path& path, const RpcModel& rpc);
RpcModel read_rpc_text(const std::filesystem::path& path);

}  // namespace satstereo
