#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "satstereo/raster.hpp"
#include "satstereo/rpc_model.hpp"

namespace satstereo {

struct Correspondence {
  PixelPoint a;   // reference view
  PixelPoint b;   // secondary view
  double score = 0.0;  // NCC of the matched descriptors, [-1, 1]
};

struct DetectParams {
  int max_corners = 2000;
  double harris_k = 0.06;
  double rel_threshold = 0.01;   // fraction of the strongest response
  int nms_radius = 2;
  int patch = 11;                // descriptor window, odd
  double ratio_test = 0.8;
};

struct Keypoint {
  double x = 0, y = 0;
  double score = 0;
};

std::vector<Keypoint> detect_corners(const FloatRaster& img, const DetectParams& p);

// Mutually-nearest-neighbor matching of zero-mean normalized patches with a
// ratio test. Deterministic given params. Throws TooFewMatches below 8.
std::vector<Correspondence> detect_and_match(const FloatRaster& img_a,
                                             const FloatRaster& img_b,
                                             const DetectParams& params = {});

struct FundamentalResult {
  Eigen::Matrix3d f;                // rank 2, unit Frobenius norm, fixed sign
  std::vector<uint8_t> inlier_mask; // parallel to the input correspondences
  int inlier_count = 0;
};

// Normalized 8-point least squares over all correspondences (exact-data path).
Eigen::Matrix3d eight_point(const std::vector<Correspondence>& corrs);

// Least-squares affine fundamental matrix (zero upper-left 2x2 block). The
// affine form is exact for the per-tile affine-sensor regime; a projective fit
// on slightly curved data invents a finite epipole instead.
Eigen::Matrix3d affine_fundamental(const std::vector<Correspondence>& corrs);

// Seeded RANSAC around the normalized 8-point solver. Inlier test is the
// symmetric epipolar distance max(d(b, Fa), d(a, F^T b)) <= inlier_tol.
FundamentalResult estimate_fundamental_ransac(const std::vector<Correspondence>& corrs,
                                              double inlier_tol_px, int max_iters,
                                              uint64_t seed);

double epipolar_distance(const Eigen::Matrix3d& f, const Correspondence& c);

// --- tracks ---------------------------------------------------------------

struct Observation {
  int image_id = 0;
  PixelPoint px;
};

struct Track {
  std::vector<Observation> observations;  // at most one per image
  GeoPoint world_estimate;
};

struct PairMatches {
  int image_a = 0;
  int image_b = 0;
  std::vector<Correspondence> matches;
};

// Connected components under match transitivity. A union that would give a
// track two different pixels in one image is skipped, so no conflicting
// tracks are ever produced.
std::vector<Track> build_tracks(const std::vector<PairMatches>& pairwise);

// --- bias bundle adjustment -------------------------------------------------

struct BundleOptions {
  int max_iters = 50;
  double improvement_tol_px = 1e-6;  // stop when RMSE improves less than this
  int gauge_index = 0;               // bias of this image is fixed to (0, 0)
  bool huber = false;
  double huber_delta_px = 1.0;
};

struct BiasSolution {
  std::vector<Eigen::Vector2d> bias;  // per image; gauge entry is exactly 0
  double rmse_px = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> rmse_history;   // accepted iterations, non-increasing
};

// Alternating Gauss-Newton over per-image 2-D biases and per-track world
// points. World points are re-triangulated from affine approximations
// refreshed at the current estimate each outer iteration; bias updates are
// the exact least-squares solution given the world points.
BiasSolution bundle_adjust_bias(const std::vector<RpcModel>& rpcs,
                                std::vector<Track>& tracks,
                                const BundleOptions& opts = {});

// Tie-point interchange records: "track_id image_id x y" per line.
void write_tie_points(const std::filesystem::path& path, const std::vector<Track>& tracks);
std::vector<Track> read_tie_points(const std::filesystem::path& path);

}  // namespace satstereo
