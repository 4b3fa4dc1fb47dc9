#include "satstereo/tie_points.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "satstereo/errors.hpp"
#include "satstereo/rng.hpp"

namespace satstereo {

// --- detection and matching -------------------------------------------------

namespace {

FloatRaster box_blur5(const FloatRaster& src) {
  const int w = src.width(), h = src.height();
  FloatRaster tmp(w, h, 0.f), dst(w, h, 0.f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float s = 0;
      for (int k = -2; k <= 2; ++k)
        s += src.at(std::clamp(x + k, 0, w - 1), y);
      tmp.at(x, y) = s / 5.f;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float s = 0;
      for (int k = -2; k <= 2; ++k)
        s += tmp.at(x, std::clamp(y + k, 0, h - 1));
      dst.at(x, y) = s / 5.f;
    }
  return dst;
}

}  // namespace

std::vector<Keypoint> detect_corners(const FloatRaster& img, const DetectParams& p) {
  const int w = img.width(), h = img.height();
  if (w < 8 || h < 8) return {};

  FloatRaster ixx(w, h, 0.f), iyy(w, h, 0.f), ixy(w, h, 0.f);
  for (int y = 1; y < h - 1; ++y)
    for (int x = 1; x < w - 1; ++x) {
      const float gx = 0.5f * (img.at(x + 1, y) - img.at(x - 1, y));
      const float gy = 0.5f * (img.at(x, y + 1) - img.at(x, y - 1));
      if (!std::isfinite(gx) || !std::isfinite(gy)) continue;
      ixx.at(x, y) = gx * gx;
      iyy.at(x, y) = gy * gy;
      ixy.at(x, y) = gx * gy;
    }
  ixx = box_blur5(ixx);
  iyy = box_blur5(iyy);
  ixy = box_blur5(ixy);

  FloatRaster score(w, h, 0.f);
  float max_score = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float a = ixx.at(x, y), b = iyy.at(x, y), c = ixy.at(x, y);
      const float det = a * b - c * c;
      const float tr = a + b;
      const float r = det - static_cast<float>(p.harris_k) * tr * tr;
      score.at(x, y) = r;
      max_score = std::max(max_score, r);
    }
  if (max_score <= 0) return {};
  const float thresh = static_cast<float>(p.rel_threshold) * max_score;

  std::vector<Keypoint> out;
  const int r = p.nms_radius;
  const int margin = std::max(r + 1, p.patch / 2 + 1);
  for (int y = margin; y < h - margin; ++y)
    for (int x = margin; x < w - margin; ++x) {
      const float s = score.at(x, y);
      if (s < thresh) continue;
      // Strict maximum; plateau ties are dropped on both sides.
      bool is_max = true;
      for (int dy = -r; dy <= r && is_max; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          if (dx == 0 && dy == 0) continue;
          if (score.at(x + dx, y + dy) >= s) {
            is_max = false;
            break;
          }
        }
      if (!is_max) continue;
      // Subpixel refinement by a separable quadratic fit.
      Keypoint kp{static_cast<double>(x), static_cast<double>(y), s};
      const double dxs = 0.5 * (score.at(x + 1, y) - score.at(x - 1, y));
      const double dxx = score.at(x + 1, y) - 2.0 * s + score.at(x - 1, y);
      const double dys = 0.5 * (score.at(x, y + 1) - score.at(x, y - 1));
      const double dyy = score.at(x, y + 1) - 2.0 * s + score.at(x, y - 1);
      if (dxx < 0) kp.x += std::clamp(-dxs / dxx, -0.5, 0.5);
      if (dyy < 0) kp.y += std::clamp(-dys / dyy, -0.5, 0.5);
      out.push_back(kp);
    }

  std::sort(out.begin(), out.end(), [](const Keypoint& a, const Keypoint& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  if (static_cast<int>(out.size()) > p.max_corners) out.resize(p.max_corners);
  return out;
}

namespace {

// Zero-mean, unit-norm patch descriptor at the rounded keypoint position.
bool extract_patch(const FloatRaster& img, const Keypoint& kp, int patch,
                   std::vector<float>& desc) {
  const int r = patch / 2;
  const int cx = static_cast<int>(std::lround(kp.x));
  const int cy = static_cast<int>(std::lround(kp.y));
  if (cx - r < 0 || cy - r < 0 || cx + r >= img.width() || cy + r >= img.height())
    return false;
  desc.resize(static_cast<size_t>(patch) * patch);
  double mean = 0;
  size_t i = 0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx, ++i) {
      const float v = img.at(cx + dx, cy + dy);
      if (!std::isfinite(v)) return false;
      desc[i] = v;
      mean += v;
    }
  mean /= static_cast<double>(desc.size());
  double norm2 = 0;
  for (float& v : desc) {
    v -= static_cast<float>(mean);
    norm2 += static_cast<double>(v) * v;
  }
  if (norm2 < 1e-12) return false;
  const float inv = static_cast<float>(1.0 / std::sqrt(norm2));
  for (float& v : desc) v *= inv;
  return true;
}

}  // namespace

std::vector<Correspondence> detect_and_match(const FloatRaster& img_a,
                                             const FloatRaster& img_b,
                                             const DetectParams& params) {
  const auto kps_a = detect_corners(img_a, params);
  const auto kps_b = detect_corners(img_b, params);

  std::vector<std::vector<float>> desc_a, desc_b;
  std::vector<Keypoint> pts_a, pts_b;
  std::vector<float> buf;
  for (const auto& k : kps_a)
    if (extract_patch(img_a, k, params.patch, buf)) {
      desc_a.push_back(buf);
      pts_a.push_back(k);
    }
  for (const auto& k : kps_b)
    if (extract_patch(img_b, k, params.patch, buf)) {
      desc_b.push_back(buf);
      pts_b.push_back(k);
    }

  auto ssd = [](const std::vector<float>& u, const std::vector<float>& v) {
    double s = 0;
    for (size_t i = 0; i < u.size(); ++i) {
      const double d = static_cast<double>(u[i]) - v[i];
      s += d * d;
    }
    return s;
  };

  const size_t na = desc_a.size(), nb = desc_b.size();
  std::vector<int> best_ab(na, -1);
  std::vector<double> best_d(na, 0), second_d(na, 0);
  std::vector<int> best_ba(nb, -1);
  std::vector<double> best_d_b(nb, 1e300);

  for (size_t i = 0; i < na; ++i) {
    double d1 = 1e300, d2 = 1e300;
    int j1 = -1;
    for (size_t j = 0; j < nb; ++j) {
      const double d = ssd(desc_a[i], desc_b[j]);
      if (d < d1) {
        d2 = d1;
        d1 = d;
        j1 = static_cast<int>(j);
      } else if (d < d2) {
        d2 = d;
      }
      if (d < best_d_b[j]) {
        best_d_b[j] = d;
        best_ba[j] = static_cast<int>(i);
      }
    }
    best_ab[i] = j1;
    best_d[i] = d1;
    second_d[i] = d2;
  }

  std::vector<Correspondence> out;
  for (size_t i = 0; i < na; ++i) {
    const int j = best_ab[i];
    if (j < 0 || best_ba[static_cast<size_t>(j)] != static_cast<int>(i)) continue;
    if (nb > 1) {
      const double r1 = std::sqrt(best_d[i]);
      const double r2 = std::sqrt(second_d[i]);
      if (!(r1 <= params.ratio_test * r2)) {
        // Exact duplicates (distance 0) pass; ambiguous ties do not.
        if (!(r1 == 0.0 && r2 > 0.0)) continue;
      }
    }
    Correspondence c;
    c.a = {pts_a[i].x, pts_a[i].y};
    c.b = {pts_b[static_cast<size_t>(j)].x, pts_b[static_cast<size_t>(j)].y};
    c.score = 1.0 - 0.5 * best_d[i];  // NCC of normalized patches
    out.push_back(c);
  }
  if (out.size() < 8)
    throw TooFewMatches("detect_and_match found " + std::to_string(out.size()) +
                        " matches (need 8)");
  return out;
}

// --- fundamental matrix -----------------------------------------------------

namespace {

struct NormXform {
  double cx = 0, cy = 0, s = 1;
  Eigen::Matrix3d matrix() const {
    Eigen::Matrix3d t;
    t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
    return t;
  }
};

NormXform normalizer(const std::vector<Correspondence>& corrs, bool side_b) {
  NormXform n;
  double sx = 0, sy = 0;
  for (const auto& c : corrs) {
    sx += side_b ? c.b.x : c.a.x;
    sy += side_b ? c.b.y : c.a.y;
  }
  const double cnt = static_cast<double>(corrs.size());
  n.cx = sx / cnt;
  n.cy = sy / cnt;
  double dist = 0;
  for (const auto& c : corrs) {
    const double dx = (side_b ? c.b.x : c.a.x) - n.cx;
    const double dy = (side_b ? c.b.y : c.a.y) - n.cy;
    dist += std::hypot(dx, dy);
  }
  dist /= cnt;
  n.s = dist > 1e-12 ? std::sqrt(2.0) / dist : 1.0;
  return n;
}

Eigen::Matrix3d enforce_rank2(const Eigen::Matrix3d& f) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(f, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d s = svd.singularValues();
  s(2) = 0;
  return svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
}

Eigen::Matrix3d fix_scale_sign(Eigen::Matrix3d f) {
  const double n = f.norm();
  if (n > 0) f /= n;
  int bi = 0, bj = 0;
  double bv = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (std::abs(f(i, j)) > bv) {
        bv = std::abs(f(i, j));
        bi = i;
        bj = j;
      }
  if (f(bi, bj) < 0) f = -f;
  return f;
}

}  // namespace

Eigen::Matrix3d eight_point(const std::vector<Correspondence>& corrs) {
  const size_t n = corrs.size();
  if (n < 8) throw TooFewMatches("eight_point needs >= 8 correspondences");
  const NormXform na = normalizer(corrs, false);
  const NormXform nb = normalizer(corrs, true);

  Eigen::MatrixXd a(static_cast<Eigen::Index>(n), 9);
  for (size_t i = 0; i < n; ++i) {
    const double xa = na.s * (corrs[i].a.x - na.cx);
    const double ya = na.s * (corrs[i].a.y - na.cy);
    const double xb = nb.s * (corrs[i].b.x - nb.cx);
    const double yb = nb.s * (corrs[i].b.y - nb.cy);
    a.row(static_cast<Eigen::Index>(i)) << xb * xa, xb * ya, xb, yb * xa,
        yb * ya, yb, xa, ya, 1.0;
  }
  // Full V: with exactly 8 rows the thin decomposition has no 9th column.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // A one-dimensional null space is required; a second vanishing singular
  // value means the configuration does not determine F.
  if (sv(7) <= 1e-9 * sv(0))
    throw DegenerateConfiguration("eight_point: rank-deficient design matrix");
  const Eigen::VectorXd f = svd.matrixV().col(8);
  Eigen::Matrix3d fn;
  fn << f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8);
  fn = enforce_rank2(fn);
  const Eigen::Matrix3d out = nb.matrix().transpose() * fn * na.matrix();
  return fix_scale_sign(out);
}

Eigen::Matrix3d affine_fundamental(const std::vector<Correspondence>& corrs) {
  const size_t n = corrs.size();
  if (n < 8) throw TooFewMatches("affine_fundamental needs >= 8 correspondences");
  double mxa = 0, mya = 0, mxb = 0, myb = 0;
  for (const auto& c : corrs) {
    mxa += c.a.x;
    mya += c.a.y;
    mxb += c.b.x;
    myb += c.b.y;
  }
  const double cnt = static_cast<double>(n);
  mxa /= cnt;
  mya /= cnt;
  mxb /= cnt;
  myb /= cnt;
  Eigen::MatrixXd a(static_cast<Eigen::Index>(n), 4);
  for (size_t i = 0; i < n; ++i)
    a.row(static_cast<Eigen::Index>(i)) << corrs[i].b.x - mxb, corrs[i].b.y - myb,
        corrs[i].a.x - mxa, corrs[i].a.y - mya;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(2) <= 1e-9 * sv(0))
    throw DegenerateConfiguration("affine_fundamental: rank-deficient data");
  const Eigen::Vector4d v = svd.matrixV().col(3);
  Eigen::Matrix3d f = Eigen::Matrix3d::Zero();
  f(0, 2) = v(0);
  f(1, 2) = v(1);
  f(2, 0) = v(2);
  f(2, 1) = v(3);
  f(2, 2) = -(v(0) * mxb + v(1) * myb + v(2) * mxa + v(3) * mya);
  return fix_scale_sign(f);
}

double epipolar_distance(const Eigen::Matrix3d& f, const Correspondence& c) {
  const Eigen::Vector3d xa(c.a.x, c.a.y, 1.0);
  const Eigen::Vector3d xb(c.b.x, c.b.y, 1.0);
  const Eigen::Vector3d lb = f * xa;       // line in image b
  const Eigen::Vector3d la = f.transpose() * xb;
  const double db = std::abs(xb.dot(lb)) / std::hypot(lb(0), lb(1));
  const double da = std::abs(xa.dot(la)) / std::hypot(la(0), la(1));
  return std::max(da, db);
}

FundamentalResult estimate_fundamental_ransac(const std::vector<Correspondence>& corrs,
                                              double inlier_tol_px, int max_iters,
                                              uint64_t seed) {
  const size_t n = corrs.size();
  if (n < 8) throw TooFewMatches("ransac needs >= 8 correspondences");

  Rng rng(seed);
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);

  Eigen::Matrix3d best_f = Eigen::Matrix3d::Zero();
  int best_count = -1;
  double best_sse = 0;
  bool any_model = false;
  std::vector<Correspondence> sample(8);

  for (int it = 0; it < max_iters; ++it) {
    for (size_t k = 0; k < 8; ++k) {
      const size_t j = k + rng.next_below(n - k);
      std::swap(idx[k], idx[j]);
      sample[k] = corrs[idx[k]];
    }
    Eigen::Matrix3d f;
    try {
      f = eight_point(sample);
    } catch (const DegenerateConfiguration&) {
      continue;
    }
    any_model = true;
    int count = 0;
    double sse = 0;
    for (const auto& c : corrs) {
      const double e = epipolar_distance(f, c);
      if (e <= inlier_tol_px) {
        ++count;
        sse += e * e;
      }
    }
    if (count > best_count || (count == best_count && sse < best_sse)) {
      best_count = count;
      best_sse = sse;
      best_f = f;
    }
  }
  if (!any_model)
    throw DegenerateConfiguration("ransac: every sample was degenerate");
  if (best_count < 8) throw TooFewInliers("ransac kept fewer than 8 inliers");

  // One refit over the consensus set.
  std::vector<Correspondence> inliers;
  for (const auto& c : corrs)
    if (epipolar_distance(best_f, c) <= inlier_tol_px) inliers.push_back(c);
  try {
    const Eigen::Matrix3d refit = eight_point(inliers);
    int count = 0;
    for (const auto& c : corrs)
      if (epipolar_distance(refit, c) <= inlier_tol_px) ++count;
    if (count >= 8) best_f = refit;
  } catch (const DegenerateConfiguration&) {
    // keep the sample model
  }

  FundamentalResult res;
  res.f = best_f;
  res.inlier_mask.resize(n, 0);
  for (size_t i = 0; i < n; ++i)
    if (epipolar_distance(best_f, corrs[i]) <= inlier_tol_px) {
      res.inlier_mask[i] = 1;
      ++res.inlier_count;
    }
  if (res.inlier_count < 8) throw TooFewInliers("ransac kept fewer than 8 inliers");
  return res;
}

// --- tracks -----------------------------------------------------------------

namespace {

struct Dsu {
  std::vector<int> parent;
  int find(int a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  }
};

}  // namespace

std::vector<Track> build_tracks(const std::vector<PairMatches>& pairwise) {
  // Node identity is the exact (image, pixel) pair.
  std::map<std::tuple<int, double, double>, int> node_ids;
  std::vector<Observation> nodes;
  auto node_of = [&](int image, const PixelPoint& p) {
    const auto key = std::make_tuple(image, p.x, p.y);
    auto it = node_ids.find(key);
    if (it != node_ids.end()) return it->second;
    const int id = static_cast<int>(nodes.size());
    node_ids.emplace(key, id);
    nodes.push_back({image, p});
    return id;
  };

  std::vector<std::pair<int, int>> edges;
  for (const auto& pm : pairwise)
    for (const auto& m : pm.matches)
      edges.emplace_back(node_of(pm.image_a, m.a), node_of(pm.image_b, m.b));

  Dsu dsu;
  dsu.parent.resize(nodes.size());
  std::iota(dsu.parent.begin(), dsu.parent.end(), 0);
  // image -> node within each component, used to refuse conflicting merges
  std::vector<std::map<int, int>> images(nodes.size());
  for (size_t i = 0; i < nodes.size(); ++i)
    images[i] = {{nodes[i].image_id, static_cast<int>(i)}};

  for (const auto& [u, v] : edges) {
    int ru = dsu.find(u), rv = dsu.find(v);
    if (ru == rv) continue;
    if (images[ru].size() < images[rv].size()) std::swap(ru, rv);
    bool conflict = false;
    for (const auto& [img, node] : images[rv]) {
      auto it = images[ru].find(img);
      if (it != images[ru].end() && it->second != node) {
        conflict = true;
        break;
      }
    }
    if (conflict) continue;  // conservative split: drop the merge
    for (const auto& [img, node] : images[rv]) images[ru].emplace(img, node);
    images[rv].clear();
    dsu.parent[rv] = ru;
  }

  std::map<int, std::vector<int>> components;  // keyed by smallest node id
  for (size_t i = 0; i < nodes.size(); ++i)
    components[dsu.find(static_cast<int>(i))].push_back(static_cast<int>(i));

  std::vector<Track> tracks;
  for (auto& [root, members] : components) {
    if (members.size() < 2) continue;
    Track t;
    for (int m : members) t.observations.push_back(nodes[static_cast<size_t>(m)]);
    std::sort(t.observations.begin(), t.observations.end(),
              [](const Observation& a, const Observation& b) {
                return a.image_id < b.image_id;
              });
    tracks.push_back(std::move(t));
  }
  return tracks;
}

// --- bundle adjustment --------------------------------------------------------

namespace {

double total_rmse(const std::vector<RpcModel>& rpcs,
                  const std::vector<Track>& tracks,
                  const std::vector<Eigen::Vector2d>& bias,
                  const std::vector<char>* active = nullptr) {
  double sse = 0;
  size_t cnt = 0;
  for (size_t k = 0; k < tracks.size(); ++k) {
    if (active && !(*active)[k]) continue;
    for (const auto& o : tracks[k].observations) {
      const auto& rpc = rpcs[static_cast<size_t>(o.image_id)];
      PixelPoint p;
      try {
        p = rpc.project(tracks[k].world_estimate);
      } catch (const Error&) {
        continue;
      }
      const double dx = p.x + bias[static_cast<size_t>(o.image_id)].x() - o.px.x;
      const double dy = p.y + bias[static_cast<size_t>(o.image_id)].y() - o.px.y;
      sse += dx * dx + dy * dy;
      ++cnt;
    }
  }
  return cnt ? std::sqrt(sse / static_cast<double>(cnt)) : 0.0;
}

}  // namespace

BiasSolution bundle_adjust_bias(const std::vector<RpcModel>& rpcs,
                                std::vector<Track>& tracks,
                                const BundleOptions& opts) {
  const size_t n_img = rpcs.size();
  if (n_img < 2)
    throw std::invalid_argument("bundle_adjust_bias needs >= 2 images");
  if (opts.gauge_index < 0 || static_cast<size_t>(opts.gauge_index) >= n_img)
    throw std::invalid_argument("gauge index out of range");
  for (const auto& t : tracks)
    if (t.observations.size() < 2)
      throw UnderconstrainedTrack("track with fewer than 2 observations");

  std::vector<Eigen::Vector2d> bias(n_img, Eigen::Vector2d::Zero());
  const size_t gauge = static_cast<size_t>(opts.gauge_index);

  // Bias parameter slots; the gauge image stays out of the state entirely.
  std::vector<int> slot(n_img, -1);
  int n_slots = 0;
  for (size_t i = 0; i < n_img; ++i)
    if (i != gauge) slot[i] = n_slots++;

  // Seed world estimates from the first observation's back projection.
  // Tracks whose estimates ever leave the validity volumes (grossly wrong
  // matches that survived pruning) are dropped from the solve.
  const size_t nk = tracks.size();
  std::vector<char> active(nk, 1);
  for (size_t k = 0; k < nk; ++k) {
    const auto& o0 = tracks[k].observations.front();
    const auto& rpc0 = rpcs[static_cast<size_t>(o0.image_id)];
    try {
      tracks[k].world_estimate = rpc0.inverse_project(o0.px, rpc0.height_offset);
    } catch (const Error&) {
      active[k] = 0;
    }
  }

  auto huber_weight = [&](const Eigen::Vector2d& r) {
    if (!opts.huber) return 1.0;
    const double n = r.norm();
    return n <= opts.huber_delta_px ? 1.0 : opts.huber_delta_px / n;
  };

  BiasSolution sol;
  double rmse = total_rmse(rpcs, tracks, bias, &active);
  sol.rmse_history.push_back(rmse);
  sol.converged = false;

  const int nb = 2 * n_slots;

  for (int iter = 0; iter < opts.max_iters; ++iter) {
    // Joint Gauss-Newton over biases and world points; the world block is
    // 3x3 block diagonal and eliminated by its Schur complement. Jacobians
    // are the affine approximations refreshed at the current estimates.
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(nb, nb);
    Eigen::VectorXd g_b = Eigen::VectorXd::Zero(nb);
    std::vector<Eigen::Matrix3d> v(nk, Eigen::Matrix3d::Zero());
    std::vector<Eigen::Vector3d> g_w(nk, Eigen::Vector3d::Zero());
    // W blocks: per (track, observation) the 2x3 world jacobian, keyed by slot.
    std::vector<std::vector<std::pair<int, Eigen::Matrix<double, 2, 3>>>> w_blocks(nk);

    for (size_t k = 0; k < nk; ++k) {
      if (!active[k]) continue;
      auto& t = tracks[k];
      // Stage the track's contributions; commit only if every observation
      // evaluates inside the validity volumes.
      Eigen::Matrix3d vk = Eigen::Matrix3d::Zero();
      Eigen::Vector3d gk = Eigen::Vector3d::Zero();
      std::vector<std::pair<int, Eigen::Matrix<double, 2, 3>>> wb;
      std::vector<std::tuple<int, double, Eigen::Vector2d>> gb;  // slot, wt, wt*r
      bool ok = true;
      for (const auto& o : t.observations) {
        const size_t img = static_cast<size_t>(o.image_id);
        AffineCamera cam;
        try {
          cam = rpcs[img].affine_approximate(t.world_estimate);
        } catch (const Error&) {
          ok = false;
          break;
        }
        const PixelPoint p = cam.project(t.world_estimate);
        const Eigen::Vector2d r(p.x + bias[img].x() - o.px.x,
                                p.y + bias[img].y() - o.px.y);
        const Eigen::Matrix<double, 2, 3> a = cam.linear();
        const double wt = huber_weight(r);
        vk += wt * a.transpose() * a;
        gk += wt * a.transpose() * r;
        if (slot[img] >= 0) {
          wb.emplace_back(2 * slot[img], wt * a);
          gb.emplace_back(2 * slot[img], wt, wt * r);
        }
      }
      if (!ok || std::abs(vk.determinant()) < 1e-18) {
        active[k] = 0;
        continue;
      }
      v[k] = vk;
      g_w[k] = gk;
      w_blocks[k] = std::move(wb);
      for (const auto& [si, wt, wr] : gb) {
        s.block<2, 2>(si, si) += wt * Eigen::Matrix2d::Identity();
        g_b.segment<2>(si) += wr;
      }
    }

    // Schur reduction onto the bias block.
    std::vector<Eigen::Matrix3d> v_inv(nk);
    for (size_t k = 0; k < nk; ++k) {
      if (!active[k]) continue;
      Eigen::LDLT<Eigen::Matrix3d> ldlt(v[k]);
      if (ldlt.info() != Eigen::Success) {
        active[k] = 0;
        continue;
      }
      v_inv[k] = ldlt.solve(Eigen::Matrix3d::Identity());
      for (const auto& [si, wa] : w_blocks[k]) {
        g_b.segment<2>(si) -= wa * v_inv[k] * g_w[k];
        for (const auto& [sj, wb2] : w_blocks[k])
          s.block<2, 2>(si, sj) -= wa * v_inv[k] * wb2.transpose();
      }
    }

    Eigen::VectorXd delta_b = Eigen::VectorXd::Zero(nb);
    if (nb > 0) delta_b = -s.ldlt().solve(g_b);

    std::vector<Eigen::Vector3d> delta_w(nk, Eigen::Vector3d::Zero());
    int n_active = 0;
    for (size_t k = 0; k < nk; ++k) {
      if (!active[k]) continue;
      ++n_active;
      Eigen::Vector3d rhs = -g_w[k];
      for (const auto& [si, wa] : w_blocks[k])
        rhs -= wa.transpose() * delta_b.segment<2>(si);
      delta_w[k] = v_inv[k] * rhs;
    }
    if (n_active == 0) throw TooFewMatches("no usable tracks remain");

    // Damped acceptance: halve the step until the error stops increasing.
    const auto prev_bias = bias;
    std::vector<GeoPoint> prev_worlds;
    prev_worlds.reserve(nk);
    for (const auto& t : tracks) prev_worlds.push_back(t.world_estimate);

    double new_rmse = rmse;
    bool accepted = false;
    double scale = 1.0;
    for (int attempt = 0; attempt < 10; ++attempt, scale *= 0.5) {
      for (size_t i = 0; i < n_img; ++i)
        if (slot[i] >= 0)
          bias[i] = prev_bias[i] + scale * delta_b.segment<2>(2 * slot[i]);
      for (size_t k = 0; k < nk; ++k) {
        tracks[k].world_estimate = {
            prev_worlds[k].lat + scale * delta_w[k](0),
            prev_worlds[k].lon + scale * delta_w[k](1),
            prev_worlds[k].h + scale * delta_w[k](2)};
      }
      new_rmse = total_rmse(rpcs, tracks, bias, &active);
      if (new_rmse <= rmse) {
        accepted = true;
        break;
      }
    }
    sol.iterations = iter + 1;
    if (!accepted) {
      bias = prev_bias;
      for (size_t k = 0; k < nk; ++k) tracks[k].world_estimate = prev_worlds[k];
      sol.converged = true;  // no descent direction left at this tolerance
      break;
    }
    const double improvement = rmse - new_rmse;
    rmse = new_rmse;
    sol.rmse_history.push_back(rmse);
    if (improvement < opts.improvement_tol_px) {
      sol.converged = true;
      break;
    }
  }

  bias[gauge].setZero();
  sol.bias = bias;
  sol.rmse_px = rmse;
  return sol;
}

// --- interchange ------------------------------------------------------------

void write_tie_points(const std::filesystem::path& path,
                      const std::vector<Track>& tracks) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "# track_id image_id x y\n";
  char buf[128];
  for (size_t t = 0; t < tracks.size(); ++t)
    for (const auto& o : tracks[t].observations) {
      std::snprintf(buf, sizeof(buf), "%zu %d %.17g %.17g\n", t, o.image_id,
                    o.px.x, o.px.y);
      os << buf;
    }
}

std::vector<Track> read_tie_points(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::map<size_t, Track> by_id;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    size_t tid;
    Observation o;
    if (!(ls >> tid >> o.image_id >> o.px.x >> o.px.y))
      throw IoError("bad tie-point record: " + line);
    by_id[tid].observations.push_back(o);
  }
  std::vector<Track> tracks;
  tracks.reserve(by_id.size());
  for (auto& [id, t] : by_id) tracks.push_back(std::move(t));
  return tracks;
}

}  // namespace satstereo
