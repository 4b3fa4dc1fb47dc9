#include "satstereo/sgm.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "satstereo/errors.hpp"

namespace satstereo {

CensusRaster census_transform(const FloatRaster& img, int window) {
  if (window < 3 || window % 2 == 0 || window > 7)
    throw std::invalid_argument("census window must be odd, 3..7");
  const int r = window / 2;
  const int w = img.width(), h = img.height();
  CensusRaster out{Raster<uint64_t>(w, h, 0), MaskRaster(w, h, 0)};
  for (int y = r; y < h - r; ++y)
    for (int x = r; x < w - r; ++x) {
      const float c = img.at(x, y);
      if (!std::isfinite(c)) continue;
      uint64_t code = 0;
      bool ok = true;
      for (int dy = -r; dy <= r && ok; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const float v = img.at(x + dx, y + dy);
          if (!std::isfinite(v)) {
            ok = false;
            break;
          }
          code = (code << 1) | (v < c ? 1u : 0u);
        }
      if (!ok) continue;
      out.code.at(x, y) = code;
      out.valid.at(x, y) = 1;
    }
  return out;
}

namespace {

struct CostVolume {
  int w = 0, h = 0, ndisp = 0, d_min = 0;
  uint8_t invalid_cost = 0;  // strictly above any real cost
  std::vector<uint8_t> c;
  std::vector<uint8_t> has_candidate;  // per pixel

  uint8_t& at(int x, int y, int di) {
    return c[(static_cast<size_t>(y) * w + x) * ndisp + di];
  }
  uint8_t at(int x, int y, int di) const {
    return c[(static_cast<size_t>(y) * w + x) * ndisp + di];
  }
};

CostVolume build_cost_volume(const CensusRaster& ref, const CensusRaster& sec,
                             int d_min, int d_max, int census_bits) {
  CostVolume cv;
  cv.w = ref.code.width();
  cv.h = ref.code.height();
  cv.ndisp = d_max - d_min + 1;
  cv.d_min = d_min;
  cv.invalid_cost = static_cast<uint8_t>(census_bits + 8);
  cv.c.assign(static_cast<size_t>(cv.w) * cv.h * cv.ndisp, cv.invalid_cost);
  cv.has_candidate.assign(static_cast<size_t>(cv.w) * cv.h, 0);
  for (int y = 0; y < cv.h; ++y)
    for (int x = 0; x < cv.w; ++x) {
      if (!ref.valid.at(x, y)) continue;
      const uint64_t code = ref.code.at(x, y);
      bool any = false;
      for (int di = 0; di < cv.ndisp; ++di) {
        const int xs = x + d_min + di;
        if (xs < 0 || xs >= sec.code.width() || !sec.valid.at(xs, y)) continue;
        cv.at(x, y, di) =
            static_cast<uint8_t>(std::popcount(code ^ sec.code.at(xs, y)));
        any = true;
      }
      cv.has_candidate[static_cast<size_t>(y) * cv.w + x] = any ? 1 : 0;
    }
  return cv;
}

// One aggregation direction; the recurrence keeps each path value within
// max(C) + P2, so the 8-path sum fits comfortably in uint16.
void aggregate_path(const CostVolume& cv, int dx, int dy, int p1, int p2,
                    std::vector<uint16_t>& agg) {
  const int w = cv.w, h = cv.h, nd = cv.ndisp;
  std::vector<uint16_t> lbuf(static_cast<size_t>(w) * nd, 0);
  std::vector<uint16_t> lprev(static_cast<size_t>(w) * nd, 0);

  const int y_start = dy >= 0 ? 0 : h - 1;
  const int y_end = dy >= 0 ? h : -1;
  const int y_step = dy >= 0 ? 1 : -1;
  const int x_start = dx >= 0 ? 0 : w - 1;
  const int x_end = dx >= 0 ? w : -1;
  const int x_step = dx >= 0 ? 1 : -1;

  for (int y = y_start; y != y_end; y += y_step) {
    for (int x = x_start; x != x_end; x += x_step) {
      const int px = x - dx;
      const bool has_prev = px >= 0 && px < w && (dy == 0 || y != y_start);
      uint16_t* lcur = &lbuf[static_cast<size_t>(x) * nd];
      const uint16_t* lp = nullptr;
      if (has_prev) {
        if (dy == 0)
          lp = &lbuf[static_cast<size_t>(px) * nd];
        else
          lp = &lprev[static_cast<size_t>(px) * nd];
      }
      if (!lp) {
        for (int d = 0; d < nd; ++d) lcur[d] = cv.at(x, y, d);
      } else {
        uint16_t prev_min = std::numeric_limits<uint16_t>::max();
        for (int d = 0; d < nd; ++d) prev_min = std::min(prev_min, lp[d]);
        for (int d = 0; d < nd; ++d) {
          uint16_t best = lp[d];
          if (d > 0) best = std::min<uint16_t>(best, lp[d - 1] + p1);
          if (d + 1 < nd) best = std::min<uint16_t>(best, lp[d + 1] + p1);
          best = std::min<uint16_t>(best, prev_min + p2);
          lcur[d] = static_cast<uint16_t>(cv.at(x, y, d) + best - prev_min);
        }
      }
      uint16_t* out = &agg[(static_cast<size_t>(y) * w + x) * nd];
      for (int d = 0; d < nd; ++d) out[d] = static_cast<uint16_t>(out[d] + lcur[d]);
    }
    if (dy != 0) std::swap(lbuf, lprev);
  }
}

DisparityMap sgm_core(const FloatRaster& ref, const FloatRaster& sec,
                      const SgmParams& p) {
  if (ref.height() != sec.height())
    throw std::invalid_argument("sgm: rectified rasters must have equal height");
  if (p.d_min >= p.d_max)
    throw EmptyDisparityRange("sgm: d_min must be < d_max");
  if (p.p1 <= 0 || p.p2 < p.p1)
    throw std::invalid_argument("sgm: require P2 >= P1 > 0");
  if (p.paths != 4 && p.paths != 8)
    throw std::invalid_argument("sgm: path count must be 4 or 8");

  const int census_bits = p.census_window * p.census_window - 1;
  const CensusRaster cr = census_transform(ref, p.census_window);
  const CensusRaster cs = census_transform(sec, p.census_window);
  const CostVolume cv = build_cost_volume(cr, cs, p.d_min, p.d_max, census_bits);

  const int w = cv.w, h = cv.h, nd = cv.ndisp;
  std::vector<uint16_t> agg(static_cast<size_t>(w) * h * nd, 0);
  const int dirs[8][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1},
                          {1, 1}, {-1, -1}, {1, -1}, {-1, 1}};
  for (int k = 0; k < p.paths; ++k)
    aggregate_path(cv, dirs[k][0], dirs[k][1], p.p1, p.p2, agg);

  DisparityMap out{make_invalid_raster(w, h), MaskRaster(w, h, 0)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!cv.has_candidate[static_cast<size_t>(y) * w + x]) continue;
      const uint16_t* a = &agg[(static_cast<size_t>(y) * w + x) * nd];
      int best_d = -1;
      uint16_t best = std::numeric_limits<uint16_t>::max();
      uint16_t worst = 0;
      for (int d = 0; d < nd; ++d) {
        const bool candidate = cv.at(x, y, d) != cv.invalid_cost;
        if (!candidate) continue;
        worst = std::max(worst, a[d]);
        if (a[d] < best) {  // strict: smallest disparity wins ties
          best = a[d];
          best_d = d;
        }
      }
      if (best_d < 0) continue;
      if (best == worst) continue;  // uninformative cost volume
      double d_val = p.d_min + best_d;
      if (p.subpixel && best_d > 0 && best_d + 1 < nd &&
          cv.at(x, y, best_d - 1) != cv.invalid_cost &&
          cv.at(x, y, best_d + 1) != cv.invalid_cost) {
        // Equiangular fit on the aggregated costs.
        const double cm = a[best_d - 1], c0 = a[best_d], cp = a[best_d + 1];
        const double denom = cm > cp ? (cm - c0) : (cp - c0);
        if (denom > 0) d_val += 0.5 * (cm - cp) / denom;
      }
      out.disp.at(x, y) = static_cast<float>(d_val);
      out.valid.at(x, y) = 1;
    }
  return out;
}

DisparityMap negate(DisparityMap m) {
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x)
      if (m.is_valid(x, y)) m.disp.at(x, y) = -m.disp.at(x, y);
  return m;
}

}  // namespace

DisparityMap sgm_match_right(const FloatRaster& rect_ref, const FloatRaster& rect_sec,
                             const SgmParams& params) {
  SgmParams swapped = params;
  swapped.d_min = -params.d_max;
  swapped.d_max = -params.d_min;
  // Matching secondary against reference searches the negated range; the raw
  // result is x_ref - x_sec, negate to return x_sec - x_ref.
  return negate(sgm_core(rect_sec, rect_ref, swapped));
}

DisparityMap lr_consistency(const DisparityMap& d_left, const DisparityMap& d_right,
                            double tol, int direction) {
  DisparityMap out{make_invalid_raster(d_left.width(), d_left.height()),
                   MaskRaster(d_left.width(), d_left.height(), 0)};
  for (int y = 0; y < d_left.height(); ++y)
    for (int x = 0; x < d_left.width(); ++x) {
      if (!d_left.is_valid(x, y)) continue;
      const double d = d_left.disp.at(x, y);
      const int sx = static_cast<int>(std::lround(x + direction * d));
      if (sx < 0 || sx >= d_right.width() || y >= d_right.height()) continue;
      if (!d_right.is_valid(sx, y)) continue;
      if (std::abs(d - d_right.disp.at(sx, y)) <= tol) {
        out.disp.at(x, y) = static_cast<float>(d);
        out.valid.at(x, y) = 1;
      }
    }
  return out;
}

DisparityMap sgm_match(const FloatRaster& rect_ref, const FloatRaster& rect_sec,
                       const SgmParams& params) {
  const DisparityMap left = sgm_core(rect_ref, rect_sec, params);
  const DisparityMap right = sgm_match_right(rect_ref, rect_sec, params);
  return lr_consistency(left, right, params.lr_tolerance, +1);
}

}  // namespace satstereo
