#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace satstereo {

struct ErrorStats {
  double mean = 0.0;
  double median = 0.0;
  double p95 = 0.0;
  double max = 0.0;
  size_t count = 0;
  size_t skipped = 0;                // samples excluded (invalid pixels etc.)
  double hist_bin_width = 0.25;      // px
  std::vector<size_t> histogram;     // last bin catches the overflow

  static ErrorStats from_samples(std::vector<double> samples, size_t skipped = 0,
                                 double bin_width = 0.25, int bins = 24) {
    ErrorStats s;
    s.skipped = skipped;
    s.hist_bin_width = bin_width;
    s.histogram.assign(static_cast<size_t>(bins), 0);
    s.count = samples.size();
    if (samples.empty()) return s;
    std::sort(samples.begin(), samples.end());
    double sum = 0;
    for (double v : samples) {
      sum += v;
      int b = static_cast<int>(v / bin_width);
      b = std::clamp(b, 0, bins - 1);
      ++s.histogram[static_cast<size_t>(b)];
    }
    s.mean = sum / static_cast<double>(samples.size());
    s.median = samples[(samples.size() - 1) / 2];
    s.p95 = samples[static_cast<size_t>(std::floor(0.95 * (samples.size() - 1)))];
    s.max = samples.back();
    return s;
  }
};

}  // namespace satstereo
