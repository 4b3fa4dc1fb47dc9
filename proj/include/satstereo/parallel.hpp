#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace satstereo {

// Parallel map over [begin, end). Tasks must write disjoint state; results are
// then independent of the schedule, which is what keeps pipeline artifacts
// byte-identical across parallelism degrees.
inline void parallel_for(int begin, int end, int jobs,
                         const std::function<void(int)>& fn) {
  const int n = end - begin;
  if (n <= 0) return;
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = begin; i < end; ++i) fn(i);
    return;
  }
  std::atomic<int> next(begin);
  std::vector<std::thread> workers;
  workers.reserve(jobs);
  std::exception_ptr error;
  std::mutex error_mutex;
  for (int t = 0; t < jobs; ++t) {
    workers.emplace_back([&]() {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= end) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace satstereo
