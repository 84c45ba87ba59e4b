#ifndef RIMNAV_PARALLEL_HPP_
#define RIMNAV_PARALLEL_HPP_

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace rimnav {

/// Worker count from RIMNAV_WORKERS, else 1.
inline int default_workers() {
  if (const char* env = std::getenv("RIMNAV_WORKERS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (...) {
    }
  }
  return 1;
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
/// written to per-index slots; the first exception is rethrown.
template <typename F>
void parallel_for(size_t n, int workers, F&& fn) {
  if (workers <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto run = [&] {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> threads;
  const size_t k = std::min<size_t>(static_cast<size_t>(workers), n);
  for (size_t w = 0; w < k; ++w) threads.emplace_back(run);
  for (auto& th : threads) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace rimnav

#endif  // RIMNAV_PARALLEL_HPP_
