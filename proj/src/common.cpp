#include "tma/common.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

namespace tma {

std::size_t thread_budget() {
  static const std::size_t budget = [] {
    std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("TMA_THREADS")) {
      char* end = nullptr;
      long v = std::strtol(env, &end, 10);
      if (end != env && v > 0) hw = std::min<std::size_t>(hw, static_cast<std::size_t>(v));
    }
    return hw;
  }();
  return budget;
}

void parallel_for(std::size_t n, std::size_t cost_per_item,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  const std::size_t budget = thread_budget();
  // thread startup is ~50us; only fork when there is real work to split
  if (budget <= 1 || n * std::max<std::size_t>(1, cost_per_item) < 262144) {
    fn(0, n);
    return;
  }
  const std::size_t workers = std::min(budget, n);
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t begin = w * chunk;
    std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  fn(0, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace tma
