// Shared infrastructure: error types, portable RNG, parallel loops.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tma {

// Error hierarchy. Every failure path throws one of these with a message
// that names the offending operation and the shapes/values involved.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched tensor extents, wrong ranks, bad wiring between layers.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid layer / model / run configuration (caught before any compute).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Bad values: non-binary masks, NaN inputs, unknown labels, misuse of the tape.
class ValueError : public Error {
 public:
  explicit ValueError(const std::string& msg) : Error(msg) {}
};

// File format and serialization failures.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Deterministic RNG. std::mt19937_64's output sequence is pinned by the
// standard; the distributions below are hand-rolled so that streams are
// reproducible across platforms and standard library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t bits() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::uint64_t integer(std::uint64_t n) {
    if (n == 0) throw ValueError("Rng::integer: n must be positive");
    std::uint64_t threshold = (~n + 1) % n;  // rejection sampling, no modulo bias
    for (;;) {
      std::uint64_t r = gen_();
      if (r >= threshold) return r % n;
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  // standard normal via Box-Muller
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 6.283185307179586476925286766559 * u2;
    cached_ = radius * std::sin(angle);
    has_cached_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 gen_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

// Worker count for kernel interiors: min(TMA_THREADS, hardware_concurrency),
// at least 1. Read once per process.
std::size_t thread_budget();

// Runs fn(begin, end) over a static partition of [0, n). Each index is
// processed by exactly one worker, so per-element results do not depend on
// the worker count. Falls back to a serial call when n * cost_per_item is
// too small to amortize thread startup.
void parallel_for(std::size_t n, std::size_t cost_per_item,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace tma
