#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mst {

using Shape = std::vector<std::size_t>;

// ---------------------------------------------------------------------------
// Error taxonomy. CLI maps these to exit codes: usage=1, format/io=2, gate=3.
// ---------------------------------------------------------------------------

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& m) : std::runtime_error("dimension error: " + m) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& m) : std::runtime_error("contract error: " + m) {}
};

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& m) : std::runtime_error("format error: " + m) {}
};

struct IntegrityError : std::runtime_error {
  explicit IntegrityError(const std::string& m) : std::runtime_error("integrity error: " + m) {}
};

struct VersionError : std::runtime_error {
  explicit VersionError(const std::string& m) : std::runtime_error("version error: " + m) {}
};

struct TrainingError : std::runtime_error {
  explicit TrainingError(const std::string& m) : std::runtime_error("training error: " + m) {}
};

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Intra-op parallelism. MST_THREADS caps the worker count; the default of 1
// keeps runs reproducible. Work is split into contiguous ranges and every
// output element is produced by exactly one worker with a fixed inner
// reduction order, so results are identical for any thread count.
// ---------------------------------------------------------------------------

inline std::size_t max_threads() {
  static const std::size_t cached = [] {
    const char* env = std::getenv("MST_THREADS");
    if (!env) return std::size_t{1};
    long v = std::strtol(env, nullptr, 10);
    if (v <= 1) return std::size_t{1};
    return static_cast<std::size_t>(v);
  }();
  return cached;
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(max_threads(), n);
  if (workers <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64 so a
// seed pins the byte stream regardless of the standard library's choices.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  std::uint64_t next_u64() {
    // xorshift* keeps the generator self-contained and portable.
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dull;
  }

  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  std::size_t uniform_index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  bool bernoulli(double p) { return uniform01() < p; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 1e-300) u1 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  // Knuth's product method for small rates, moment-matched Gaussian above it.
  std::uint64_t poisson(double lambda) {
    if (lambda <= 0.0) return 0;
    if (lambda < 30.0) {
      const double limit = std::exp(-lambda);
      double prod = 1.0;
      std::uint64_t k = 0;
      do {
        ++k;
        prod *= uniform01();
      } while (prod > limit);
      return k - 1;
    }
    const double draw = normal(lambda, std::sqrt(lambda));
    if (draw <= 0.0) return 0;
    return static_cast<std::uint64_t>(std::llround(draw));
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mst
