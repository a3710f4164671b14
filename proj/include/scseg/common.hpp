#ifndef SCSEG_COMMON_HPP
#define SCSEG_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace scseg {

// Configuration problems (bad spec values, bad config files, mismatched shapes
// declared ahead of any compute).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem problems: missing files, unreadable paths.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Structurally broken on-disk data. Messages name the offending field/record.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check_arg(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable way to derive independent streams from (seed, tag) pairs.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

// Deterministic RNG. Distributions are implemented by hand on top of the raw
// generator so results do not depend on the standard library's
// implementation-defined distribution algorithms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t raw() { return gen_(); }

  double uniform(double lo = 0.0, double hi = 1.0) {
    double u = (gen_() >> 11) * 0x1.0p-53;
    return lo + u * (hi - lo);
  }

  // Inclusive on both ends.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    check_arg(hi >= lo, "uniform_int: empty range");
    uint64_t n = static_cast<uint64_t>(hi - lo) + 1;
    if (n == 0) return static_cast<int64_t>(gen_());  // full 64-bit range
    uint64_t reject_below = (-n) % n;
    for (;;) {
      uint64_t r = gen_();
      if (r >= reject_below) return lo + static_cast<int64_t>(r % n);
    }
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace scseg

#endif  // SCSEG_COMMON_HPP
