#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "synref/error.hpp"

namespace synref {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(a) ^ b);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Deterministic random source. std::mt19937_64 output is fully specified by
/// the standard; the distribution helpers below avoid std::uniform_*
/// distributions, whose mappings are implementation-defined, so streams are
/// identical across compilers and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform index in [0, n). Rejection sampling, no modulo bias.
  std::size_t index(std::size_t n) {
    if (n == 0) throw StateError("Rng::index: empty range");
    const std::uint64_t un = n;
    // r = 2^64 mod n; reject draws in the final partial block.
    const std::uint64_t max = std::numeric_limits<std::uint64_t>::max();
    const std::uint64_t r = (max % un + 1) % un;
    std::uint64_t v = next_u64();
    if (r != 0) {
      const std::uint64_t limit = 0 - r;
      while (v >= limit) v = next_u64();
    }
    return static_cast<std::size_t>(v % un);
  }

  /// Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw StateError("Rng::uniform_int: hi < lo");
    return lo + static_cast<int>(index(static_cast<std::size_t>(hi - lo) + 1));
  }

  /// Standard normal via Box-Muller. Draws two uniforms, returns one value.
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct elements of pool, uniform without replacement; all of pool if
  /// k >= pool.size(). Order of the result is random.
  template <class T>
  std::vector<T> sample(const std::vector<T>& pool, std::size_t k) {
    std::vector<T> scratch = pool;
    if (k >= scratch.size()) {
      shuffle(scratch);
      return scratch;
    }
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + index(scratch.size() - i);
      std::swap(scratch[i], scratch[j]);
    }
    scratch.resize(k);
    return scratch;
  }

  /// Child stream; advances this stream by one draw.
  Rng child() { return Rng(splitmix64(next_u64())); }

  /// Independent stream derived from (seed, tag, index) without touching any
  /// parent stream. Used where per-item determinism must not depend on
  /// iteration order (per-scene evaluation, per-sample proposals).
  static Rng keyed(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
    return Rng(mix64(mix64(seed, fnv1a64(tag)), index));
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw SchemaError("Rng::set_state: malformed state string");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace synref
