#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace unblur {

inline std::string to_hex(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xCBF29CE484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Stable seed derivation: a stream tag plus integer coordinates. Used so
// that per-image / per-iteration randomness is a pure function of the
// master seed, independent of evaluation order or thread count.
inline uint64_t derive_seed(uint64_t master, std::string_view tag,
                            uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
  uint64_t h = fnv1a64(tag.data(), tag.size());
  uint64_t s = master;
  s ^= splitmix64(h);
  uint64_t t = s + 0x9E3779B97F4A7C15ULL * (a + 1);
  t = splitmix64(t) + 0xC2B2AE3D27D4EB4FULL * (b + 1);
  t = splitmix64(t) + 0x165667B19E3779F9ULL * (c + 1);
  return splitmix64(t);
}

// xoshiro256++ with Box-Muller normals. Fully specified, identical output
// on every platform for a given seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4];
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace unblur
