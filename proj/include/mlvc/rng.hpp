#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace mlvc {

// Deterministic randomness contract: fixed algorithms (splitmix64 seeding,
// xoshiro256** stream, 53-bit uniforms, Box-Muller normals) so one seed
// reproduces the same byte stream on every platform and build. Each Rng
// instance is owned by exactly one logical task; parallel or per-chunk work
// derives child seeds instead of sharing a stream.

struct Seed {
  std::uint64_t value = 0;

  Seed child(std::uint64_t stream) const;
};

namespace rngdetail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace rngdetail

inline Seed Seed::child(std::uint64_t stream) const {
  return Seed{rngdetail::mix64(value + rngdetail::kGolden * (stream + 1))};
}

class Rng {
 public:
  explicit Rng(Seed seed) {
    // splitmix64 expansion of the seed into xoshiro256** state
    std::uint64_t sm = seed.value;
    for (auto& word : s_) {
      sm += rngdetail::kGolden;
      word = rngdetail::mix64(sm);
    }
  }
  explicit Rng(std::uint64_t seed) : Rng(Seed{seed}) {}

  std::uint64_t next_u64() {
    const std::uint64_t result = rngdetail::rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rngdetail::rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, 1) with 53-bit resolution
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // unbiased integer in [0, n) by rejection
  std::uint64_t uniform_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_below: n must be positive");
    const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x >= threshold) return x % n;
    }
  }

  // standard normal via Box-Muller; the second variate of each pair is cached
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform01();  // (0, 1], keeps log finite
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * kPi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() <= 1) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

 private:
  static constexpr double kPi = 3.14159265358979323846;

  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mlvc
