#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace cakelab {

// Deterministic, platform-independent generator (splitmix64 core).
// std::uniform_*_distribution is implementation-defined, so all derived
// draws are spelled out here.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed), seed_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform index in [0, n). Lemire reduction, bias-free enough for n << 2^64.
  size_t index(size_t n) {
    return size_t((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller (cached spare).
  double next_normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = next_double();
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  // Independent stream derived from the original seed; order of split calls
  // does not affect the result.
  Rng split(uint64_t stream) const {
    Rng r(seed_ ^ (0xD1B54A32D192ED03ull * (stream + 1)));
    r.next_u64();
    return r;
  }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t state_;
  uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cakelab
