#pragma once

#include <cstdint>
#include <cmath>

#include "vlbm/tensor.hpp"

namespace vlbm {

/// Seeded deterministic generator. Uniforms come from iterated splitmix64;
/// normals via Box-Muller. The draw sequence is fully specified by the seed
/// (no library-dependent distributions involved).
class RNGStream {
 public:
  explicit RNGStream(std::uint64_t seed) : seed_(seed), state_(mix(seed ^ 0x5851f42d4c957f2dull)) {}

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_raw() >> 11) * 0x1.0p-53; }

  /// Standard normal (Box-Muller, pairs cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Tensor normal_vec(int n) {
    Tensor t({n});
    for (int i = 0; i < n; ++i) t[i] = normal();
    return t;
  }

  /// Uniform integer in [0, n).
  int uniform_int(int n) {
    int k = static_cast<int>(uniform() * n);
    return k >= n ? n - 1 : k;
  }

  /// Independent stream derived from this stream's seed and a salt. Used to
  /// hand per-episode / per-trajectory streams to workers.
  RNGStream split(std::uint64_t salt) const {
    return RNGStream(mix(seed_ + (salt + 1) * 0x9e3779b97f4a7c15ull));
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t next_raw() {
    state_ = mix(state_);
    return state_;
  }

  std::uint64_t seed_;
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vlbm
