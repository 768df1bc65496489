#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace frametrace {

// Deterministic gaussian stream. std::normal_distribution is
// implementation-defined, so we draw uniforms from mt19937_64 (which is
// fully specified) and apply Box-Muller ourselves. Same seed -> same
// bytes on every platform.
class GaussianRng {
 public:
  explicit GaussianRng(std::uint64_t seed) : gen_(seed) {}

  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 in (0,1], u2 in [0,1)
    double u1 = (static_cast<double>(gen_() >> 11) + 1.0) / 9007199254740993.0;
    double u2 = static_cast<double>(gen_() >> 11) / 9007199254740992.0;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  std::vector<float> vector(std::size_t n, float scale = 1.0f) {
    std::vector<float> v(n);
    for (std::size_t i = 0; i < n; ++i)
      v[i] = static_cast<float>(next()) * scale;
    return v;
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Stable 64-bit mix for deriving sub-stream seeds (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace frametrace
