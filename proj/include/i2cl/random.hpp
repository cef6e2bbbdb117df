#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <utility>
#include <vector>

namespace i2cl {

/// 64-bit FNV-1a, used to derive stream ids from names and to hash content.
constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

/// PCG64 (128-bit LCG state, XSL-RR output).
///
/// Distinct `stream` values give statistically independent sequences for the
/// same seed; named streams keep e.g. weight init and calibration noise apart.
class Pcg64 {
 public:
  using result_type = std::uint64_t;

  explicit Pcg64(std::uint64_t seed = 0, std::uint64_t stream = 0) {
    inc_ = (static_cast<unsigned __int128>(stream) << 1u) | 1u;
    state_ = 0;
    step();
    state_ += seed;
    step();
  }

  static Pcg64 named(std::uint64_t seed, std::string_view name) {
    return Pcg64(seed, fnv1a(name));
  }
  static Pcg64 named(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    return Pcg64(seed, fnv1a(name) ^ (index * 0x9E3779B97F4A7C15ull));
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() {
    step();
    const auto hi = static_cast<std::uint64_t>(state_ >> 64u);
    const auto lo = static_cast<std::uint64_t>(state_);
    const unsigned rot = static_cast<unsigned>(state_ >> 122u);
    const std::uint64_t x = hi ^ lo;
    return (x >> rot) | (x << ((64u - rot) & 63u));
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11u) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by rejection (no modulo bias).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) {
      return 0;
    }
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t x = (*this)();
    while (x >= limit) {
      x = (*this)();
    }
    return x % n;
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) {
      u1 = uniform();
    }
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  bool operator==(const Pcg64&) const = default;

 private:
  void step() { state_ = state_ * kMultiplier + inc_; }

  static constexpr unsigned __int128 kMultiplier =
      (static_cast<unsigned __int128>(0x2360ED051FC65DA4ull) << 64u) | 0x4385DF649FCCF645ull;

  unsigned __int128 state_ = 0;
  unsigned __int128 inc_ = 1;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Fisher-Yates shuffle driven by Pcg64 (std::shuffle is not portable).
template <typename T>
void shuffle(std::vector<T>& items, Pcg64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace i2cl
