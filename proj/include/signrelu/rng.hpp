#pragma once

// Counter-based random streams. A stream is identified by (seed, key); the
// n-th draw is a pure function of (seed, key, n), so results never depend on
// thread scheduling or on how many draws another stream consumed.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace signrelu {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

class Rng {
 public:
  Rng() = default;
  explicit Rng(std::uint64_t seed, std::uint64_t key = 0) noexcept
      : seed_(seed), key_(detail::splitmix64(key ^ detail::splitmix64(seed))) {}

  /// Independent child stream named by `name` and up to three indices.
  Rng derive(std::string_view name, std::uint64_t i = 0, std::uint64_t j = 0,
             std::uint64_t k = 0) const noexcept {
    std::uint64_t h = detail::fnv1a(name);
    h = detail::splitmix64(h ^ key_);
    h = detail::splitmix64(h ^ (i + 0x1234567ULL));
    h = detail::splitmix64(h ^ (j + 0x7654321ULL));
    h = detail::splitmix64(h ^ (k + 0x0badf00dULL));
    Rng child;
    child.seed_ = seed_;
    child.key_ = h;
    return child;
  }

  std::uint64_t next_u64() noexcept {
    return detail::splitmix64(key_ ^ detail::splitmix64(counter_++ + seed_));
  }

  /// Uniform on [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  /// Standard normal (Box-Muller; the second variate is cached).
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace signrelu
