#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace thin {

// Counter-based generator: every draw is a pure function of (key, counter),
// so independent streams never perturb each other and per-index draws can be
// regenerated without storing state.
namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// Stateless draw keyed by (seed, tag, index). Used for per-sample dataset
// augmentation so generation order is irrelevant.
inline std::uint64_t hash_u64(std::uint64_t seed, std::string_view tag,
                              std::uint64_t index) {
  std::uint64_t k = detail::splitmix64(seed ^ detail::fnv1a64(tag));
  return detail::splitmix64(k ^ detail::splitmix64(index));
}

inline double hash_uniform(std::uint64_t seed, std::string_view tag,
                           std::uint64_t index, double lo, double hi) {
  // 53-bit mantissa in [0,1)
  double u = static_cast<double>(hash_u64(seed, tag, index) >> 11) *
             (1.0 / 9007199254740992.0);
  return lo + u * (hi - lo);
}

// Named stream: a run-level seed is split into independent streams ("init",
// "shuffle", ...) so adding a consumer to one stream never shifts another.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view name)
      : key_(detail::splitmix64(seed ^ detail::fnv1a64(name))) {}

  std::uint64_t next_u64() { return detail::splitmix64(key_ ^ counter_++); }

  double uniform() {  // [0,1)
    return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

  double normal() {  // Box-Muller, two fresh uniforms per draw
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Unbiased integer in [0, n). Rejection keeps the distribution exact; the
  // counter advance is data-dependent but still deterministic per seed.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace thin
