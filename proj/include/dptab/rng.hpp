#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace dptab {

// Counter-based random numbers. Every draw is a pure function of a key and a
// counter, so results do not depend on evaluation order or thread count.

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t mix(std::uint64_t a, std::uint64_t b) noexcept {
  return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ull));
}

// FNV-1a, used for name hashing and as the checkpoint payload checksum.
inline constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ull) noexcept {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) noexcept { return mix(seed, fnv1a(tag)); }

// Uniform in the open interval (0, 1) from the top 52 bits. With 53 bits the
// largest value rounds up to 1.
inline double to_unit_open(std::uint64_t bits) noexcept {
  return (static_cast<double>(bits >> 12) + 0.5) * 0x1.0p-52;
}

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) noexcept : key_(key) {}

  std::uint64_t bits(std::uint64_t counter) const noexcept { return mix(key_, counter); }
  double uniform(std::uint64_t counter) const noexcept { return to_unit_open(bits(counter)); }

  // Box-Muller over two independent uniforms derived from one counter.
  double gaussian(std::uint64_t counter) const noexcept {
    const double u1 = to_unit_open(mix(key_, 2 * counter));
    const double u2 = to_unit_open(mix(key_, 2 * counter + 1));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t key() const noexcept { return key_; }

 private:
  std::uint64_t key_;
};

// Sequential convenience wrapper over CounterRng.
class RngStream {
 public:
  explicit RngStream(std::uint64_t key) noexcept : rng_(key) {}

  std::uint64_t next_bits() noexcept { return rng_.bits(counter_++); }
  double uniform() noexcept { return rng_.uniform(counter_++); }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  double gaussian() noexcept { return rng_.gaussian(counter_++); }
  // Uniform integer in [0, n) by multiply-shift; bias is below 2^-32 for the sizes used here.
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_bits()) * n) >> 64);
  }

 private:
  CounterRng rng_;
  std::uint64_t counter_ = 0;
};

}  // namespace dptab
